"""Small convolution stacks: domain discriminators and similarity branches.

All stacks are stride-1 same-padded, so spatial grids stay aligned with the
input masks. Widths follow the reference tables (64 for discriminators,
512/256/128/64 for similarity branches) scaled by a config multiplier.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DISC_WIDTH = 64
SIM_WIDTHS = (512, 256, 128)
SIM_OUT_WIDTH = 64


def scaled(width: int, scale: float) -> int:
    return max(1, round(width * scale))


def he_init(c_in: int, c_out: int, k: int, rng: np.random.Generator) -> np.ndarray:
    std = np.sqrt(2.0 / (c_in * k * k))
    return rng.normal(0.0, std, size=(c_out, c_in, k, k))


class Conv2d:
    """One same-padded conv layer with bias."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        self.weight = Tensor(he_init(c_in, c_out, k, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add_channel_bias(ad.conv2d(x, self.weight), self.bias)

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


class ConvStack:
    """Conv layers with ReLU after each except (optionally) the last.

    ``layers`` gives (out_channels, kernel_size) per conv.
    """

    def __init__(self, c_in: int, layers: Sequence[tuple[int, int]],
                 rng: np.random.Generator, relu_last: bool = False):
        self.convs = []
        for c_out, k in layers:
            self.convs.append(Conv2d(c_in, c_out, k, rng))
            c_in = c_out
        self.relu_last = relu_last
        self.out_channels = c_in

    def __call__(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1 or self.relu_last:
                x = ad.relu(x)
        return x

    def params(self) -> list[Tensor]:
        return [p for conv in self.convs for p in conv.params()]


class Discriminator:
    """Patch-wise domain classifier: GRL, 1×1 and 3×3 convs, sigmoid map.

    The gradient reversal layer at the input makes the encoder maximize the
    least-squares loss this network minimizes. Output is H×W in (0, 1).
    """

    def __init__(self, c_in: int, rng: np.random.Generator,
                 width_scale: float = 1.0, grl_coeff: float = 1.0):
        w = scaled(DISC_WIDTH, width_scale)
        self.stack = ConvStack(c_in, [(w, 1), (w, 3), (w, 3), (1, 3)], rng)
        self.grl_coeff = grl_coeff
        self.grl_enabled = True

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.grl(x, self.grl_coeff) if self.grl_enabled else x
        h = self.stack(h)
        out = ad.sigmoid(h)
        return out.reshape(out.shape[1:])

    def params(self) -> list[Tensor]:
        return self.stack.params()


class SimilarityNet:
    """Embedding branch applied before the learned-similarity cosine.

    Three 3×3 ReLU convs followed by a linear 1×1 projection. The feature
    branch and each per-category retrieval branch share this architecture.
    """

    def __init__(self, c_in: int, rng: np.random.Generator, width_scale: float = 1.0):
        layers = [(scaled(w, width_scale), 3) for w in SIM_WIDTHS]
        layers.append((scaled(SIM_OUT_WIDTH, width_scale), 1))
        self.stack = ConvStack(c_in, layers, rng)
        self.out_channels = self.stack.out_channels

    def __call__(self, x: Tensor) -> Tensor:
        return self.stack(x)

    def params(self) -> list[Tensor]:
        return self.stack.params()
