"""Per-category prototype memories: softmax writes, softmax reads, and the
compactness/uniqueness penalties that regularize the stored items.

Write similarity normalizes over the *features* of a category; read
similarity normalizes over the *items* of a module. Writes are plain state
mutations (no gradient); reads are differentiable so attention losses can
reach the encoder features.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

UNIQUENESS_FORMS = ("printed", "hinge")


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norms, 1e-30)


class MemoryBank:
    """K matrices of shape items×channels; rows kept at unit L2 norm."""

    def __init__(self, categories: int, items: int, channels: int,
                 rng: np.random.Generator):
        if categories < 1 or items < 1 or channels < 1:
            raise ValueError("categories, items, and channels must be positive")
        self.categories = categories
        self.items = items
        self.channels = channels
        self.modules = [
            _unit_rows(rng.normal(size=(items, channels))) for _ in range(categories)
        ]

    def write(self, category: int, features: np.ndarray) -> None:
        """Softmax-weighted additive update; no-op when the category is absent."""
        features = np.asarray(features, dtype=np.float64)
        if features.size == 0:
            return
        m = self.modules[category]
        p = write_similarity(m, features)
        self.modules[category] = _unit_rows(m + p @ features)

    def save(self, path) -> None:
        """Text dump: one row per item, ``category,item,v0,...,v{C-1}``."""
        with open(path, "w") as fh:
            cols = ",".join(f"v{i}" for i in range(self.channels))
            fh.write(f"category,item,{cols}\n")
            for k, m in enumerate(self.modules):
                for j in range(self.items):
                    vals = ",".join(repr(float(v)) for v in m[j])
                    fh.write(f"{k},{j},{vals}\n")

    @classmethod
    def load(cls, path) -> "MemoryBank":
        rows = {}
        with open(path) as fh:
            next(fh)
            for line in fh:
                parts = line.strip().split(",")
                k, j = int(parts[0]), int(parts[1])
                rows[(k, j)] = np.array([float(v) for v in parts[2:]])
        categories = max(k for k, _ in rows) + 1
        items = max(j for _, j in rows) + 1
        channels = len(next(iter(rows.values())))
        bank = cls.__new__(cls)
        bank.categories, bank.items, bank.channels = categories, items, channels
        bank.modules = [
            np.stack([rows[(k, j)] for j in range(items)]) for k in range(categories)
        ]
        return bank


def write_similarity(items: np.ndarray, features: np.ndarray) -> np.ndarray:
    """p[j, i]: softmax over the features i of ``exp(m_j · g_i)``.

    Each row (one memory item) sums to 1 across the category's features.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError("write_similarity needs at least one feature row")
    scores = items @ features.T
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=1, keepdims=True)


def read(items: np.ndarray | Tensor, query) -> tuple[Tensor, Tensor]:
    """Softmax retrieval for one length-C query.

    Returns (q, retrieved): q[j] softmax-normalized over the memory items,
    retrieved = sum_j q[j] m_j. Differentiable in both arguments.
    """
    items_t = ad.as_tensor(items)
    query_t = ad.as_tensor(query)
    n, c = items_t.shape
    scores = items_t @ query_t.reshape((c, 1))
    q = ad.softmax(scores, axis=0)
    retrieved = items_t.T @ q
    return q.reshape((n,)), retrieved.reshape((c,))


def read_map(items: np.ndarray | Tensor, fmap: Tensor) -> Tensor:
    """Apply ``read`` at every location of a C×H×W map, vectorized."""
    items_t = ad.as_tensor(items)
    if fmap.shape[0] != items_t.shape[1]:
        raise ValueError(
            f"channel mismatch: map has {fmap.shape[0]}, memory has {items_t.shape[1]}")
    c, h, w = fmap.shape
    flat = fmap.reshape((c, h * w))
    q = ad.softmax(items_t @ flat, axis=0)
    return (items_t.T @ q).reshape((c, h, w))


def nearest_features(items: np.ndarray, features: np.ndarray,
                     second: bool = False) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Per-item index of the most similar feature by dot product.

    Ties break toward the lowest feature index. With ``second=True`` also
    returns the runner-up (requires at least two features).
    """
    scores = items @ np.asarray(features, dtype=np.float64).T
    best = scores.argmax(axis=1)
    if not second:
        return best
    masked = scores.copy()
    masked[np.arange(len(best)), best] = -np.inf
    return best, masked.argmax(axis=1)


def compactness_loss(items: np.ndarray, features: Tensor,
                     nearest: np.ndarray | None = None) -> Tensor:
    """Sum over items of the L2 distance to the nearest category feature.

    Gradient flows into the features (the encoder side); the stored items
    enter as constants. ``nearest`` freezes the assignment, e.g. for
    finite-difference checks.
    """
    if features is None or features.shape[0] == 0:
        return Tensor(np.zeros(()))
    if nearest is None:
        nearest = nearest_features(items, features.data)
    chosen = ad.gather_rows(features, nearest)
    diff = ad.sub(ad.as_tensor(items), chosen)
    return ad.norm(diff, axis=1).sum()


def uniqueness_loss(items: np.ndarray, features: Tensor, margin: float,
                    form: str = "printed",
                    pairs: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Triplet-style separation between each item's two closest features.

    ``printed`` evaluates max(d_p - d_n, margin) exactly as published, whose
    floor is the margin itself; ``hinge`` uses max(d_p - d_n + margin, 0).
    Contributes 0 when fewer than two features are present.
    """
    if form not in UNIQUENESS_FORMS:
        raise ValueError(f"unknown uniqueness form {form!r}")
    if features is None or features.shape[0] < 2:
        return Tensor(np.zeros(()))
    if pairs is None:
        pairs = nearest_features(items, features.data, second=True)
    idx_p, idx_n = pairs
    d_p = ad.norm(ad.sub(ad.as_tensor(items), ad.gather_rows(features, idx_p)), axis=1)
    d_n = ad.norm(ad.sub(ad.as_tensor(items), ad.gather_rows(features, idx_n)), axis=1)
    z = ad.sub(d_p, d_n)
    if form == "printed":
        # max(z, margin) = margin + relu(z - margin)
        return ad.relu(z - margin).sum() + margin * items.shape[0]
    return ad.relu(z + margin).sum()


def memory_loss(bank: MemoryBank, feature_sets: Sequence[Tensor | None],
                margin: float, form: str = "printed") -> Tensor:
    """Compactness plus uniqueness, summed over the categories present."""
    if len(feature_sets) != bank.categories:
        raise ValueError("one feature set (or None) per category expected")
    total = Tensor(np.zeros(()))
    for items, feats in zip(bank.modules, feature_sets):
        if feats is None or feats.shape[0] == 0:
            continue
        total = total + compactness_loss(items, feats)
        total = total + uniqueness_loss(items, feats, margin, form)
    return total
