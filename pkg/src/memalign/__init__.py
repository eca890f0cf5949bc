"""Memory-guided category-aware adversarial feature alignment, desk scale.

Library + experiment harness: per-category prototype memories, memory-guided
attention maps, global and category-wise least-squares domain discriminators
wired through gradient reversal, and a seeded synthetic two-domain benchmark
for running the ablation ladder.
"""

from .autodiff import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
