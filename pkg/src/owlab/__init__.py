"""owlab: a desk-scale open-world detection laboratory.

Pure-numpy building blocks for incremental detection experiments:
imbalance-aware classification losses, feature-map distillation, an
inductively updated classification head with per-class replay queues,
open-world evaluation metrics, and a synthetic task-stream harness that
ties them together behind a CLI.
"""

from owlab import distill, harness, inductive, losses, numcore, openworld

__all__ = [
    "distill",
    "harness",
    "inductive",
    "losses",
    "numcore",
    "openworld",
]

__version__ = "0.1.0"
