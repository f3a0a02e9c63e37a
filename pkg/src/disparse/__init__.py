"""Per-task saliency sparsification for multitask networks."""

__version__ = "0.1.0"
