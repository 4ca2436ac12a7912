"""Task-agnostic privacy-preserving representation learning for federated training."""

__version__ = "0.1.0"
