"""Meta-learning with an adversarially trained feature-wise shift layer."""

__version__ = "0.1.0"
