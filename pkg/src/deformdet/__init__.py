"""Multi-scale deformable-attention detector: sampling kernels, model and toy harness."""

__version__ = "0.1.0"
