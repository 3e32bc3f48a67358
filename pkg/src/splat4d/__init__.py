"""Score-distillation engine for dynamic 3D Gaussian scenes."""

__version__ = "0.1.0"
