"""Data-driven search for quantum feature maps of fidelity kernels."""

__version__ = "0.1.0"
