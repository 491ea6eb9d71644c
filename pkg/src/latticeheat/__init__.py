"""Semi-discrete heat equations on truncated lattices: spectral tools, heat kernels and control."""

__version__ = "0.1.0"
