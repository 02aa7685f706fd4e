"""Flow-induced diagonal Gaussian-process layers with a projection-residual
out-of-distribution scorer."""

__version__ = "0.1.0"
