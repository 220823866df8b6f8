"""Higher-order necessary optimality conditions for control-affine systems."""

__version__ = "0.1.0"
