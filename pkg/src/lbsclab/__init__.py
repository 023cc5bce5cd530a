"""Numerical laboratory for local Lipschitz regularity of minimizers of convex and nonconvex integral functionals."""

__version__ = "0.1.0"
