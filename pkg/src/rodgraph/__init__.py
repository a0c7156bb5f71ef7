"""Probabilistic state estimation for continuum robots.

Sparse nonlinear least squares over factor graphs of SE(3) poses, internal
stresses, wrenches, and actuation variables, with deterministic shooting
solvers as independent ground truth.
"""

__version__ = "0.1.0"
