"""Mean-field optimal control solvers: sampled PMP, HJB desk checks and seeded studies."""

__version__ = "0.1.0"
