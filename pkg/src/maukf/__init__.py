"""Meta-adaptive unscented Kalman filtering toolkit."""

__version__ = "0.1.0"

from . import adaptive, autodiff, dynamics, imm, linalg, policy, rng, ukf  # noqa: F401
