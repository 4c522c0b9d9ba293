"""Meta neural tangent kernels, MAML dynamics, and training-free NAS."""

import jax

# Every kernel identity checked in this package is stated at float64 precision.
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
