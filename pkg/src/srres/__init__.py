"""Residual super-resolution toolkit.

Subpackages: imaging (carriers, IO, degradation, augmentation), variational
(explicit energy solver and one-step inference), networks (generators,
discriminators, projection layer), losses, training (two-stage pipeline),
evaluation (metrics, self-ensemble), cli.
"""

from . import cli, evaluation, imaging, losses, networks, training, variational

__all__ = [
    "cli",
    "evaluation",
    "imaging",
    "losses",
    "networks",
    "training",
    "variational",
]

__version__ = "0.1.0"
