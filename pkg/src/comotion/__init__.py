"""Coupled two-agent motion learning and reactive generation.

Learns a joint distribution over the latent trajectories of two interacting
agents (full-covariance HMM over concatenated VAE latents), trains the
second agent's decoder against human-conditioned predictions, and generates
reactive motion at test time with optional prior-regularized inverse
kinematics and contact-segment stiffness gating.
"""

from comotion.errors import ConfigError, DataError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericalError", "__version__"]
