"""Invariant tori of near-integrable Hamiltonians by a KAM scheme built on
rational approximations of the frequency vector."""

__version__ = "0.1.0"

from . import logger_config  # noqa: F401  configures the 'kam' logger
