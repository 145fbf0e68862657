"""Reconfigurable replicated state machine assembled from fixed-membership machines."""
from .core import Command, Configuration, OutputEvent, first_config_index, is_prefix
from .rrsm import Replica

__version__ = "0.1.0"

__all__ = ["Command", "Configuration", "OutputEvent", "Replica", "first_config_index", "is_prefix"]
