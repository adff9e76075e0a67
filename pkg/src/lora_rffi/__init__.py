"""Simulator-backed LoRa radio frequency fingerprint identification."""

from .errors import ConfigurationError, CorruptionError, FormatError, InputError, RffiError, StateError
from .lora_phy import ChirpParams, ComplexSignal, synthesize_packet, synthesize_preamble

__version__ = "0.1.0"

__all__ = [
    "ChirpParams", "ComplexSignal", "ConfigurationError", "CorruptionError", "FormatError",
    "InputError", "RffiError", "StateError", "synthesize_packet", "synthesize_preamble",
]
