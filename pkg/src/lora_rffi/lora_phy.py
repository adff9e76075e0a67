"""Ideal LoRa preamble synthesis.

Only the up-chirp preamble region is generated; payload modulation is not
modelled. The phase restarts at every symbol boundary so that all preamble
symbols of a packet are sample-for-sample identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError


@dataclass(frozen=True)
class ChirpParams:
    amplitude: float = 1.0
    bandwidth_hz: float = 125e3
    symbol_duration_s: float = 2**7 / 125e3
    sample_rate_hz: float = 1e6
    preamble_count: int = 8

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ConfigurationError(f"amplitude must be > 0, got {self.amplitude}")
        if not self.bandwidth_hz > 0:
            raise ConfigurationError(f"bandwidth_hz must be > 0, got {self.bandwidth_hz}")
        if not self.symbol_duration_s > 0:
            raise ConfigurationError(
                f"symbol_duration_s must be > 0, got {self.symbol_duration_s}"
            )
        if not self.sample_rate_hz >= 2 * self.bandwidth_hz:
            raise ConfigurationError(
                "sample_rate_hz must be >= 2 * bandwidth_hz "
                f"({self.sample_rate_hz} < {2 * self.bandwidth_hz})"
            )
        n = self.symbol_duration_s * self.sample_rate_hz
        if abs(n - round(n)) > 1e-6:
            raise ConfigurationError(
                f"symbol_duration_s * sample_rate_hz must be an integer, got {n}"
            )
        if not (isinstance(self.preamble_count, (int, np.integer)) and self.preamble_count >= 1):
            raise ConfigurationError(
                f"preamble_count must be a positive integer, got {self.preamble_count}"
            )

    @classmethod
    def from_spreading_factor(cls, sf: int = 7, **kwargs) -> "ChirpParams":
        """Build params with T = 2**sf / B."""
        bandwidth = kwargs.pop("bandwidth_hz", 125e3)
        return cls(bandwidth_hz=bandwidth, symbol_duration_s=2**sf / bandwidth, **kwargs)

    @property
    def samples_per_symbol(self) -> int:
        return int(round(self.symbol_duration_s * self.sample_rate_hz))

    @property
    def packet_len(self) -> int:
        return self.preamble_count * self.samples_per_symbol

    def to_dict(self) -> dict:
        return {
            "amplitude": self.amplitude,
            "bandwidth_hz": self.bandwidth_hz,
            "symbol_duration_s": self.symbol_duration_s,
            "sample_rate_hz": self.sample_rate_hz,
            "preamble_count": self.preamble_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChirpParams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown chirp keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ComplexSignal:
    """Uniformly sampled complex baseband IQ sequence."""

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if not np.iscomplexobj(samples):
            samples = samples.astype(np.complex128)
        if samples.ndim != 1 or samples.size == 0:
            raise InputError(f"signal must be a non-empty 1-D sequence, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InputError("signal contains non-finite samples")
        if not self.sample_rate_hz > 0:
            raise InputError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))

    def with_samples(self, samples: np.ndarray) -> "ComplexSignal":
        return ComplexSignal(samples, self.sample_rate_hz)


def instantaneous_frequency(params: ChirpParams, t: np.ndarray) -> np.ndarray:
    """f(t) = -B/2 + (B/T) t, the derivative of the chirp phase over 2*pi."""
    return -params.bandwidth_hz / 2 + params.bandwidth_hz / params.symbol_duration_s * t


def synthesize_preamble(params: ChirpParams) -> ComplexSignal:
    """One up-chirp symbol: A exp(j(-pi B t + pi (B/T) t^2)), t = n / fs."""
    n = np.arange(params.samples_per_symbol)
    t = n / params.sample_rate_hz
    b, T = params.bandwidth_hz, params.symbol_duration_s
    phase = -math.pi * b * t + math.pi * (b / T) * t**2
    return ComplexSignal(params.amplitude * np.exp(1j * phase), params.sample_rate_hz)


def synthesize_packet(params: ChirpParams) -> ComplexSignal:
    symbol = synthesize_preamble(params).samples
    return ComplexSignal(np.tile(symbol, params.preamble_count), params.sample_rate_hz)
