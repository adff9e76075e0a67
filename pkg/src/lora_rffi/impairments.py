"""Transmitter and receiver hardware impairments.

TX chain order is PA nonlinearity -> IQ imbalance -> CFO. RX chain order is
front-end ripple FIR -> IQ imbalance -> CFO.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, InputError
from .lora_phy import ComplexSignal

MAX_IQ_GAIN_DB = 1.0
MAX_IQ_PHASE_RAD = 0.1
MAX_PA_AMP = 0.1
MAX_RIPPLE_TAPS = 5

# Population scales at spread=1.
DEVICE_CFO_SPAN_HZ = 20e3
DEVICE_IQ_GAIN_DB = 0.8
DEVICE_IQ_PHASE_RAD = 0.08
DEVICE_A3_AMP = 0.1
DEVICE_A5_AMP = 0.05
RECEIVER_CFO_HZ = 500.0
RECEIVER_IQ_GAIN_DB = 0.3
RECEIVER_IQ_PHASE_RAD = 0.03
RECEIVER_RIPPLE_STD = 0.15
RECEIVER_RIPPLE_TAPS = 3


def _check_iq(gain_db: float, phase_rad: float, who: str):
    if abs(gain_db) > MAX_IQ_GAIN_DB:
        raise ConfigurationError(f"{who}: |IQ gain imbalance| must be <= {MAX_IQ_GAIN_DB} dB, got {gain_db}")
    if abs(phase_rad) > MAX_IQ_PHASE_RAD:
        raise ConfigurationError(
            f"{who}: |IQ phase imbalance| must be <= {MAX_IQ_PHASE_RAD} rad, got {phase_rad}"
        )


@dataclass(frozen=True)
class DeviceProfile:
    device_id: int
    cfo_hz: float = 0.0
    iq_gain_imbalance_db: float = 0.0
    iq_phase_imbalance_rad: float = 0.0
    pa_coeffs: tuple = (0.0, 0.0, 0.0, 0.0)  # (a3_amp, a3_phase, a5_amp, a5_phase)
    seed: int = 0
    bandwidth_hz: float = 125e3

    def __post_init__(self):
        object.__setattr__(self, "pa_coeffs", tuple(float(c) for c in self.pa_coeffs))
        if self.device_id < 0:
            raise ConfigurationError(f"device_id must be >= 0, got {self.device_id}")
        if not abs(self.cfo_hz) < self.bandwidth_hz / 4:
            raise ConfigurationError(
                f"|cfo_hz| must be < bandwidth/4 = {self.bandwidth_hz / 4}, got {self.cfo_hz}"
            )
        _check_iq(self.iq_gain_imbalance_db, self.iq_phase_imbalance_rad, "DeviceProfile")
        if len(self.pa_coeffs) != 4:
            raise ConfigurationError("pa_coeffs must be (a3_amp, a3_phase, a5_amp, a5_phase)")
        a3, _, a5, _ = self.pa_coeffs
        if abs(a3) > MAX_PA_AMP or abs(a5) > MAX_PA_AMP:
            raise ConfigurationError(f"|a3_amp|, |a5_amp| must be <= {MAX_PA_AMP}, got {a3}, {a5}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pa_coeffs"] = list(self.pa_coeffs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        return cls(**d)


@dataclass(frozen=True)
class ReceiverProfile:
    receiver_id: int
    ripple_response: tuple = (1.0 + 0j,)
    rx_cfo_hz: float = 0.0
    rx_iq_gain_db: float = 0.0
    rx_iq_phase_rad: float = 0.0
    seed: int = 0

    def __post_init__(self):
        taps = tuple(complex(g) for g in self.ripple_response)
        object.__setattr__(self, "ripple_response", taps)
        if not 1 <= len(taps) <= MAX_RIPPLE_TAPS:
            raise ConfigurationError(f"ripple_response must have 1..{MAX_RIPPLE_TAPS} taps, got {len(taps)}")
        energy = sum(abs(g) ** 2 for g in taps)
        if abs(energy - 1.0) > 1e-9:
            raise ConfigurationError(f"ripple_response must have unit energy, got {energy}")
        _check_iq(self.rx_iq_gain_db, self.rx_iq_phase_rad, "ReceiverProfile")

    @property
    def ripple(self) -> np.ndarray:
        return np.array(self.ripple_response, dtype=np.complex128)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ripple_response"] = [[g.real, g.imag] for g in self.ripple_response]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReceiverProfile":
        d = dict(d)
        d["ripple_response"] = tuple(complex(re, im) for re, im in d["ripple_response"])
        return cls(**d)


def _iq_imbalance(x: np.ndarray, gain_db: float, phase_rad: float) -> np.ndarray:
    # Q branch scaled by g and skewed by phi: y = I + j g (Q cos(phi) - I sin(phi))
    g = 10.0 ** (gain_db / 20.0)
    i, q = x.real, x.imag
    return i + 1j * (g * (q * math.cos(phase_rad) - i * math.sin(phase_rad)))


def _rotate(x: np.ndarray, freq_hz: float, fs: float) -> np.ndarray:
    n = np.arange(x.size)
    return x * np.exp(2j * np.pi * freq_hz * n / fs)


def pa_nonlinearity(x: np.ndarray, pa_coeffs) -> np.ndarray:
    a3, p3, a5, p5 = pa_coeffs
    p = np.abs(x) ** 2
    return x * (1 + a3 * np.exp(1j * p3) * p + a5 * np.exp(1j * p5) * p**2)


def apply_tx_impairments(signal: ComplexSignal, profile: DeviceProfile) -> ComplexSignal:
    x = signal.samples.astype(np.complex128, copy=True)
    if profile.pa_coeffs[0] != 0 or profile.pa_coeffs[2] != 0:
        x = pa_nonlinearity(x, profile.pa_coeffs)
    if profile.iq_gain_imbalance_db != 0 or profile.iq_phase_imbalance_rad != 0:
        x = _iq_imbalance(x, profile.iq_gain_imbalance_db, profile.iq_phase_imbalance_rad)
    if profile.cfo_hz != 0:
        x = _rotate(x, profile.cfo_hz, signal.sample_rate_hz)
    return signal.with_samples(x)


def apply_rx_impairments(signal: ComplexSignal, profile: ReceiverProfile) -> ComplexSignal:
    g = profile.ripple
    if len(signal) <= g.size:
        raise InputError(f"signal length {len(signal)} must exceed ripple FIR length {g.size}")
    x = signal.samples.astype(np.complex128, copy=True)
    if not (g.size == 1 and g[0] == 1):
        # causal FIR, output truncated to input length
        x = np.convolve(x, g)[: x.size]
    if profile.rx_iq_gain_db != 0 or profile.rx_iq_phase_rad != 0:
        x = _iq_imbalance(x, profile.rx_iq_gain_db, profile.rx_iq_phase_rad)
    if profile.rx_cfo_hz != 0:
        x = _rotate(x, profile.rx_cfo_hz, signal.sample_rate_hz)
    return signal.with_samples(x)


def _check_spread(spread: float):
    if not 0 < spread <= 1:
        raise ConfigurationError(f"spread must lie in (0, 1], got {spread}")


def sample_device_profiles(count: int, seed: int, spread: float = 1.0,
                           bandwidth_hz: float = 125e3) -> list[DeviceProfile]:
    """Draw a synthetic transmitter population.

    CFOs are stratified over [-span, +span] (one stratum per device, strata
    assigned by a random permutation) so that no two devices collide in CFO;
    all other parameters are drawn independently. Every magnitude scales
    linearly with ``spread``.
    """
    if count < 2:
        raise ConfigurationError(f"count must be >= 2, got {count}")
    _check_spread(spread)
    rng = np.random.default_rng(seed)
    span = DEVICE_CFO_SPAN_HZ * spread
    edges = np.linspace(-span, span, count + 1)
    strata = rng.permutation(count)
    profiles = []
    for k in range(count):
        lo, hi = edges[strata[k]], edges[strata[k] + 1]
        profiles.append(DeviceProfile(
            device_id=k,
            cfo_hz=float(rng.uniform(lo, hi)),
            iq_gain_imbalance_db=float(rng.uniform(-1, 1) * DEVICE_IQ_GAIN_DB * spread),
            iq_phase_imbalance_rad=float(rng.uniform(-1, 1) * DEVICE_IQ_PHASE_RAD * spread),
            pa_coeffs=(
                float(rng.uniform(0, DEVICE_A3_AMP * spread)), float(rng.uniform(-np.pi, np.pi)),
                float(rng.uniform(0, DEVICE_A5_AMP * spread)), float(rng.uniform(-np.pi, np.pi)),
            ),
            seed=int(seed),
            bandwidth_hz=bandwidth_hz,
        ))
    return profiles


def sample_receiver_profiles(count: int, seed: int, spread: float = 1.0,
                             first_id: int = 0) -> list[ReceiverProfile]:
    """Draw receiver front ends: a short complex ripple FIR around a unit main
    tap, plus small IQ imbalance and CFO."""
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    _check_spread(spread)
    rng = np.random.default_rng(seed)
    profiles = []
    for r in range(count):
        taps = np.zeros(RECEIVER_RIPPLE_TAPS, dtype=np.complex128)
        taps[0] = 1.0
        std = RECEIVER_RIPPLE_STD * spread / math.sqrt(2)
        taps[1:] = rng.normal(0, std, RECEIVER_RIPPLE_TAPS - 1) + 1j * rng.normal(0, std, RECEIVER_RIPPLE_TAPS - 1)
        taps /= np.sqrt(np.sum(np.abs(taps) ** 2))
        profiles.append(ReceiverProfile(
            receiver_id=first_id + r,
            ripple_response=tuple(taps),
            rx_cfo_hz=float(rng.uniform(-1, 1) * RECEIVER_CFO_HZ * spread),
            rx_iq_gain_db=float(rng.uniform(-1, 1) * RECEIVER_IQ_GAIN_DB * spread),
            rx_iq_phase_rad=float(rng.uniform(-1, 1) * RECEIVER_IQ_PHASE_RAD * spread),
            seed=int(seed),
        ))
    return profiles
