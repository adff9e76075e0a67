"""Multipath fading channel emulation and the online augmentation sampler.

Channels are tapped delay lines with an exponential power delay profile.
Each tap fades as a Clarke/Jakes sum-of-sinusoids process. Sub-sample tap
delays are applied exactly in the frequency domain on the packet DFT
(circular over the packet; the largest delay used by augmentation is ~2
samples out of thousands).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError
from .lora_phy import ComplexSignal

NUM_TAPS = 8
NUM_SCATTERERS = 32
# Decay constant of the discrete PDP, in units of the target RMS delay spread.
# Taps sit at l * tau_rms; with 8 taps no decay constant makes the RMS spread
# and the log-power slope both exact, so this value splits the residual
# evenly (each lands 2.6% low).
PDP_DECAY_RATIO = 1.0268444339678033
# Max phase advance of any scatterer between two evaluation points of the
# fading process; intermediate samples are linearly interpolated.
FADING_PHASE_STEP = 1e-2


def derive_seed(*keys: int) -> int:
    """Deterministic 64-bit seed from a tuple of non-negative integers.

    Used for every per-packet draw, e.g. ``derive_seed(base, epoch, index)``.
    """
    ss = np.random.SeedSequence([int(k) for k in keys])
    return int(ss.generate_state(1, np.uint64)[0])


def _interval(value, name: str, lower: float | None = None) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name} must be a (low, high) pair, got {value!r}") from None
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ConfigurationError(f"{name} bounds must be finite, got {value!r}")
    if lo > hi:
        raise ConfigurationError(f"{name} is inverted: {lo} > {hi}")
    if lower is not None and lo < lower:
        raise ConfigurationError(f"{name} must be >= {lower}, got {lo}")
    return lo, hi


@dataclass(frozen=True)
class AugmentationRanges:
    rms_delay_spread_ns: tuple = (5.0, 300.0)
    doppler_hz: tuple = (0.0, 5.0)
    snr_db: tuple = (10.0, 40.0)

    def __post_init__(self):
        object.__setattr__(self, "rms_delay_spread_ns",
                           _interval(self.rms_delay_spread_ns, "rms_delay_spread_ns", 0.0))
        object.__setattr__(self, "doppler_hz", _interval(self.doppler_hz, "doppler_hz", 0.0))
        object.__setattr__(self, "snr_db", _interval(self.snr_db, "snr_db"))

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in ("rms_delay_spread_ns", "doppler_hz", "snr_db")}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationRanges":
        unknown = set(d) - {"rms_delay_spread_ns", "doppler_hz", "snr_db"}
        if unknown:
            raise ConfigurationError(f"unknown augmentation range keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass(eq=False)
class ChannelRealization:
    """One draw of h(t).

    ``tap_gains`` is ``(L,)`` for a static channel or ``(L, packet_len)`` when
    the taps fade over the packet.
    """

    tap_delays_s: np.ndarray
    tap_gains: np.ndarray
    doppler_hz: float = 0.0
    seed: int = 0
    tap_powers: np.ndarray = field(default=None)
    rms_delay_spread_s: float = 0.0

    def __post_init__(self):
        self.tap_delays_s = np.asarray(self.tap_delays_s, dtype=np.float64)
        self.tap_gains = np.asarray(self.tap_gains, dtype=np.complex128)
        d = self.tap_delays_s
        if d.ndim != 1 or d.size == 0:
            raise ConfigurationError("tap_delays_s must be a non-empty 1-D sequence")
        if d[0] != 0 or np.any(np.diff(d) < 0):
            raise ConfigurationError("tap delays must be ascending and start at 0")
        if self.tap_gains.shape[0] != d.size:
            raise ConfigurationError("tap_gains must have one row per tap")
        if self.tap_powers is None:
            g = self.tap_gains if self.tap_gains.ndim == 1 else self.tap_gains.mean(axis=1)
            self.tap_powers = np.abs(g) ** 2

    @property
    def is_static(self) -> bool:
        return self.tap_gains.ndim == 1

    @classmethod
    def static(cls, delays_s, gains) -> "ChannelRealization":
        return cls(np.asarray(delays_s, dtype=float), np.asarray(gains, dtype=complex))

    def instantaneous_energy(self) -> np.ndarray:
        """sum_l |h_l|^2, per sample for fading taps."""
        return np.sum(np.abs(self.tap_gains) ** 2, axis=0)

    def frequency_response(self, freqs_hz: np.ndarray, sample: int = 0) -> np.ndarray:
        g = self.tap_gains if self.is_static else self.tap_gains[:, sample]
        return np.exp(-2j * np.pi * np.outer(freqs_hz, self.tap_delays_s)) @ g


def exponential_pdp(rms_delay_spread_s: float, num_taps: int = NUM_TAPS):
    """Tap delays and unit-sum mean powers for a target RMS delay spread."""
    l = np.arange(num_taps, dtype=np.float64)
    powers = np.exp(-l / PDP_DECAY_RATIO)
    powers /= powers.sum()
    return l * rms_delay_spread_s, powers


def sum_of_sinusoids(t: np.ndarray, doppler_hz: float, angles: np.ndarray,
                     phases: np.ndarray) -> np.ndarray:
    """Unit-power Clarke process sum_m exp(j(2 pi fd cos(a_m) t + phi_m)) / sqrt(M).

    ``angles`` and ``phases`` are ``(..., M)``; the result is ``(..., len(t))``.
    """
    m = angles.shape[-1]
    w = 2 * np.pi * doppler_hz * np.cos(angles)
    arg = w[..., :, None] * t + phases[..., :, None]
    return np.exp(1j * arg).sum(axis=-2) / math.sqrt(m)


def _fading_gains(rng, powers, doppler_hz, packet_len, fs):
    angles = rng.uniform(0, 2 * np.pi, (powers.size, NUM_SCATTERERS))
    phases = rng.uniform(0, 2 * np.pi, (powers.size, NUM_SCATTERERS))
    amp = np.sqrt(powers)[:, None]
    if doppler_hz == 0:
        return amp[:, 0] * np.exp(1j * phases).sum(axis=1) / math.sqrt(NUM_SCATTERERS)
    # grid spacing bounded so no scatterer advances more than FADING_PHASE_STEP
    step = max(1, int(min(FADING_PHASE_STEP * fs / (2 * np.pi * doppler_hz), packet_len)))
    n_grid = np.arange(0, packet_len + step, step)
    coarse = sum_of_sinusoids(n_grid / fs, doppler_hz, angles, phases)
    if step == 1:
        fine = coarse[:, :packet_len]
    else:
        w = np.arange(step) / step
        a = coarse * amp
        fine = (a[:, :-1, None] * (1 - w) + a[:, 1:, None] * w).reshape(powers.size, -1)
        return fine[:, :packet_len]
    return amp * fine


def sample_channel(ranges: AugmentationRanges, seed: int, packet_len: int,
                   fs: float) -> ChannelRealization:
    if packet_len < 1:
        raise ConfigurationError(f"packet_len must be >= 1, got {packet_len}")
    rng = np.random.default_rng(seed)
    tau = rng.uniform(*ranges.rms_delay_spread_ns) * 1e-9
    fd = float(rng.uniform(*ranges.doppler_hz))
    delays, powers = exponential_pdp(tau)
    gains = _fading_gains(rng, powers, fd, packet_len, fs)
    return ChannelRealization(delays, gains, doppler_hz=fd, seed=int(seed),
                              tap_powers=powers, rms_delay_spread_s=tau)


def _delay_phasors(f: np.ndarray, delays: np.ndarray) -> np.ndarray:
    """exp(-j 2 pi f tau_l) as an (L, len(f)) array."""
    steps = np.diff(delays)
    if delays.size > 1 and np.allclose(steps, steps[0], rtol=0, atol=1e-18):
        # uniformly spaced taps: successive powers of one phasor
        base = np.exp(-2j * np.pi * f * steps[0])
        out = np.empty((delays.size, f.size), dtype=np.complex128)
        out[0] = 1.0
        for l in range(1, delays.size):
            out[l] = out[l - 1] * base
        return out
    return np.exp(-2j * np.pi * np.outer(delays, f))


def apply_channel(signal: ComplexSignal, ch: ChannelRealization) -> ComplexSignal:
    x = signal.samples
    n = x.size
    if not ch.is_static and ch.tap_gains.shape[1] != n:
        raise InputError(
            f"fading channel was drawn for {ch.tap_gains.shape[1]} samples, signal has {n}"
        )
    X = np.fft.fft(x)
    f = np.fft.fftfreq(n, 1.0 / signal.sample_rate_hz)
    phasors = _delay_phasors(f, ch.tap_delays_s)
    if ch.is_static:
        y = np.fft.ifft(X * (ch.tap_gains @ phasors))
    else:
        delayed = np.fft.ifft(X[None, :] * phasors, axis=1)
        y = np.sum(ch.tap_gains * delayed, axis=0)
    return signal.with_samples(y)


def add_awgn(signal: ComplexSignal, snr_db: float, seed: int) -> ComplexSignal:
    """Add circular complex Gaussian noise at ``snr_db`` relative to the
    signal's empirical mean power. ``snr_db = math.inf`` adds nothing."""
    if snr_db == math.inf:
        return signal.with_samples(signal.samples.copy())
    with np.errstate(over="ignore"):
        p = float(np.mean(np.abs(signal.samples) ** 2))
    if not math.isfinite(p):
        raise InputError("signal power is not finite")
    sigma = math.sqrt(p / 10 ** (snr_db / 10) / 2)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0, sigma, (2, len(signal)))
    return signal.with_samples(signal.samples + noise[0] + 1j * noise[1])


def augment(signal: ComplexSignal, ranges: AugmentationRanges, seed: int) -> ComplexSignal:
    """Random channel + AWGN view of ``signal``; a pure function of its arguments."""
    ch_seed, snr_seed, noise_seed = (derive_seed(seed, i) for i in range(3))
    ch = sample_channel(ranges, ch_seed, len(signal), signal.sample_rate_hz)
    snr = float(np.random.default_rng(snr_seed).uniform(*ranges.snr_db))
    return add_awgn(apply_channel(signal, ch), snr, noise_seed)
