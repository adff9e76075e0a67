"""Time-frequency representations used as network input."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy.signal import windows

from .errors import ConfigurationError, InputError
from .lora_phy import ComplexSignal

LOG_FLOOR = 1e-12
NORMALIZATIONS = ("none", "global_minmax", "per_sample_zscore")


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 128
    hop_len: int = 64
    window_kind: str = "hann"
    crop_band_hz: tuple | None = (-94e3, 94e3)
    normalization: str = "global_minmax"

    def __post_init__(self):
        w, h = self.window_len, self.hop_len
        if w <= 0 or w & (w - 1):
            raise ConfigurationError(f"window_len must be a power of two, got {w}")
        if not 0 < h <= w:
            raise ConfigurationError(f"hop_len must satisfy 0 < hop_len <= window_len, got {h}")
        if self.window_kind not in ("rectangular", "hann"):
            raise ConfigurationError(f"window_kind must be 'rectangular' or 'hann', got {self.window_kind!r}")
        if self.crop_band_hz is not None:
            lo, hi = self.crop_band_hz
            if lo >= hi:
                raise ConfigurationError(f"crop_band_hz must be increasing, got {self.crop_band_hz}")
            object.__setattr__(self, "crop_band_hz", (float(lo), float(hi)))
        if self.normalization not in NORMALIZATIONS:
            raise ConfigurationError(f"normalization must be one of {NORMALIZATIONS}")

    def window(self) -> np.ndarray:
        if self.window_kind == "rectangular":
            return np.ones(self.window_len)
        return windows.hann(self.window_len, sym=False)

    def num_frames(self, signal_len: int) -> int:
        return (signal_len - self.window_len) // self.hop_len + 1

    def freq_axis(self, fs: float) -> np.ndarray:
        f = np.fft.fftshift(np.fft.fftfreq(self.window_len, 1.0 / fs))
        return f[self._band_mask(f)]

    def _band_mask(self, f: np.ndarray) -> np.ndarray:
        if self.crop_band_hz is None:
            return np.ones(f.size, dtype=bool)
        lo, hi = self.crop_band_hz
        return (f >= lo) & (f <= hi)

    def output_shape(self, signal_len: int, fs: float) -> tuple[int, int]:
        return self.freq_axis(fs).size, self.num_frames(signal_len)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["crop_band_hz"] = None if self.crop_band_hz is None else list(self.crop_band_hz)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StftConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown STFT keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("crop_band_hz") is not None:
            d["crop_band_hz"] = tuple(d["crop_band_hz"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    values: np.ndarray  # [freq_bins, time_frames]
    freq_axis_hz: np.ndarray
    time_axis_s: np.ndarray
    normalization: str = "none"

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise InputError(f"spectrogram values must be 2-D, got shape {v.shape}")
        if v.shape != (self.freq_axis_hz.size, self.time_axis_s.size):
            raise InputError(
                f"axis lengths {(self.freq_axis_hz.size, self.time_axis_s.size)} "
                f"do not match grid {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise InputError("spectrogram contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def stft(signal: ComplexSignal, cfg: StftConfig) -> np.ndarray:
    """DC-centred two-sided STFT, ``[window_len, frames]`` (no band crop)."""
    x = signal.samples
    if x.size < cfg.window_len:
        raise InputError(f"signal length {x.size} is shorter than window_len {cfg.window_len}")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_len)[:: cfg.hop_len]
    spec = np.fft.fft(frames * cfg.window(), axis=1)
    return np.fft.fftshift(spec, axes=1).T


def normalize(values: np.ndarray, kind: str) -> np.ndarray:
    if kind == "none":
        return values
    if kind == "global_minmax":
        lo, hi = values.min(), values.max()
        return (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    if kind == "per_sample_zscore":
        sd = values.std()
        return (values - values.mean()) / sd if sd > 0 else np.zeros_like(values)
    raise ConfigurationError(f"unknown normalization {kind!r}")


def log_spectrogram(signal: ComplexSignal, cfg: StftConfig) -> Spectrogram:
    X = stft(signal, cfg)
    f = np.fft.fftshift(np.fft.fftfreq(cfg.window_len, 1.0 / signal.sample_rate_hz))
    keep = cfg._band_mask(f)
    values = np.log(np.abs(X[keep]) + LOG_FLOOR)
    t = (np.arange(X.shape[1]) * cfg.hop_len + cfg.window_len / 2) / signal.sample_rate_hz
    return Spectrogram(normalize(values, cfg.normalization), f[keep], t, cfg.normalization)


def cis(spec: Spectrogram) -> Spectrogram:
    """Channel-independent spectrogram: difference of adjacent log columns.

    Any factor that is constant over time within a frequency bin cancels.
    """
    if spec.normalization != "none":
        raise InputError("cis needs an un-normalized log spectrogram")
    if spec.values.shape[1] < 2:
        raise InputError(f"cis needs at least 2 time frames, got {spec.values.shape[1]}")
    t = spec.time_axis_s
    return Spectrogram(np.diff(spec.values, axis=1), spec.freq_axis_hz, (t[1:] + t[:-1]) / 2, "none")


def representation(signal: ComplexSignal, cfg: StftConfig, kind: str = "spec") -> np.ndarray:
    """Network input grid for one packet: ``kind`` is ``spec`` or ``cis``."""
    if kind == "spec":
        return log_spectrogram(signal, cfg).values
    if kind == "cis":
        raw = log_spectrogram(signal, replace(cfg, normalization="none"))
        return normalize(cis(raw).values, cfg.normalization)
    raise ConfigurationError(f"unknown representation {kind!r}")


def write_csv(spec: Spectrogram, path) -> None:
    """Frequency rows x time columns; first row holds the time axis."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_hz\\time_s", *(repr(float(t)) for t in spec.time_axis_s)])
        for f, row in zip(spec.freq_axis_hz, spec.values):
            w.writerow([repr(float(f)), *(repr(float(v)) for v in row)])


def read_csv(path) -> Spectrogram:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    t = np.array([float(v) for v in rows[0][1:]])
    f = np.array([float(r[0]) for r in rows[1:]])
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return Spectrogram(values, f, t)
