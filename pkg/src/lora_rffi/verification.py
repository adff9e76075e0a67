"""Independent reference computations used by the test and acceptance suites.

Nothing here calls into the production modules: the NT-Xent oracle is a
literal double loop, gradients come from central differences, channel
statistics use textbook estimators and the ridge tracker is a plain
per-frame argmax. Arithmetic is done in extended precision
(``numpy.longdouble``) where it matters.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

WIDE = np.longdouble


@dataclass
class OracleReport:
    name: str
    statistic: float
    tolerance: float
    passed: bool = False

    def __post_init__(self):
        self.passed = bool(abs(self.statistic) <= self.tolerance)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.statistic:.3e} (tol {self.tolerance:.1e})"


def write_reports(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "statistic", "tolerance", "pass"])
        for r in reports:
            w.writerow([r.name, repr(float(r.statistic)), repr(float(r.tolerance)), r.passed])


def oracle_nt_xent(embeddings, temperature: float) -> float:
    """Literal evaluation of the pairwise NT-Xent sum for |B| <= 8."""
    z = [np.asarray(row, dtype=WIDE) for row in embeddings]
    n = len(z)
    if n > 16:
        raise ValueError("oracle is limited to |B| <= 8 (16 views)")

    def sim(a, b):
        return np.sum(a * b) / (np.sqrt(np.sum(a * a)) * np.sqrt(np.sum(b * b)))

    tau = WIDE(temperature)
    total = WIDE(0)
    for i in range(n):
        j = i + 1 if i % 2 == 0 else i - 1
        num = np.exp(sim(z[i], z[j]) / tau)
        den = WIDE(0)
        for k in range(n):
            if k != i:
                den += np.exp(sim(z[i], z[k]) / tau)
        total += -np.log(num / den)
    return float(total)


def oracle_grad(fn, params: dict, step: float = 1e-5) -> dict:
    """Central finite differences of scalar ``fn(params)`` for every entry of
    every array in ``params`` (arrays are perturbed in place and restored)."""
    grads = {}
    for name, arr in params.items():
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            fp = WIDE(fn(params))
            flat[idx] = orig - step
            fm = WIDE(fn(params))
            flat[idx] = orig
            g.reshape(-1)[idx] = float((fp - fm) / (2 * WIDE(step)))
        grads[name] = g
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max |n| (absolute when the numeric gradient vanishes)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.max(np.abs(n))
    diff = np.max(np.abs(a - n)) if a.size else 0.0
    return float(diff / scale) if scale > 1e-12 else float(diff)


def rms_delay_spread(delays, powers) -> float:
    """Square root of the second central moment of a power delay profile."""
    d = np.asarray(delays, dtype=WIDE)
    p = np.asarray(powers, dtype=WIDE)
    p = p / p.sum()
    mean = np.sum(p * d)
    return float(np.sqrt(max(np.sum(p * d * d) - mean * mean, WIDE(0))))


def empirical_autocorrelation(series: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalized lag autocorrelation E[g(t+k) g*(t)] / E[|g|^2] of one
    complex sequence (or averaged over rows of a 2-D array), k = 0..max_lag."""
    g = np.atleast_2d(np.asarray(series, dtype=np.complex128))
    n = g.shape[1]
    out = np.empty(max_lag + 1, dtype=np.complex128)
    for k in range(max_lag + 1):
        out[k] = np.mean(g[:, k:] * np.conj(g[:, : n - k]))
    return (out / out[0].real).real


def oracle_channel_stats(realizations, max_lag: int | None = None) -> dict:
    """Population statistics of channel draws.

    Each realization is a ``(delays, gains)`` pair with gains shaped ``(L,)``
    or ``(L, N)``. Returns the RMS delay spread of the mean PDP, the mean
    channel energy, and (when ``max_lag`` is given) the first tap's
    normalized autocorrelation averaged over realizations.
    """
    realizations = list(realizations)
    if len(realizations) < 100:
        raise ValueError("need at least 100 realizations")
    delays = np.asarray(realizations[0][0], dtype=np.float64)
    mean_pdp = np.zeros(delays.size)
    energy = []
    acf = None
    for d, gains in realizations:
        g = np.asarray(gains)
        p = np.abs(g) ** 2 if g.ndim == 1 else np.mean(np.abs(g) ** 2, axis=1)
        mean_pdp += p
        energy.append(p.sum())
        if max_lag is not None and g.ndim == 2:
            a = empirical_autocorrelation(g[0], max_lag) * np.mean(np.abs(g[0]) ** 2)
            acf = a if acf is None else acf + a
    mean_pdp /= len(realizations)
    out = {
        "rms_delay_spread": rms_delay_spread(delays, mean_pdp),
        "mean_energy": float(np.mean(energy)),
        "mean_pdp": mean_pdp,
    }
    if acf is not None:
        out["autocorr_curve"] = acf / acf[0]
    return out


def bessel_j0(x) -> np.ndarray:
    """J0 by its power series (adequate for |x| < 10)."""
    x = np.asarray(x, dtype=WIDE)
    total = np.zeros_like(x)
    term = np.ones_like(x)
    for m in range(60):
        if m:
            term = term * (-(x * x) / 4) / (m * m)
        total = total + term
    return total.astype(np.float64)


def oracle_ridge(values: np.ndarray) -> np.ndarray:
    """Per-frame argmax frequency bin of a ``[freq, time]`` grid."""
    return np.argmax(np.asarray(values), axis=0)


def phase_increment_error(samples: np.ndarray, amplitude: float, bandwidth: float,
                          symbol_duration: float, fs: float) -> float:
    """Max deviation between consecutive-sample phase steps of a chirp and the
    closed-form 2*pi*(f(t_n) + (B/T)/(2 fs))/fs step of the quadratic phase."""
    x = np.asarray(samples, dtype=np.complex128)
    n = np.arange(x.size - 1, dtype=WIDE)
    t = n / WIDE(fs)
    rate = WIDE(bandwidth) / WIDE(symbol_duration)
    # phi(t + 1/fs) - phi(t) for phi(t) = -pi B t + pi (B/T) t^2
    expected = 2 * WIDE(math.pi) * (-WIDE(bandwidth) / 2 + rate * t) / WIDE(fs) + WIDE(math.pi) * rate / WIDE(fs) ** 2
    measured = np.angle(x[1:] * np.conj(x[:-1])).astype(WIDE)
    wrapped = (measured - expected + WIDE(math.pi)) % (2 * WIDE(math.pi)) - WIDE(math.pi)
    return float(np.max(np.abs(wrapped)))
