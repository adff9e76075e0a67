import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lora_rffi.channel import ChannelRealization, add_awgn, apply_channel
from lora_rffi.errors import ConfigurationError, InputError
from lora_rffi.impairments import (ReceiverProfile, apply_rx_impairments, apply_tx_impairments,
                                   sample_device_profiles, sample_receiver_profiles)
from lora_rffi.lora_phy import ComplexSignal, instantaneous_frequency
from lora_rffi.representation import (LOG_FLOOR, Spectrogram, StftConfig, cis, log_spectrogram, normalize,
                                      read_csv, representation, stft, write_csv)
from lora_rffi.verification import oracle_ridge

FS = 1e6
RAW = StftConfig(normalization="none")


def test_default_grid_shape(packet):
    assert RAW.output_shape(8192, FS) == (25, 127)
    assert representation(packet, StftConfig()).shape == (25, 127)
    assert representation(packet, StftConfig(), "cis").shape == (25, 126)


@pytest.mark.parametrize("kwargs", [{"window_len": 100}, {"hop_len": 0}, {"hop_len": 256},
                                    {"window_kind": "hamming"}, {"crop_band_hz": (5, -5)},
                                    {"normalization": "l2"}])
def test_config_invariants(kwargs):
    with pytest.raises(ConfigurationError):
        StftConfig(**kwargs)


def test_config_round_trip():
    cfg = StftConfig(window_len=64, hop_len=16, crop_band_hz=None)
    assert StftConfig.from_dict(cfg.to_dict()) == cfg


def test_on_bin_tone_rectangular():
    cfg = StftConfig(window_kind="rectangular", crop_band_hz=None, normalization="none")
    k0 = 9
    x = ComplexSignal(np.exp(2j * np.pi * k0 * np.arange(1024) / 128), FS)
    X = np.abs(stft(x, cfg)) ** 2
    center = 64 + k0  # fftshifted index
    side = np.delete(X, center, axis=0)
    assert np.all(side <= 1e-10 * X[center])


def test_parseval_non_overlapping(rng):
    cfg = StftConfig(window_kind="rectangular", hop_len=128, crop_band_hz=None, normalization="none")
    x = ComplexSignal(rng.normal(size=4096) + 1j * rng.normal(size=4096), FS)
    X = stft(x, cfg)
    lhs = np.sum(np.abs(X) ** 2) / cfg.window_len
    assert abs(lhs / np.sum(np.abs(x.samples) ** 2) - 1) < 1e-6


def test_parseval_hann_non_overlapping(rng):
    cfg = StftConfig(hop_len=128, crop_band_hz=None, normalization="none")
    x = rng.normal(size=4096) + 1j * rng.normal(size=4096)
    X = stft(ComplexSignal(x, FS), cfg)
    w = cfg.window()
    frames = x.reshape(-1, 128) * w
    assert abs(np.sum(np.abs(X) ** 2) / 128 / np.sum(np.abs(frames) ** 2) - 1) < 1e-6


def test_linearity(rng):
    cfg = StftConfig(crop_band_hz=None)
    x = rng.normal(size=1024) + 1j * rng.normal(size=1024)
    y = rng.normal(size=1024) + 1j * rng.normal(size=1024)
    a, b = 0.3 - 2j, 1.7
    lhs = stft(ComplexSignal(a * x + b * y, FS), cfg)
    rhs = a * stft(ComplexSignal(x, FS), cfg) + b * stft(ComplexSignal(y, FS), cfg)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * np.max(np.abs(rhs))


def test_chirp_ridge_follows_sweep(packet, chirp):
    spec = log_spectrogram(packet, RAW)
    ridge = spec.freq_axis_hz[oracle_ridge(spec.values)]
    t = spec.time_axis_s % chirp.symbol_duration_s
    expected = instantaneous_frequency(chirp, t)
    bin_hz = FS / RAW.window_len
    # frames straddling a symbol boundary see both ends of the sweep
    clean = (t > RAW.window_len / FS / 2) & (t < chirp.symbol_duration_s - RAW.window_len / FS / 2)
    assert np.all(np.abs(ridge - expected)[clean] <= bin_hz)


def test_constant_tone_has_flat_ridge():
    x = ComplexSignal(np.exp(2j * np.pi * 20e3 * np.arange(8192) / FS), FS)
    ridge = oracle_ridge(log_spectrogram(x, RAW).values)
    assert np.all(ridge == ridge[0])


def test_noisy_chirp_ridge(packet, chirp):
    clean = oracle_ridge(log_spectrogram(packet, RAW).values)
    hits = []
    for seed in range(20):
        noisy = oracle_ridge(log_spectrogram(add_awgn(packet, 10, seed), RAW).values)
        hits.append(np.mean(np.abs(noisy - clean) <= 1))
    assert np.mean(hits) >= 0.9


@given(st.floats(0.01, 100))
@settings(max_examples=20, deadline=None)
def test_log_scale_shift(packet, c):
    a = log_spectrogram(packet, RAW).values
    b = log_spectrogram(ComplexSignal(c * packet.samples, FS), RAW).values
    mag = np.abs(stft(packet, RAW))[RAW._band_mask(np.fft.fftshift(np.fft.fftfreq(128, 1 / FS)))]
    # exact up to the log floor: |log((c|X| + e) / (|X| + e)) - log c| <= e (1 + 1/c) / |X|
    bound = LOG_FLOOR * (1 + 1 / c) / mag
    assert np.all(np.abs(b - a - math.log(c)) <= bound + 1e-12)
    strong = mag > 1.0
    np.testing.assert_allclose((b - a)[strong], math.log(c), rtol=0, atol=1e-9)


def test_normalizations(packet):
    z = log_spectrogram(packet, StftConfig(normalization="per_sample_zscore")).values
    assert abs(z.mean()) < 1e-6 and abs(z.std() - 1) < 1e-6
    m = log_spectrogram(packet, StftConfig()).values
    assert m.min() == 0 and m.max() == 1
    np.testing.assert_array_equal(normalize(np.ones((2, 2)), "global_minmax"), np.zeros((2, 2)))


def test_short_signal_rejected():
    with pytest.raises(InputError):
        stft(ComplexSignal(np.ones(100), FS), RAW)


def _impaired(packet):
    return apply_tx_impairments(packet, sample_device_profiles(4, 1)[0])


def test_static_channel_term_is_time_constant(packet):
    fx = _impaired(packet)
    ch = ChannelRealization.static([0, 200e-9], [0.8, 0.6j])
    rx = ReceiverProfile(0, sample_receiver_profiles(1, 0)[0].ripple_response)
    y = apply_rx_impairments(apply_channel(fx, ch), rx)
    s0, s1 = log_spectrogram(fx, RAW), log_spectrogram(y, RAW)
    occ = np.exp(s0.values) > 0.01 * np.exp(s0.values).max()
    d = s1.values - s0.values
    worst = max(np.var(d[k, occ[k]]) for k in range(d.shape[0]) if occ[k].sum() > 1)
    assert worst <= 0.01


def test_additive_decomposition_at_60db(packet):
    fx = _impaired(packet)
    ch = ChannelRealization.static([0, 200e-9], [0.8, 0.6j])
    rx = ReceiverProfile(0, sample_receiver_profiles(1, 0)[0].ripple_response)
    y = add_awgn(apply_rx_impairments(apply_channel(fx, ch), rx), 60, 0)
    s0, s = log_spectrogram(fx, RAW), log_spectrogram(y, RAW)
    f = s0.freq_axis_hz
    g = np.abs(np.exp(-2j * np.pi * np.outer(f / FS, np.arange(rx.ripple.size))) @ rx.ripple)
    h = np.abs(ch.frequency_response(f))
    predicted = np.log(g)[:, None] + np.log(h)[:, None] + s0.values
    occ = np.exp(s0.values) > 0.01 * np.exp(s0.values).max()
    assert np.max(np.abs(s.values - predicted)[occ]) <= 0.1


@pytest.mark.parametrize("source", ["ideal", "impaired"])
def test_cis_cancels_static_channel(packet, source):
    fx = packet if source == "ideal" else _impaired(packet)
    ch = ChannelRealization.static([0, 200e-9], [0.8, 0.6j])
    s0 = log_spectrogram(fx, RAW)
    c0 = cis(s0).values
    c1 = cis(log_spectrogram(apply_channel(fx, ch), RAW)).values
    occ = np.exp(s0.values) > 0.01 * np.exp(s0.values).max()
    occ = occ[:, 1:] & occ[:, :-1]
    assert np.max(np.abs(c1 - c0)[occ]) <= 0.02


def test_cis_contracts(packet):
    s = log_spectrogram(packet, RAW)
    c = cis(s)
    assert c.values.shape == (s.values.shape[0], s.values.shape[1] - 1)
    flat = Spectrogram(np.ones((3, 4)), np.arange(3.0), np.arange(4.0), "none")
    np.testing.assert_array_equal(cis(flat).values, np.zeros((3, 3)))
    with pytest.raises(InputError):
        cis(Spectrogram(np.ones((3, 1)), np.arange(3.0), np.arange(1.0), "none"))
    with pytest.raises(InputError):
        cis(log_spectrogram(packet, StftConfig()))


def test_spectrogram_invariants():
    with pytest.raises(InputError):
        Spectrogram(np.array([[np.inf]]), np.zeros(1), np.zeros(1), "none")
    with pytest.raises(InputError):
        Spectrogram(np.ones((2, 2)), np.zeros(3), np.zeros(2), "none")


def test_csv_round_trip(packet, tmp_path):
    s = log_spectrogram(packet, RAW)
    write_csv(s, tmp_path / "s.csv")
    back = read_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.values, s.values)
    np.testing.assert_array_equal(back.freq_axis_hz, s.freq_axis_hz)
    np.testing.assert_array_equal(back.time_axis_s, s.time_axis_s)
