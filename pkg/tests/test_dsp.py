import numpy as np
import pytest

from mtlab.dsp import DspConfig, FeatureSequence, log_mel, mel_band_centers, mel_filterbank, mfcc, stft_magnitude

from oracles import direct_dft_magnitude

CFG = DspConfig()


def test_zero_signal():
    x = np.zeros(16000)
    assert not stft_magnitude(x).data.any()
    assert np.all(log_mel(x).data == np.log(CFG.log_floor))
    c = mfcc(x).data
    assert c.shape[1] == CFG.n_mfcc
    assert np.allclose(c[:, 0], np.sqrt(CFG.n_mels) * np.log(CFG.log_floor), rtol=1e-12)
    assert np.allclose(c[:, 1:], 0.0, atol=1e-9)


def test_frame_count_formula():
    assert stft_magnitude(np.ones(400)).n_frames == 1
    for n in (400, 559, 560, 16000, 12345):
        assert stft_magnitude(np.ones(n)).n_frames == 1 + (n - 400) // 160
    with pytest.raises(ValueError, match="shorter"):
        stft_magnitude(np.ones(399))


def test_stft_matches_direct_dft():
    rng = np.random.default_rng(0)
    x = rng.normal(size=1200)
    cfg = CFG.with_(window="rect")
    got = stft_magnitude(x, cfg).data
    for f in range(got.shape[0]):
        frame = x[f * 160:f * 160 + 400]
        assert np.allclose(got[f], direct_dft_magnitude(frame, 512), rtol=1e-9, atol=1e-9)


def test_bin_centre_sine_concentrates():
    cfg = CFG.with_(window="rect", frame_length=512, frame_shift=256)
    b = 37
    t = np.arange(4096)
    x = np.sin(2 * np.pi * b * t / 512)
    mag = stft_magnitude(x, cfg).data
    assert np.all(mag.argmax(1) == b)
    oracle = direct_dft_magnitude(x[:512], 512)
    assert oracle.argmax() == b
    assert mag[0, b] ** 2 > 0.99 * (mag[0] ** 2).sum()


def test_filterbank_rows_triangular():
    fb = mel_filterbank(CFG)
    assert fb.shape == (CFG.n_mels, CFG.n_fft // 2 + 1)
    assert (fb.sum(1) > 0).all() and fb.max() <= 1.0
    for row in fb:
        nz = np.flatnonzero(row)
        seg = row[nz[0]:nz[-1] + 1]
        assert (seg > 0).all()
        peak = seg.argmax()
        assert np.all(np.diff(seg[:peak + 1]) >= 0) and np.all(np.diff(seg[peak:]) <= 0)
    # bins are covered at most once in total weight
    assert fb.sum(0).max() <= 1.0 + 1e-12


@pytest.mark.parametrize("band", [5, 12, 20, 31])
def test_sine_at_band_centre_picks_that_band(band):
    f = mel_band_centers(CFG)[band]
    t = np.arange(8000) / CFG.sample_rate
    x = 0.3 * np.sin(2 * np.pi * f * t)
    lm = log_mel(x).data
    assert np.all(lm.argmax(1) == band)
    # oracle: filterbank response of the direct DFT on the first frame
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(400) / 400)
    resp = mel_filterbank(CFG) @ direct_dft_magnitude(x[:400] * win, 512) ** 2
    assert resp.argmax() == band


def test_mel_energy_bounded_by_spectral_energy():
    x = np.random.default_rng(1).normal(size=4000)
    power = stft_magnitude(x).data ** 2
    mel = np.exp(log_mel(x).data)
    assert np.all(mel.sum(1) <= power.sum(1) * (1 + 1e-12))


def test_mfcc_constant_logmel_frame():
    from mtlab.dsp import mfcc_from_logmel
    c = mfcc_from_logmel(np.full((3, CFG.n_mels), 2.5), CFG)
    assert np.allclose(c[:, 1:], 0.0, atol=1e-12) and np.all(c[:, 0] != 0)


def test_deltas_flag_triples_dims():
    x = np.random.default_rng(2).normal(size=4000)
    assert mfcc(x, CFG.with_(deltas=True)).dims == 3 * CFG.n_mfcc


def test_determinism_and_config_validation():
    x = np.random.default_rng(3).normal(size=5000)
    assert np.array_equal(mfcc(x).data, mfcc(x).data)
    with pytest.raises(ValueError):
        DspConfig(frame_shift=500)
    with pytest.raises(ValueError):
        DspConfig(n_mfcc=50)
    with pytest.raises(ValueError):
        DspConfig(log_floor=0.0)
    with pytest.raises(ValueError):
        FeatureSequence(np.array([[np.nan]]), 100.0, "mfcc")
