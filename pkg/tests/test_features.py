import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dann import features as ft
from dann.features import FeatureInputError, LogMelMatrix, Waveform


def tone(freq, rate=16000, seconds=0.5, amp=0.5):
    t = np.arange(int(rate * seconds)) / rate
    return Waveform(amp * np.sin(2 * np.pi * freq * t), rate)


def test_framing_counts_16k():
    frames = ft.frame_and_window(Waveform(np.zeros(16000), 16000))
    assert frames.shape == (98, 400)
    assert 1 + (16000 - 400) // 160 == 98


def test_framing_zero_audio_and_single_frame():
    assert np.all(ft.frame_and_window(Waveform(np.zeros(1000), 16000)) == 0)
    assert ft.frame_and_window(Waveform(np.ones(400), 16000)).shape == (1, 400)


def test_framing_too_short():
    with pytest.raises(FeatureInputError):
        ft.frame_and_window(Waveform(np.zeros(399), 16000))


def test_framing_other_rate_and_window():
    w = Waveform(np.ones(8000), 8000)
    frames = ft.frame_and_window(w)
    assert frames.shape[1] == 200
    np.testing.assert_allclose(frames[0], np.hamming(200))


def test_htk_mel_formula():
    assert ft.hz_to_mel(700.0) == pytest.approx(2595 * math.log10(2), rel=1e-12)
    assert ft.hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)
    f = np.array([0.0, 100.0, 4000.0, 8000.0])
    np.testing.assert_allclose(ft.mel_to_hz(ft.hz_to_mel(f)), f, atol=1e-9)


def test_default_n_fft():
    assert ft.default_n_fft(400) == 512
    assert ft.default_n_fft(512) == 512
    assert ft.default_n_fft(200) == 256


def test_filterbank_shape_and_support():
    bank = ft.mel_filterbank(16000, 512)
    assert bank.triangles.shape == (26, 257)
    assert np.all(bank.triangles >= 0)
    freqs = np.arange(257) * 16000 / 512
    for j, row in enumerate(bank.triangles):
        nz = np.flatnonzero(row > 0)
        assert nz.size > 0
        assert np.all(np.diff(nz) == 1), f"band {j} support not contiguous"
        # the peak sits on the bin closest to the band centre
        assert abs(freqs[row.argmax()] - bank.centers_hz[j]) <= 16000 / 512


def test_silent_frame_hits_log_floor():
    bank = ft.mel_filterbank(16000, 512)
    out = ft.log_mel(np.zeros((3, 400)), bank)
    np.testing.assert_array_equal(out, np.full((3, 26), math.log(1e-10)))


def test_pure_tones_at_band_centres():
    bank = ft.mel_filterbank(16000, 512)
    for j, f in enumerate(bank.centers_hz):
        feats = ft.extract_logmel(tone(f))
        assert np.all(feats.argmax(axis=1) == j), f"band {j} at {f:.1f} Hz"


def test_white_noise_positive_every_band():
    w = Waveform(np.random.default_rng(0).uniform(-0.5, 0.5, 16000), 16000)
    frames = ft.frame_and_window(w)
    bank = ft.mel_filterbank(16000, 512)
    energies = (np.abs(np.fft.rfft(frames, 512, axis=1)) ** 2) @ bank.triangles.T
    assert np.all(energies > 0)
    assert np.all(ft.log_mel(frames, bank) > math.log(1e-10))


def test_pad_identity_750():
    x = np.random.default_rng(1).normal(size=(750, 26))
    m = ft.pad_or_truncate(x)
    np.testing.assert_array_equal(m.values, x)
    assert m.n_valid_frames == 750


def test_pad_two_rows_with_column_minimum():
    x = np.array([[1.0] + [5.0] * 25, [3.0] + [-2.0] * 25])
    m = ft.pad_or_truncate(x)
    assert m.values.shape == (750, 26)
    assert m.n_valid_frames == 2
    # 1-indexed rows 3..750 hold the column minimum
    assert np.all(m.values[2:, 0] == 1.0)
    assert np.all(m.values[2:, 1:] == -2.0)


def test_truncate_900_keeps_centre():
    x = np.arange(900 * 26, dtype=float).reshape(900, 26)
    m = ft.pad_or_truncate(x)
    np.testing.assert_array_equal(m.values, x[75:825])
    assert m.n_valid_frames == 750


def test_pad_empty_rejected():
    with pytest.raises(FeatureInputError):
        ft.pad_or_truncate(np.zeros((0, 26)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 1600), st.integers(0, 1000))
def test_fixed_output_shape_and_padding_minimum(t, seed):
    x = np.random.default_rng(seed).normal(size=(t, 26))
    m = ft.pad_or_truncate(x)
    assert m.values.shape == (750, 26)
    assert m.n_valid_frames == min(t, 750)
    if t < 750:
        valid = m.values[:t]
        assert np.all(m.values[t:] <= valid.min(axis=0))
    elif t > 750:
        start = (t - 750) // 2
        np.testing.assert_array_equal(m.values, x[start : start + 750])


def _corpus(seed, n=5):
    rng = np.random.default_rng(seed)
    mats = []
    for _ in range(n):
        t = int(rng.integers(100, 900))
        mats.append(ft.pad_or_truncate(rng.normal(rng.normal(0, 5, 26), rng.uniform(0.5, 3, 26), size=(t, 26))))
    return mats


def test_corpus_normalize_zero_mean_unit_variance_on_valid_frames():
    normed, stats = ft.corpus_normalize(_corpus(2))
    valid = np.vstack([m.values[: m.n_valid_frames] for m in normed])
    assert np.all(np.abs(valid.mean(axis=0)) < 1e-8)
    assert np.all(np.abs(valid.var(axis=0) - 1) < 1e-8)


def test_corpus_normalize_idempotent():
    normed, _ = ft.corpus_normalize(_corpus(3))
    again, stats = ft.corpus_normalize(normed)
    np.testing.assert_allclose(stats.mean, 0, atol=1e-10)
    np.testing.assert_allclose(stats.std, 1, atol=1e-10)
    for a, b in zip(normed, again):
        np.testing.assert_allclose(a.values, b.values, atol=1e-9)


def test_corpus_normalize_constant_dimension(caplog):
    mats = _corpus(4)
    for m in mats:
        m.values[:, 7] = 3.0
    normed, stats = ft.corpus_normalize(mats)
    assert stats.std[7] == 1e-8
    assert all(np.all(m.values[:, 7] == 0.0) for m in normed)
    assert "zero-variance" in caplog.text


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_corpus_normalize_property(seed):
    normed, _ = ft.corpus_normalize(_corpus(seed, n=3))
    valid = np.vstack([m.values[: m.n_valid_frames] for m in normed])
    assert np.all(np.abs(valid.mean(axis=0)) < 1e-8)
    assert np.all(np.abs(valid.var(axis=0) - 1) < 1e-6)


def test_feature_file_bit_exact(tmp_path):
    m = LogMelMatrix(np.random.default_rng(5).normal(size=(750, 26)), 612)
    p = tmp_path / "x.lmf"
    ft.write_features(p, m)
    blob = p.read_bytes()
    assert blob[:4] == b"LMF1"
    assert struct.unpack("<III", blob[4:16]) == (750, 26, 612)
    assert len(blob) == 16 + 750 * 26 * 8
    assert blob[16:24] == struct.pack("<d", m.values[0, 0])
    back = ft.read_features(p)
    assert back.n_valid_frames == 612
    assert back.values.tobytes() == m.values.tobytes()


def test_stats_file_layout(tmp_path):
    stats = ft.NormStats(np.arange(26.0), np.ones(26) * 2)
    p = tmp_path / "s.lms"
    ft.write_stats(p, stats)
    blob = p.read_bytes()
    assert blob[:4] == b"LMS1"
    assert struct.unpack("<III", blob[4:16]) == (2, 26, 0)
    back = ft.read_stats(p)
    np.testing.assert_array_equal(back.mean, stats.mean)
    np.testing.assert_array_equal(back.std, stats.std)


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.lmf"
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(FeatureInputError):
        ft.read_features(p)


def test_wav_roundtrip_and_stereo(tmp_path):
    w = tone(440.0, seconds=0.1)
    p = tmp_path / "a.wav"
    ft.write_wav(p, w)
    back = ft.read_wav(p)
    assert back.sample_rate == 16000
    np.testing.assert_allclose(back.samples, w.samples, atol=1 / 16000)

    import wave

    stereo = np.stack([np.full(800, 1000), np.full(800, 3000)], axis=1).astype("<i2")
    p2 = tmp_path / "s.wav"
    with wave.open(str(p2), "wb") as f:
        f.setnchannels(2)
        f.setsampwidth(2)
        f.setframerate(8000)
        f.writeframes(stereo.tobytes())
    mono = ft.read_wav(p2)
    np.testing.assert_allclose(mono.samples, 2000 / 32768)
