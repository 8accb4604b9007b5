"""LogMel front end: framing, mel filterbank, fixed-length padding, corpus
normalization, and the binary feature/statistics file formats."""

from __future__ import annotations

import logging
import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

N_FRAMES = 750
N_BANDS = 26
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8

FEATURE_MAGIC = b"LMF1"
STATS_MAGIC = b"LMS1"


class FeatureInputError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise FeatureInputError(f"sample rate must be positive, got {self.sample_rate}")


@dataclass
class LogMelMatrix:
    values: np.ndarray
    n_valid_frames: int


@dataclass
class MelFilterBank:
    triangles: np.ndarray
    centers_hz: np.ndarray
    sample_rate: int
    n_fft: int


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def frame_params(sample_rate: int, frame_ms: float = 25.0, shift_ms: float = 10.0) -> tuple[int, int]:
    return int(round(frame_ms * sample_rate / 1000.0)), int(round(shift_ms * sample_rate / 1000.0))


def default_n_fft(frame_len: int) -> int:
    n = 1
    while n < frame_len:
        n *= 2
    return n


def frame_and_window(w: Waveform, frame_ms: float = 25.0, shift_ms: float = 10.0) -> np.ndarray:
    """Split into Hamming-windowed frames, ``n_frames x frame_len``."""
    frame_len, hop = frame_params(w.sample_rate, frame_ms, shift_ms)
    n = len(w.samples)
    if n < frame_len:
        raise FeatureInputError(f"waveform has {n} samples, need at least one frame of {frame_len}")
    count = 1 + (n - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(count)[:, None]
    return w.samples[idx] * np.hamming(frame_len)


def mel_filterbank(sample_rate: int, n_fft: int, n_bands: int = N_BANDS,
                   fmin: float = 0.0, fmax: float | None = None) -> MelFilterBank:
    """Triangular HTK-mel filters evaluated on the FFT bin frequencies."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_bands + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    tri = np.clip(np.minimum(rising, falling), 0.0, None)
    return MelFilterBank(tri, edges[1:-1].copy(), sample_rate, n_fft)


def log_mel(frames: np.ndarray, bank: MelFilterBank, n_fft: int | None = None) -> np.ndarray:
    n_fft = bank.n_fft if n_fft is None else n_fft
    if frames.shape[1] > n_fft:
        raise FeatureInputError(f"n_fft {n_fft} shorter than frame length {frames.shape[1]}")
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ bank.triangles.T
    return np.log(np.maximum(energies, LOG_FLOOR))


def extract_logmel(w: Waveform, n_bands: int = N_BANDS) -> np.ndarray:
    """Variable-length ``T x n_bands`` logMel matrix for one utterance."""
    frames = frame_and_window(w)
    n_fft = default_n_fft(frames.shape[1])
    return log_mel(frames, mel_filterbank(w.sample_rate, n_fft, n_bands), n_fft)


def pad_or_truncate(feats: np.ndarray, n_frames: int = N_FRAMES) -> LogMelMatrix:
    """Pad with per-column minima or keep the centred window of ``n_frames`` rows."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise FeatureInputError("need a non-empty T x D feature matrix")
    t = feats.shape[0]
    if t == n_frames:
        return LogMelMatrix(feats.copy(), t)
    if t > n_frames:
        start = (t - n_frames) // 2
        return LogMelMatrix(feats[start : start + n_frames].copy(), n_frames)
    pad = np.broadcast_to(feats.min(axis=0), (n_frames - t, feats.shape[1]))
    return LogMelMatrix(np.vstack([feats, pad]), t)


def corpus_stats(mats: Sequence[LogMelMatrix]) -> NormStats:
    """Per-dimension mean/std over the valid (unpadded) frames of a corpus."""
    if len(mats) < 1:
        raise FeatureInputError("empty corpus")
    if len(mats) < 2:
        logger.warning("computing normalization statistics from a single utterance")
    valid = np.vstack([m.values[: m.n_valid_frames] for m in mats])
    mean = valid.mean(axis=0)
    std = valid.std(axis=0)
    if np.any(std < STD_FLOOR):
        logger.warning("zero-variance feature dimension(s) %s floored", np.flatnonzero(std < STD_FLOOR).tolist())
    return NormStats(mean, np.maximum(std, STD_FLOOR))


def apply_normalization(mats: Sequence[LogMelMatrix], stats: NormStats) -> list[LogMelMatrix]:
    return [LogMelMatrix((m.values - stats.mean) / stats.std, m.n_valid_frames) for m in mats]


def corpus_normalize(mats: Sequence[LogMelMatrix]) -> tuple[list[LogMelMatrix], NormStats]:
    stats = corpus_stats(mats)
    return apply_normalization(mats, stats), stats


# ---------------------------------------------------------------------------
# file formats


def read_wav(path) -> Waveform:
    """16-bit PCM WAV; multi-channel audio is averaged to mono."""
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise FeatureInputError(f"{path}: only 16-bit PCM is supported")
        rate, channels = f.getframerate(), f.getnchannels()
        raw = f.readframes(f.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return Waveform(data, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def _write_container(path, magic: bytes, values: np.ndarray, n_valid: int) -> None:
    rows, cols = values.shape
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<III", rows, cols, n_valid))
        f.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def _read_container(path, magic: bytes) -> tuple[np.ndarray, int]:
    blob = Path(path).read_bytes()
    if blob[:4] != magic:
        raise FeatureInputError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    rows, cols, n_valid = struct.unpack("<III", blob[4:16])
    body = blob[16:]
    if len(body) != rows * cols * 8:
        raise FeatureInputError(f"{path}: truncated payload")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64), n_valid


def write_features(path, m: LogMelMatrix) -> None:
    _write_container(path, FEATURE_MAGIC, m.values, m.n_valid_frames)


def read_features(path) -> LogMelMatrix:
    values, n_valid = _read_container(path, FEATURE_MAGIC)
    return LogMelMatrix(values, n_valid)


def write_stats(path, stats: NormStats) -> None:
    _write_container(path, STATS_MAGIC, np.vstack([stats.mean, stats.std]), 0)


def read_stats(path) -> NormStats:
    values, _ = _read_container(path, STATS_MAGIC)
    if values.shape[0] != 2:
        raise FeatureInputError(f"{path}: statistics file must have 2 rows")
    return NormStats(values[0].copy(), values[1].copy())
