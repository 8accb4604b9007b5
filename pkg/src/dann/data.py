"""Manifests, label binarization, dev splits and a synthetic two-domain corpus."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import N_BANDS, N_FRAMES

MANIFEST_HEADER = ["id", "path", "domain", "raw_rating", "label", "scheme"]
DOMAINS = ("source", "target")

# closed lower class: (min, threshold, max)
SCHEMES = {"iemocap": (1.0, 2.5, 5.0), "recola": (-1.0, 0.0, 1.0)}


class ManifestError(ValueError):
    pass


class LabelError(ValueError):
    pass


class StratificationError(ValueError):
    pass


@dataclass
class UtteranceRecord:
    id: str
    path: str
    domain: str
    raw_rating: float | None = None
    label: int | None = None
    scheme: str | None = None


@dataclass
class Manifest:
    records: list[UtteranceRecord]
    corpus: str = ""
    dimension: str = "arousal"

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if r.label is None else r.label for r in self.records], dtype=int)

    def subset(self, idx: Sequence[int]) -> "Manifest":
        return Manifest([self.records[i] for i in idx], self.corpus, self.dimension)


def binarize_label(raw: float, scheme: str) -> int:
    try:
        lo, threshold, hi = SCHEMES[scheme]
    except KeyError:
        raise LabelError(f"unknown label scheme {scheme!r}") from None
    if not lo <= raw <= hi:
        raise LabelError(f"{scheme} rating {raw} outside [{lo}, {hi}]")
    return 0 if raw <= threshold else 1


def aggregate_recola_rating(frame_ratings: Sequence[Sequence[float]]) -> float:
    """Grand mean over every frame of every annotator (pooled)."""
    pooled = [np.asarray(r, dtype=np.float64).ravel() for r in frame_ratings]
    if not pooled or any(p.size == 0 for p in pooled):
        raise ValueError("need at least one annotator with at least one frame")
    return float(np.concatenate(pooled).mean())


def _parse_rows(text: str, where: str) -> list[UtteranceRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError(f"{where}: empty manifest") from None
    if header != MANIFEST_HEADER:
        raise ManifestError(f"{where}: header must be {','.join(MANIFEST_HEADER)}")
    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(f"{where}: row {lineno}: expected {len(MANIFEST_HEADER)} fields")
        uid, path, domain, raw, label, scheme = row
        if not uid:
            raise ManifestError(f"{where}: row {lineno}: empty id")
        if uid in seen:
            raise ManifestError(f"{where}: row {lineno}: duplicate id {uid!r}")
        if domain not in DOMAINS:
            raise ManifestError(f"{where}: row {lineno}: unknown domain {domain!r}")
        try:
            raw_v = float(raw) if raw else None
            label_v = int(label) if label else None
            if label_v is None and raw_v is not None and scheme:
                label_v = binarize_label(raw_v, scheme)
        except (ValueError, LabelError) as exc:
            raise ManifestError(f"{where}: row {lineno}: {exc}") from None
        if label_v is not None and label_v not in (0, 1):
            raise ManifestError(f"{where}: row {lineno}: label must be 0 or 1")
        if domain == "source" and label_v is None:
            raise ManifestError(f"{where}: row {lineno}: source record {uid!r} has no label")
        seen.add(uid)
        records.append(UtteranceRecord(uid, path, domain, raw_v, label_v, scheme or None))
    if not records:
        raise ManifestError(f"{where}: manifest has no records")
    return records


def load_manifest(path, corpus: str | None = None, dimension: str = "arousal") -> Manifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return Manifest(_parse_rows(text, str(path)), corpus or path.stem, dimension)


def format_manifest(m: Manifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in m.records:
        w.writerow([r.id, r.path, r.domain,
                    "" if r.raw_rating is None else repr(r.raw_rating),
                    "" if r.label is None else str(r.label),
                    r.scheme or ""])
    return buf.getvalue()


def save_manifest(path, m: Manifest) -> None:
    Path(path).write_text(format_manifest(m), encoding="utf-8", newline="\n")


def split_dev(m: Manifest, fraction: float = 0.3, seed: int = 0) -> tuple[Manifest, Manifest]:
    """Stratified dev/eval split; ``round(fraction * n)`` records go to dev."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    labels = m.labels
    if np.any(labels < 0):
        raise StratificationError("every record needs a label for a stratified split")
    if len(m) < 4:
        raise StratificationError("need at least 4 labelled records")
    classes, counts = np.unique(labels, return_counts=True)
    if np.any(counts < 2):
        raise StratificationError(f"class {classes[counts < 2][0]} has fewer than 2 records")
    n_dev = int(round(fraction * len(m)))
    # largest-remainder allocation keeps each class within one record of its share
    share = counts * n_dev / len(m)
    alloc = np.floor(share).astype(int)
    for i in np.argsort(-(share - alloc), kind="stable")[: n_dev - alloc.sum()]:
        alloc[i] += 1
    rng = np.random.default_rng(seed)
    dev: list[int] = []
    for c, k in zip(classes, alloc):
        members = np.flatnonzero(labels == c)
        dev.extend(rng.permutation(members)[:k].tolist())
    dev_set = set(dev)
    dev_idx = sorted(dev_set)
    eval_idx = [i for i in range(len(m)) if i not in dev_set]
    return m.subset(dev_idx), m.subset(eval_idx)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthSpec:
    n_per_domain: int = 300
    n_source_holdout: int = 200
    frames: int = N_FRAMES
    bands: int = N_BANDS
    latent_dim: int = 10
    class_separation: float = 5.0
    rotation_deg: float = 25.0
    translation: float = 1.2
    band_scale_low: float = 0.7
    band_scale_high: float = 1.3
    shift_scale: float = 1.0
    noise: float = 1.0
    signal_gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_per_domain < 2 or self.n_source_holdout < 0:
            raise ValueError("n_per_domain must be >= 2 and n_source_holdout >= 0")
        if self.frames < 1 or self.bands < 1 or self.latent_dim < 2:
            raise ValueError("frames, bands must be positive and latent_dim >= 2")
        if self.class_separation < 0 or self.noise < 0 or self.shift_scale < 0:
            raise ValueError("class_separation, noise and shift_scale must be >= 0")
        if not 0 < self.band_scale_low <= self.band_scale_high:
            raise ValueError("band scaling range must be positive and ordered")


@dataclass
class SynthCorpus:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray
    holdout_x: np.ndarray
    holdout_y: np.ndarray
    band_scales: np.ndarray = field(repr=False, default=None)

    def manifests(self, feature_dir: str = "features") -> tuple[Manifest, Manifest]:
        src = [UtteranceRecord(f"src{i:05d}", f"{feature_dir}/src{i:05d}.lmf", "source", None, int(y))
               for i, y in enumerate(self.source_y)]
        tgt = [UtteranceRecord(f"tgt{i:05d}", f"{feature_dir}/tgt{i:05d}.lmf", "target")
               for i in range(len(self.target_y))]
        return Manifest(src, "synth-source"), Manifest(tgt, "synth-target")


def basis_patterns(frames: int, bands: int, latent_dim: int) -> np.ndarray:
    """Fixed smooth ``latent_dim x frames x bands`` embedding patterns.

    Each pattern is a temporal sinusoid (whole periods, so zero time-mean)
    under a Gaussian bump across bands.
    """
    t = np.arange(frames)
    d = np.arange(bands)
    out = np.empty((latent_dim, frames, bands))
    for j in range(latent_dim):
        periods = 3 + 2 * j
        phase = 0.7 * j
        temporal = np.sin(2 * np.pi * periods * t / frames + phase)
        center = (j + 0.5) * bands / latent_dim
        spectral = np.exp(-0.5 * ((d - center) / (0.12 * bands)) ** 2)
        out[j] = np.sqrt(2.0) * temporal[:, None] * spectral[None, :]
    return out


def _rotation(dim: int, deg: float, plane: tuple[int, int]) -> np.ndarray:
    r = np.eye(dim)
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    i, j = plane
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def class_direction(spec: SynthSpec) -> np.ndarray:
    """Unit vector spreading the class separation over the first two latents."""
    v = np.zeros(spec.latent_dim)
    v[:2] = 1.0 / math.sqrt(2.0)
    return v


def latent_shift(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and translation applied to target latents.

    The translation runs along the second class coordinate, the rotation
    mixes that coordinate with a nuisance one. The first class coordinate
    is left untouched, so a shift-invariant classifier exists.
    """
    rot = _rotation(spec.latent_dim, spec.rotation_deg * spec.shift_scale, (1, 2))
    direction = np.zeros(spec.latent_dim)
    direction[1] = 1.0
    return rot, spec.shift_scale * spec.translation * spec.class_separation * direction


def _latents(rng: np.random.Generator, n: int, spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    y = np.arange(n) % 2
    rng.shuffle(y)
    z = rng.standard_normal((n, spec.latent_dim))
    z += np.outer(y - 0.5, class_direction(spec)) * spec.class_separation
    return z, y


def _embed(rng, z: np.ndarray, basis: np.ndarray, spec: SynthSpec) -> np.ndarray:
    x = spec.signal_gain * np.einsum("nj,jtd->ntd", z, basis)
    return x + spec.noise * rng.standard_normal(x.shape)


def synthesize_domains(spec: SynthSpec) -> SynthCorpus:
    """Two Gaussian classes in a latent space, embedded as frames x bands.

    The target domain shares the class-conditional latent structure but is
    pushed through a rotation + translation and a per-band gain, none of
    which depends on the label.
    """
    rng = np.random.default_rng(spec.seed)
    basis = basis_patterns(spec.frames, spec.bands, spec.latent_dim)
    rot, trans = latent_shift(spec)
    scales = rng.uniform(spec.band_scale_low, spec.band_scale_high, spec.bands)
    scales = 1.0 + spec.shift_scale * (scales - 1.0)

    zs, ys = _latents(rng, spec.n_per_domain, spec)
    zt, yt = _latents(rng, spec.n_per_domain, spec)
    zh, yh = _latents(rng, spec.n_source_holdout, spec)
    xs = _embed(rng, zs, basis, spec)
    xt = _embed(rng, zt @ rot.T + trans, basis, spec) * scales
    xh = _embed(rng, zh, basis, spec)
    return SynthCorpus(xs, ys, xt, yt, xh, yh, scales)


def spec_with(spec: SynthSpec, **changes) -> SynthSpec:
    return replace(spec, **changes)
