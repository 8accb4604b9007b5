"""Encoder (conv -> ReLU -> maxpool -> attention append -> flatten -> BN),
emotion head, and GRL-guarded language head."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor

CHECKPOINT_MAGIC = b"DANN"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_filters: int = 200
    kernel: int = 10
    conv_stride: int = 3
    pool_size: int = 30
    pool_stride: int = 30
    dropout_rate: float = 0.7
    grl_beta: float = 1.0
    n_emotions: int = 2
    n_languages: int = 2
    input_frames: int = 750
    input_dims: int = 26
    dropout_before_bn: bool = True

    def __post_init__(self):
        for name in ("n_filters", "kernel", "conv_stride", "pool_size", "pool_stride",
                     "n_emotions", "n_languages", "input_frames", "input_dims"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.kernel > self.input_frames:
            raise ValueError("kernel longer than input")
        if self.pool_size > self.conv_out_len:
            raise ValueError("pool size longer than the convolution output")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.grl_beta < 0:
            raise ValueError("grl_beta must be >= 0")

    @property
    def conv_out_len(self) -> int:
        return (self.input_frames - self.kernel) // self.conv_stride + 1

    @property
    def pool_out_len(self) -> int:
        return (self.conv_out_len - self.pool_size) // self.pool_stride + 1

    @property
    def flatten_dim(self) -> int:
        return (self.pool_out_len + 1) * self.n_filters


@dataclass
class ModelParams:
    encoder: dict[str, Tensor]
    emotion: dict[str, Tensor]
    language: dict[str, Tensor]
    bn_running: RunningStats

    def groups(self) -> dict[str, dict[str, Tensor]]:
        return {"encoder": self.encoder, "emotion": self.emotion, "language": self.language}

    def named(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for g in self.groups().values() for n, t in g.items()]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def regularized(self) -> list[Tensor]:
        """Weights subject to L1/L2 penalties (biases and BN parameters excluded)."""
        return [self.encoder["conv_w"], self.encoder["attn_query"],
                self.emotion["emo_w"], self.language["lang_w"]]

    def copy(self) -> "ModelParams":
        def dup(g):
            return {k: ad.parameter(v.data.copy()) for k, v in g.items()}

        return ModelParams(dup(self.encoder), dup(self.emotion), dup(self.language),
                           RunningStats(self.bn_running.mean.copy(), self.bn_running.var.copy(),
                                        self.bn_running.momentum))


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(cfg: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    f, k, d, width = cfg.n_filters, cfg.kernel, cfg.input_dims, cfg.flatten_dim
    encoder = {
        "conv_w": ad.parameter(_glorot(rng, (f, k, d), k * d, k * f)),
        "conv_b": ad.parameter(np.zeros(f)),
        "attn_query": ad.parameter(np.zeros(f)),
        "bn_gamma": ad.parameter(np.ones(width)),
        "bn_shift": ad.parameter(np.zeros(width)),
    }
    emotion = {
        "emo_w": ad.parameter(_glorot(rng, (width, cfg.n_emotions), width, cfg.n_emotions)),
        "emo_b": ad.parameter(np.zeros(cfg.n_emotions)),
    }
    language = {
        "lang_w": ad.parameter(_glorot(rng, (width, cfg.n_languages), width, cfg.n_languages)),
        "lang_b": ad.parameter(np.zeros(cfg.n_languages)),
    }
    return ModelParams(encoder, emotion, language, RunningStats.fresh(width))


@dataclass
class EncoderTrace:
    """Intermediate values of one encoder pass, kept for inspection."""
    conv: Tensor
    pooled: Tensor
    attention: Tensor
    flat: Tensor
    extras: dict = field(default_factory=dict)


def encode_flat(x, params: ModelParams, cfg: ModelConfig, mode: str = "eval",
                rng: np.random.Generator | None = None, dropout_mask=None,
                trace: bool = False):
    """Everything before BN: returns the N x flatten_dim tensor.

    Dropout is applied here (train mode) when ``cfg.dropout_before_bn``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.input_frames, cfg.input_dims):
        raise ad.DimensionError(
            f"expected input (N x {cfg.input_frames} x {cfg.input_dims}), got {x.shape}")
    enc = params.encoder
    conv = ad.relu(ad.conv1d(ad.constant(x), enc["conv_w"], enc["conv_b"], cfg.conv_stride))
    pooled = ad.maxpool1d(conv, cfg.pool_size, cfg.pool_stride)
    weights, att = ad.attention_pool(pooled, enc["attn_query"])
    n = x.shape[0]
    frames = ad.concat([pooled, ad.reshape(att, (n, 1, cfg.n_filters))], axis=1)
    flat = ad.reshape(frames, (n, cfg.flatten_dim))
    if cfg.dropout_before_bn:
        flat = ad.dropout(flat, cfg.dropout_rate, mode, rng, dropout_mask)
    if trace:
        return flat, EncoderTrace(conv, pooled, weights, flat)
    return flat


def normalize(flat: Tensor, params: ModelParams, cfg: ModelConfig, mode: str = "eval",
              stats_source: Tensor | None = None, update_running: bool = True,
              rng: np.random.Generator | None = None, dropout_mask=None) -> Tensor:
    enc = params.encoder
    f = ad.batch_norm(flat, enc["bn_gamma"], enc["bn_shift"], stats_source, mode,
                      params.bn_running, update_running)
    if not cfg.dropout_before_bn:
        f = ad.dropout(f, cfg.dropout_rate, mode, rng, dropout_mask)
    return f


def encode(x, params: ModelParams, cfg: ModelConfig, mode: str = "eval",
           rng: np.random.Generator | None = None, update_running: bool = True) -> Tensor:
    """Full encoder; train mode normalizes with the batch's own statistics."""
    flat = encode_flat(x, params, cfg, mode, rng)
    return normalize(flat, params, cfg, mode, update_running=update_running, rng=rng)


def forward_emotion(f: Tensor, params: ModelParams) -> Tensor:
    return ad.dense(f, params.emotion["emo_w"], params.emotion["emo_b"])


def forward_language(f: Tensor, params: ModelParams, beta: float) -> Tensor:
    return ad.dense(ad.grad_reverse(f, beta), params.language["lang_w"], params.language["lang_b"])


def predict(logits) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=1)


def _detached(t: Tensor) -> np.ndarray:
    data = t.data
    t.release()
    return data


def represent(x, params: ModelParams, cfg: ModelConfig, batch: int = 64) -> np.ndarray:
    """Eval-mode representations ``f`` for a stack of inputs."""
    x = np.asarray(x, dtype=np.float64)
    return np.vstack([_detached(encode(x[i : i + batch], params, cfg, "eval"))
                      for i in range(0, len(x), batch)])


def predict_emotion(x, params: ModelParams, cfg: ModelConfig, batch: int = 64) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = []
    for i in range(0, len(x), batch):
        logits = forward_emotion(encode(x[i : i + batch], params, cfg, "eval"), params)
        out.append(predict(_detached(logits)))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


# ---------------------------------------------------------------------------
# checkpoint format

_CONFIG_LAYOUT = [
    ("n_filters", "I"), ("kernel", "I"), ("conv_stride", "I"), ("pool_size", "I"),
    ("pool_stride", "I"), ("dropout_rate", "d"), ("grl_beta", "d"), ("n_emotions", "I"),
    ("n_languages", "I"), ("input_frames", "I"), ("input_dims", "I"), ("dropout_before_bn", "I"),
]
assert [n for n, _ in _CONFIG_LAYOUT] == [f.name for f in fields(ModelConfig)]
_CONFIG_FMT = "<" + "".join(c for _, c in _CONFIG_LAYOUT)


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams) -> None:
    cfg_values = [int(getattr(cfg, n)) if c == "I" else float(getattr(cfg, n)) for n, c in _CONFIG_LAYOUT]
    arrays = [(n, t.data) for n, t in params.named()]
    arrays += [("bn_running_mean", params.bn_running.mean), ("bn_running_var", params.bn_running.var)]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack(_CONFIG_FMT, *cfg_values))
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _parse_checkpoint(blob: bytes) -> tuple[ModelConfig, dict[str, np.ndarray], int]:
    pos = 4
    raw_cfg = struct.unpack_from(_CONFIG_FMT, blob, pos)
    pos += struct.calcsize(_CONFIG_FMT)
    kwargs = {}
    for (name, code), v in zip(_CONFIG_LAYOUT, raw_cfg):
        kwargs[name] = bool(v) if name == "dropout_before_bn" else v
    cfg = ModelConfig(**kwargs)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * size
    return cfg, arrays, pos


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    try:
        cfg, arrays, pos = _parse_checkpoint(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    template = init_model(cfg, 0)
    try:
        groups = {g: {n: ad.parameter(arrays[n]) for n in members}
                  for g, members in template.groups().items()}
        running = RunningStats(arrays["bn_running_mean"], arrays["bn_running_var"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing tensor {exc}") from None
    params = ModelParams(groups["encoder"], groups["emotion"], groups["language"], running)
    for (n, t), (_, ref) in zip(params.named(), template.named()):
        if t.shape != ref.shape:
            raise CheckpointError(f"{path}: tensor {n} has shape {t.shape}, expected {ref.shape}")
    return cfg, params
