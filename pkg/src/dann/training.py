"""Joint adversarial training: batching, BN data-combination strategies,
loss, optimizers, the epoch loop, UAR and PCA diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (ModelConfig, ModelParams, encode_flat, forward_emotion, forward_language,
                    init_model, normalize, predict, predict_emotion)

logger = logging.getLogger(__name__)

BN_STRATEGIES = ("BN1", "BN2", "BN3", "BN4")
REG_KINDS = ("l1", "l2", "none")
DEV_POLICIES = ("dev-from-target-labels", "dev-from-source-holdout")
METRICS_HEADER = ["epoch", "lr", "emotion_loss", "language_loss", "total_loss", "domain_uar", "dev_uar"]


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class MetricError(ValueError):
    pass


class NumericalAbort(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch, self.batch, self.detail = epoch, batch, detail


@dataclass
class TrainConfig:
    alpha: float = 0.75
    grl_beta: float = 1.0
    lr_init: float = 1e-3
    lr_decay: float = 0.93
    lr_floor: float = 5e-5
    epochs: int = 50
    batch_size: int = 32
    dropout: float = 0.7
    reg_kind: str = "l2"
    reg_weight: float = 5e-3
    bn_strategy: str = "BN1"
    seed: int = 0
    early_stop_patience: int = 10
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    language_head: bool = True
    dev_policy: str = "dev-from-target-labels"
    dev_fraction: float = 0.3

    def validate(self) -> "TrainConfig":
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.grl_beta < 0:
            raise ConfigError("grl_beta must be >= 0")
        if self.bn_strategy not in BN_STRATEGIES:
            raise ConfigError(f"bn_strategy must be one of {BN_STRATEGIES}")
        if self.reg_kind not in REG_KINDS:
            raise ConfigError(f"reg_kind must be one of {REG_KINDS}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be adam or sgd")
        if self.dev_policy not in DEV_POLICIES:
            raise ConfigError(f"dev_policy must be one of {DEV_POLICIES}")
        if self.batch_size < 2 or self.epochs < 1:
            raise ConfigError("batch_size must be >= 2 and epochs >= 1")
        if self.bn_strategy != "BN4":
            if self.batch_size % 2:
                raise ConfigError(f"{self.bn_strategy} needs an even batch size, got {self.batch_size}")
            if self.batch_size < 4:
                raise ConfigError("half batches must hold at least 2 samples")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return max(cfg.lr_floor, cfg.lr_init * cfg.lr_decay**epoch)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    source: np.ndarray
    target: np.ndarray
    domain: str | None = None  # set for single-domain (BN4) batches


@dataclass
class BatchPlan:
    batches: list[Batch]
    strategy: str


def _chunks(order: np.ndarray, size: int) -> list[np.ndarray]:
    n_chunks = max(1, math.ceil(len(order) / size))
    return np.array_split(order, n_chunks)


def _cycled(rng: np.random.Generator, n: int, length: int) -> np.ndarray:
    """``length`` indices from back-to-back shuffles of ``range(n)``."""
    reps = math.ceil(length / n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:length]


def plan_batches(source_n: int, target_n: int, cfg: TrainConfig,
                 rng: np.random.Generator) -> BatchPlan:
    """One epoch of batches.

    Mixed strategies pair a shuffled source half with a target half of the
    same length; single-domain batches (BN4) alternate source, target.
    The source order is split into near-equal chunks so every source sample
    is used exactly once per epoch.
    """
    if source_n < 1 or target_n < 1:
        raise DataError("both domains need at least one sample")
    if cfg.bn_strategy == "BN4":
        size = cfg.batch_size
        if source_n < size or target_n < size:
            raise DataError(f"BN4 needs at least {size} samples per domain")
        src = _chunks(rng.permutation(source_n), size)
        tgt_order = _cycled(rng, target_n, source_n)
        tgt_sizes = np.cumsum([0] + [len(c) for c in src])
        batches = []
        for i, chunk in enumerate(src):
            batches.append(Batch(chunk, np.zeros(0, dtype=int), "source"))
            batches.append(Batch(np.zeros(0, dtype=int), tgt_order[tgt_sizes[i]:tgt_sizes[i + 1]], "target"))
        return BatchPlan(batches, cfg.bn_strategy)
    half = cfg.batch_size // 2
    if source_n < half or target_n < half:
        raise DataError(f"{cfg.bn_strategy} needs at least {half} samples per domain")
    src = _chunks(rng.permutation(source_n), half)
    tgt_order = _cycled(rng, target_n, source_n) if target_n < source_n else rng.permutation(target_n)[:source_n]
    batches, pos = [], 0
    for chunk in src:
        batches.append(Batch(chunk, tgt_order[pos : pos + len(chunk)]))
        pos += len(chunk)
    return BatchPlan(batches, cfg.bn_strategy)


# ---------------------------------------------------------------------------
# BN strategies and losses


def bn_apply(strategy: str, flat: Tensor, n_source: int, params: ModelParams, mcfg: ModelConfig,
             domain: str | None = None, rng: np.random.Generator | None = None,
             update_running: bool = True) -> tuple[Tensor | None, Tensor]:
    """Return (features for the emotion head, features for the language head).

    ``flat`` holds the source rows first (``n_source`` of them) for the mixed
    strategies; for BN4 it is a single-domain batch tagged by ``domain``.
    """
    n = flat.shape[0]
    kw = dict(mode="train", rng=rng)
    if strategy == "BN1":
        f = normalize(flat, params, mcfg, update_running=update_running, **kw)
        return ad.rows(f, 0, n_source), f
    if strategy == "BN2":
        fs = normalize(ad.rows(flat, 0, n_source), params, mcfg, update_running=False, **kw)
        fw = normalize(flat, params, mcfg, update_running=update_running, **kw)
        return fs, fw
    if strategy == "BN3":
        fs = normalize(ad.rows(flat, 0, n_source), params, mcfg, update_running=update_running, **kw)
        ft = normalize(ad.rows(flat, n_source, n), params, mcfg, update_running=update_running, **kw)
        return fs, ad.concat([fs, ft], axis=0)
    if strategy == "BN4":
        if domain not in ("source", "target"):
            raise ConfigError("BN4 batches must be tagged source or target")
        f = normalize(flat, params, mcfg, update_running=update_running, **kw)
        return (f if domain == "source" else None), f
    raise ConfigError(f"unknown BN strategy {strategy!r}")


def onehot(labels, n_classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def regularizer(weights: Sequence[Tensor], kind: str) -> Tensor | None:
    if kind == "none" or not weights:
        return None
    op = ad.abs_sum if kind == "l1" else ad.square_sum
    terms = [op(w) for w in weights]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def total_loss(emotion_logits: Tensor | None, emotion_onehot, language_logits: Tensor | None,
               language_onehot, cfg: TrainConfig, params: ModelParams | None = None,
               reg_weights: Sequence[Tensor] | None = None) -> tuple[Tensor, Tensor | None, Tensor | None]:
    """``alpha * L_e + (1 - alpha) * L_l + reg_weight * Omega``.

    Returns ``(total, L_e, L_l)``; either head may be absent from a batch.
    """
    terms = []
    le = ll = None
    if emotion_logits is not None:
        le = ad.softmax_cross_entropy(emotion_logits, emotion_onehot)
        terms.append(ad.scale(le, cfg.alpha))
    if language_logits is not None:
        ll = ad.softmax_cross_entropy(language_logits, language_onehot)
        terms.append(ad.scale(ll, 1.0 - cfg.alpha))
    if reg_weights is None and params is not None:
        reg_weights = params.regularized()
        if not cfg.language_head:
            reg_weights = [w for w in reg_weights if w is not params.language["lang_w"]]
    reg = regularizer(reg_weights or [], cfg.reg_kind)
    if reg is not None:
        terms.append(ad.scale(reg, cfg.reg_weight))
    if not terms:
        raise ValueError("nothing to optimize in this batch")
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out, le, ll


@dataclass
class StepOutput:
    total: Tensor
    emotion: Tensor | None
    language: Tensor | None
    language_pred: np.ndarray
    language_true: np.ndarray
    emotion_rows: int


def batch_losses(params: ModelParams, mcfg: ModelConfig, cfg: TrainConfig, batch: Batch,
                 source_x: np.ndarray, source_y: np.ndarray, target_x: np.ndarray,
                 rng: np.random.Generator | None, dropout_mask=None,
                 update_running: bool = True) -> StepOutput:
    """Build the graph for one batch and return its losses (no backward)."""
    xs, xt = source_x[batch.source], target_x[batch.target]
    ns = len(batch.source)
    x = np.concatenate([xs, xt], axis=0)
    flat = encode_flat(x, params, mcfg, "train", rng, dropout_mask)
    fe, fl = bn_apply(cfg.bn_strategy, flat, ns, params, mcfg, batch.domain, rng, update_running)
    emotion_logits = forward_emotion(fe, params) if fe is not None and ns > 0 else None
    domain_true = np.concatenate([np.zeros(ns, dtype=int), np.ones(len(batch.target), dtype=int)])
    language_logits = forward_language(fl, params, cfg.grl_beta) if cfg.language_head else None
    total, le, ll = total_loss(
        emotion_logits, onehot(source_y[batch.source], mcfg.n_emotions) if emotion_logits is not None else None,
        language_logits, onehot(domain_true, mcfg.n_languages), cfg, params)
    lang_pred = predict(language_logits) if language_logits is not None else np.zeros(0, dtype=int)
    return StepOutput(total, le, ll, lang_pred, domain_true if language_logits is not None else lang_pred,
                      0 if emotion_logits is None else emotion_logits.shape[0])


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, params: Sequence[Tensor]):
        self.params = list(params)

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - lr * p.grad


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def make_optimizer(cfg: TrainConfig, params: Sequence[Tensor]):
    if cfg.optimizer == "sgd":
        return SGD(params)
    return Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


# ---------------------------------------------------------------------------
# metrics


def evaluate_uar(predictions, labels, classes: Sequence[int] | None = None) -> float:
    """Unweighted average recall: mean of per-class recalls."""
    pred = np.asarray(predictions, dtype=int).ravel()
    lab = np.asarray(labels, dtype=int).ravel()
    if pred.shape != lab.shape or lab.size == 0:
        raise MetricError("predictions and labels must be non-empty and equally long")
    present = np.unique(lab)
    classes = np.union1d(present, np.unique(pred)) if classes is None else np.asarray(classes)
    missing = np.setdiff1d(classes, present)
    if missing.size:
        raise MetricError(f"class(es) {missing.tolist()} absent from labels; recall undefined")
    recalls = [np.mean(pred[lab == c] == c) for c in classes]
    return float(np.mean(recalls))


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    emotion_loss: float
    language_loss: float
    total_loss: float
    domain_uar: float
    dev_uar: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in METRICS_HEADER[1:]]


def write_metrics_csv(path, metrics: Sequence[EpochMetrics]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(METRICS_HEADER) + "\n")
        for m in metrics:
            f.write(",".join(m.row()) + "\n")


def read_metrics_csv(path) -> list[EpochMetrics]:
    out = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header")
        for line in f:
            vals = line.strip().split(",")
            out.append(EpochMetrics(int(vals[0]), *map(float, vals[1:])))
    return out


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best_params: ModelParams
    final_params: ModelParams
    metrics: list[EpochMetrics]
    best_epoch: int
    best_dev_uar: float
    model_config: ModelConfig


def effective_model_config(mcfg: ModelConfig, cfg: TrainConfig) -> ModelConfig:
    return replace(mcfg, dropout_rate=cfg.dropout, grl_beta=cfg.grl_beta)


def train_step(params: ModelParams, opt, mcfg: ModelConfig, cfg: TrainConfig, batch: Batch,
               source_x, source_y, target_x, lr: float, rng: np.random.Generator | None = None,
               dropout_mask=None, where: tuple[int, int] = (-1, -1)) -> StepOutput:
    """Forward, backward and one optimizer update for a single batch.

    Raises ``NumericalAbort`` (tagged with ``where`` = epoch, batch) before
    touching the parameters if the loss is not finite.
    """
    out = batch_losses(params, mcfg, cfg, batch, source_x, source_y, target_x, rng, dropout_mask)
    total = float(out.total.data)
    if not math.isfinite(total):
        detail = f"total={total}, emotion={_val(out.emotion)}, language={_val(out.language)}"
        raise NumericalAbort(*where, detail)
    for p in opt.params:
        p.zero_grad()
    out.total.backward()
    opt.step(lr)
    out.total.release()
    return out


def train(source_x, source_y, target_x, dev_x, dev_y, cfg: TrainConfig,
          mcfg: ModelConfig | None = None, params: ModelParams | None = None,
          on_epoch: Callable[[EpochMetrics], None] | None = None) -> TrainResult:
    """Adam (or plain SGD) on the total loss with per-epoch dev-UAR early stopping.

    Inputs are feature stacks ``N x frames x bands``; ``source_y`` and
    ``dev_y`` are 0/1 emotion labels.  ``target_x`` is never labelled here.
    """
    cfg.validate()
    mcfg = effective_model_config(mcfg or ModelConfig(), cfg)
    source_x = np.asarray(source_x, dtype=np.float64)
    target_x = np.asarray(target_x, dtype=np.float64)
    source_y = np.asarray(source_y, dtype=int)
    if len(source_x) != len(source_y):
        raise DataError("source features and labels differ in length")
    params = params or init_model(mcfg, cfg.seed)
    opt = make_optimizer(cfg, params.tensors())
    seq = np.random.SeedSequence(cfg.seed)
    batch_rng, dropout_rng = (np.random.default_rng(s) for s in seq.spawn(2))

    metrics: list[EpochMetrics] = []
    best = (-1.0, -1, params.copy())
    since_best = 0
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        plan = plan_batches(len(source_x), len(target_x), cfg, batch_rng)
        e_losses, l_losses, t_losses = [], [], []
        lang_pred, lang_true = [], []
        for b_idx, batch in enumerate(plan.batches):
            out = train_step(params, opt, mcfg, cfg, batch, source_x, source_y, target_x, lr,
                             dropout_rng, where=(epoch, b_idx))
            t_losses.append(float(out.total.data))
            if out.emotion is not None:
                e_losses.append(float(out.emotion.data))
            if out.language is not None:
                l_losses.append(float(out.language.data))
                lang_pred.append(out.language_pred)
                lang_true.append(out.language_true)
        domain_uar = (evaluate_uar(np.concatenate(lang_pred), np.concatenate(lang_true), [0, 1])
                      if lang_pred else float("nan"))
        dev_uar = evaluate_uar(predict_emotion(dev_x, params, mcfg), dev_y)
        m = EpochMetrics(epoch, lr, _mean(e_losses), _mean(l_losses), _mean(t_losses), domain_uar, dev_uar)
        metrics.append(m)
        logger.info("epoch %d lr=%.3g Le=%.4f Ll=%.4f dev_uar=%.4f", epoch, lr,
                    m.emotion_loss, m.language_loss, dev_uar)
        if on_epoch is not None:
            on_epoch(m)
        if dev_uar > best[0]:
            best = (dev_uar, epoch, params.copy())
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                break
    return TrainResult(best[2], params, metrics, best[1], best[0], mcfg)


def _mean(xs) -> float:
    return float(np.mean(xs)) if xs else float("nan")


def _val(t: Tensor | None) -> float | None:
    return None if t is None else float(t.data)


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    explained_variance: float


def pca_project(x, n_components: int = 2, tol: float = 1e-10, max_iter: int = 1000) -> PCAResult:
    """Project onto the leading covariance eigenvectors (power iteration + deflation).

    Each component is sign-fixed so its first non-negligible loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("pca_project needs at least 3 rows of 2-D data")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / x.shape[0]
    total = float(np.trace(cov))
    if total <= 0.0:
        raise ValueError("data has zero variance; projection undefined")
    rng = np.random.default_rng(0)
    comps, lams = [], []
    work = cov.copy()
    for _ in range(min(n_components, x.shape[1])):
        v = rng.standard_normal(x.shape[1])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            w /= norm
            done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            if done:
                break
        lam = float(v @ cov @ v)
        big = np.flatnonzero(np.abs(v) > 1e-12)
        if big.size and v[big[0]] < 0:
            v = -v
        comps.append(v)
        lams.append(lam)
        work = work - lam * np.outer(v, v)
    components = np.array(comps)
    return PCAResult(xc @ components.T, components, np.array(lams), float(sum(lams) / total))
