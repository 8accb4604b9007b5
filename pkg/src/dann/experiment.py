"""End-to-end experiments on the synthetic corpus: multi-seed runs, report
tables in ``mean(sigma)`` form and PCA exports."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import features as ft
from .data import Manifest, SynthCorpus, SynthSpec, UtteranceRecord, split_dev, synthesize_domains
from .model import ModelParams, ModelConfig, predict_emotion, represent
from .training import NumericalAbort, TrainConfig, TrainResult, evaluate_uar, pca_project, train

logger = logging.getLogger(__name__)

PCA_HEADER = ["utterance_id", "pc1", "pc2", "domain", "label"]
REPORT_HEADER = ["config", "target_uar", "source_uar", "seeds", "failed_seeds"]
SIGMA_NOTE = "# sigma is the population standard deviation over seeds"

# fixed so that every seed of a comparison sees the same dev/eval partition
DEV_SPLIT_SEED = 0


def normalize_stack(x: np.ndarray, stats: ft.NormStats | None = None) -> tuple[np.ndarray, ft.NormStats]:
    """Corpus normalization for an ``N x frames x bands`` stack with no padding."""
    if stats is None:
        stats = ft.corpus_stats([ft.LogMelMatrix(m, m.shape[0]) for m in x])
    return (x - stats.mean) / stats.std, stats


@dataclass
class PreparedData:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    dev_x: np.ndarray
    dev_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    holdout_x: np.ndarray
    holdout_y: np.ndarray
    eval_idx: np.ndarray


def prepare_synthetic(corpus: SynthCorpus, dev_policy: str = "dev-from-target-labels",
                      dev_fraction: float = 0.3) -> PreparedData:
    """Normalize each domain with its own statistics and carve out dev/eval sets.

    The source hold-out is normalized with source statistics.  All target
    utterances serve as unlabelled training data; the dev part's labels are
    used only for model selection and the eval part only for scoring.
    """
    xs, s_stats = normalize_stack(corpus.source_x)
    xt, _ = normalize_stack(corpus.target_x)
    xh = normalize_stack(corpus.holdout_x, s_stats)[0] if len(corpus.holdout_x) else corpus.holdout_x
    if dev_policy == "dev-from-target-labels":
        recs = [UtteranceRecord(str(i), "", "target", None, int(y)) for i, y in enumerate(corpus.target_y)]
        dev, ev = split_dev(Manifest(recs), dev_fraction, DEV_SPLIT_SEED)
        dev_idx = np.array([int(r.id) for r in dev.records], dtype=int)
        eval_idx = np.array([int(r.id) for r in ev.records], dtype=int)
        dev_x, dev_y = xt[dev_idx], corpus.target_y[dev_idx]
    elif dev_policy == "dev-from-source-holdout":
        if not len(xh):
            raise ValueError("dev-from-source-holdout needs a non-empty source hold-out")
        eval_idx = np.arange(len(xt))
        dev_x, dev_y = xh, corpus.holdout_y
    else:
        raise ValueError(f"unknown dev policy {dev_policy!r}")
    return PreparedData(xs, corpus.source_y, xt, dev_x, dev_y, xt[eval_idx], corpus.target_y[eval_idx],
                        xh, corpus.holdout_y, eval_idx)


@dataclass
class SeedOutcome:
    seed: int
    target_uar: float = float("nan")
    source_uar: float = float("nan")
    best_epoch: int = -1
    failure: str | None = None
    result: TrainResult | None = field(default=None, repr=False)


def run_seed(data: PreparedData, cfg: TrainConfig, mcfg: ModelConfig | None = None,
             final: bool = False) -> SeedOutcome:
    """Train one seed and score target-eval and source hold-out UAR.

    ``final=True`` scores the last-epoch parameters instead of the best
    dev checkpoint.
    """
    try:
        r = train(data.source_x, data.source_y, data.target_x, data.dev_x, data.dev_y, cfg, mcfg)
    except NumericalAbort as exc:
        logger.warning("seed %d aborted: %s", cfg.seed, exc)
        return SeedOutcome(cfg.seed, failure=str(exc))
    params = r.final_params if final else r.best_params
    tgt = evaluate_uar(predict_emotion(data.eval_x, params, r.model_config), data.eval_y)
    src = (evaluate_uar(predict_emotion(data.holdout_x, params, r.model_config), data.holdout_y)
           if len(data.holdout_x) else float("nan"))
    return SeedOutcome(cfg.seed, tgt, src, r.best_epoch, None, r)


@dataclass
class MultiSeedSummary:
    name: str
    outcomes: list[SeedOutcome]

    def _values(self, attr: str) -> np.ndarray:
        return np.array([getattr(o, attr) for o in self.outcomes if o.failure is None])

    @property
    def failed_seeds(self) -> list[int]:
        return [o.seed for o in self.outcomes if o.failure is not None]

    @property
    def target_uars(self) -> np.ndarray:
        return self._values("target_uar")

    @property
    def source_uars(self) -> np.ndarray:
        return self._values("source_uar")

    def target_mean_std(self) -> tuple[float, float]:
        return mean_std(self.target_uars)

    def source_mean_std(self) -> tuple[float, float]:
        return mean_std(self.source_uars)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation; NaN for an empty input."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


def format_mean_std(values: Sequence[float]) -> str:
    """UARs in [0, 1] as a percentage cell, e.g. ``71.99(0.33)``."""
    m, s = mean_std(values)
    if np.isnan(m):
        return "n/a"
    return f"{100 * m:.2f}({100 * s:.2f})"


def run_multi_seed(data: PreparedData, cfg: TrainConfig, seeds: Sequence[int], name: str = "",
                   mcfg: ModelConfig | None = None, final: bool = False) -> MultiSeedSummary:
    if len(seeds) < 2:
        raise ValueError("run_multi_seed needs at least 2 seeds")
    outcomes = []
    for s in seeds:
        o = run_seed(data, replace(cfg, seed=int(s)), mcfg, final)
        logger.info("%s seed %d: target %.4f source %.4f", name, s, o.target_uar, o.source_uar)
        outcomes.append(o)
    return MultiSeedSummary(name or cfg.bn_strategy, outcomes)


def write_report(path, summaries: Sequence[MultiSeedSummary]) -> None:
    """CSV table with one ``mean(sigma)`` row per configuration."""
    with open(path, "w", newline="") as f:
        f.write(SIGMA_NOTE + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for s in summaries:
            w.writerow([s.name, format_mean_std(s.target_uars), format_mean_std(s.source_uars),
                        " ".join(str(o.seed) for o in s.outcomes),
                        " ".join(str(x) for x in s.failed_seeds)])


def write_pca_csv(path, ids: Sequence[str], coords: np.ndarray, domains: Sequence[str],
                  labels: Sequence[int | None]) -> None:
    if not len(ids) == len(coords) == len(domains) == len(labels):
        raise ValueError("PCA columns differ in length")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PCA_HEADER)
        for uid, (a, b), d, y in zip(ids, coords, domains, labels):
            w.writerow([uid, repr(float(a)), repr(float(b)), d, "" if y is None or y < 0 else int(y)])


def read_pca_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def pca_of_domains(source_x, target_x, params: ModelParams, mcfg: ModelConfig):
    """Project eval-mode representations of both domains onto two PCs."""
    reps = np.vstack([represent(source_x, params, mcfg), represent(target_x, params, mcfg)])
    domains = ["source"] * len(source_x) + ["target"] * len(target_x)
    return pca_project(reps, 2), domains


@dataclass
class AdaptationComparison:
    baseline: MultiSeedSummary
    dann: MultiSeedSummary

    @property
    def gap(self) -> float:
        """Mean target-UAR gain of DANN over the baseline."""
        return self.dann.target_mean_std()[0] - self.baseline.target_mean_std()[0]

    @property
    def shift(self) -> float:
        """How far the baseline's target UAR falls below its source UAR."""
        return self.baseline.source_mean_std()[0] - self.baseline.target_mean_std()[0]


def baseline_config(cfg: TrainConfig) -> TrainConfig:
    return replace(cfg, alpha=1.0, grl_beta=0.0)


def compare_adaptation(spec: SynthSpec | None = None, seeds: Sequence[int] = range(5),
                       cfg: TrainConfig | None = None) -> AdaptationComparison:
    """Baseline (alpha=1, beta=0) vs DANN on one synthetic corpus, same seeds."""
    cfg = cfg or TrainConfig()
    data = prepare_synthetic(synthesize_domains(spec or SynthSpec()), cfg.dev_policy, cfg.dev_fraction)
    base = run_multi_seed(data, baseline_config(cfg), seeds, "baseline")
    dann = run_multi_seed(data, cfg, seeds, "dann")
    return AdaptationComparison(base, dann)


def compare_bn_strategies(spec: SynthSpec | None = None, seeds: Sequence[int] = range(5),
                          cfg: TrainConfig | None = None, strategies: Sequence[str] = ("BN1", "BN2", "BN3", "BN4"),
                          final: bool = False) -> dict[str, MultiSeedSummary]:
    cfg = cfg or TrainConfig()
    data = prepare_synthetic(synthesize_domains(spec or SynthSpec()), cfg.dev_policy, cfg.dev_fraction)
    return {s: run_multi_seed(data, replace(cfg, bn_strategy=s), seeds, s, final=final) for s in strategies}
