"""Command-line entry points: extract, synth, train, eval, gradcheck, report.

Exit codes: 0 success, 1 check failure, 2 usage/input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import features as ft
from .data import (Manifest, ManifestError, StratificationError, SynthSpec, UtteranceRecord, load_manifest,
                   save_manifest, split_dev, synthesize_domains)
from .experiment import (baseline_config, format_mean_std, pca_of_domains, prepare_synthetic, run_multi_seed,
                         write_pca_csv, write_report)
from .gradcheck import model_suite, ops_suite
from .model import CheckpointError, ModelConfig, load_checkpoint, predict_emotion, represent, save_checkpoint
from .plotting import plot_pca, plot_training_curves
from .training import (BN_STRATEGIES, DEV_POLICIES, REG_KINDS, ConfigError, MetricError, NumericalAbort,
                       TrainConfig, evaluate_uar, pca_project, train, write_metrics_csv)

logger = logging.getLogger("dann")

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


def _threads() -> int:
    raw = os.environ.get("DANN_NUM_THREADS", "")
    try:
        n = int(raw) if raw else min(4, os.cpu_count() or 1)
    except ValueError:
        raise InputError(f"DANN_NUM_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def _load_manifest(path) -> Manifest:
    try:
        return load_manifest(path)
    except (OSError, ManifestError) as exc:
        raise InputError(str(exc)) from None


def load_feature_stack(m: Manifest, base: Path) -> np.ndarray:
    """Read every record's LMF1 file (paths relative to ``base``) into one stack."""
    def read(rec: UtteranceRecord):
        try:
            return ft.read_features(_resolve(base, rec.path)).values
        except (OSError, ft.FeatureInputError) as exc:
            return exc

    with ThreadPoolExecutor(_threads()) as pool:
        out = list(pool.map(read, m.records))
    bad = [f"{r.id}: {e}" for r, e in zip(m.records, out) if isinstance(e, Exception)]
    if bad:
        raise InputError("could not read features:\n  " + "\n  ".join(bad))
    return np.stack(out) if out else np.zeros((0, ft.N_FRAMES, ft.N_BANDS))


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise InputError(f"{path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# extract


def cmd_extract(args) -> int:
    manifest_path = Path(args.manifest)
    m = _load_manifest(manifest_path)
    base = manifest_path.parent
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def work(rec: UtteranceRecord):
        try:
            return ft.pad_or_truncate(ft.extract_logmel(ft.read_wav(_resolve(base, rec.path))))
        except Exception as exc:  # report every failing utterance, not just the first
            return exc

    with ThreadPoolExecutor(_threads()) as pool:
        mats = list(pool.map(work, m.records))
    bad = [f"{r.id}: {e}" for r, e in zip(m.records, mats) if isinstance(e, Exception)]
    if bad:
        raise InputError(f"{len(bad)} utterance(s) failed:\n  " + "\n  ".join(bad))
    if args.stats_in:
        try:
            stats = ft.read_stats(args.stats_in)
        except (OSError, ft.FeatureInputError) as exc:
            raise InputError(str(exc)) from None
    else:
        stats = ft.corpus_stats(mats)
        ft.write_stats(args.stats_out, stats)
    records = []
    for rec, mat in zip(m.records, ft.apply_normalization(mats, stats)):
        ft.write_features(out / f"{rec.id}.lmf", mat)
        records.append(replace(rec, path=f"{rec.id}.lmf"))
    save_manifest(out / "manifest.csv", Manifest(records, m.corpus, m.dimension))
    print(f"extracted {len(records)} utterances to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def _spec_from_args(args) -> SynthSpec:
    values = {}
    if args.spec_file:
        try:
            values.update(json.loads(Path(args.spec_file).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read spec file: {exc}") from None
    for f in fields(SynthSpec):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    unknown = set(values) - {f.name for f in fields(SynthSpec)}
    if unknown:
        raise InputError(f"unknown spec field(s): {sorted(unknown)}")
    try:
        return SynthSpec(**values)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid spec: {exc}") from None


def _write_normalized(root: Path, m: Manifest, x: np.ndarray, stats: ft.NormStats | None) -> ft.NormStats:
    mats = [ft.LogMelMatrix(v, v.shape[0]) for v in x]
    stats = stats or ft.corpus_stats(mats)
    for rec, mat in zip(m.records, ft.apply_normalization(mats, stats)):
        ft.write_features(root / rec.path, mat)
    return stats


def cmd_synth(args) -> int:
    spec = _spec_from_args(args)
    out = Path(args.out_dir)
    _prepare_dir(out, args.force)
    corpus = synthesize_domains(spec)
    feat_dir = out / "features"
    feat_dir.mkdir(exist_ok=True)
    source, target = corpus.manifests("features")
    holdout = Manifest([UtteranceRecord(f"hold{i:05d}", f"features/hold{i:05d}.lmf", "source", None, int(y))
                        for i, y in enumerate(corpus.holdout_y)], "synth-holdout")
    # each domain is normalized with its own statistics; the hold-out reuses the source ones
    src_stats = _write_normalized(out, source, corpus.source_x, None)
    ft.write_stats(out / "source.lms", src_stats)
    ft.write_stats(out / "target.lms", _write_normalized(out, target, corpus.target_x, None))
    if len(holdout):
        _write_normalized(out, holdout, corpus.holdout_x, src_stats)
    save_manifest(out / "source.csv", source)
    save_manifest(out / "target.csv", target)
    save_manifest(out / "holdout.csv", holdout)
    labelled = Manifest([replace(r, label=int(y)) for r, y in zip(target.records, corpus.target_y)],
                        "synth-target-labels")
    save_manifest(out / "target_labels.csv", labelled)
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=2) + "\n")
    print(f"source {len(source)}, target {len(target)}, holdout {len(holdout)} utterances "
          f"({spec.frames}x{spec.bands}) written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


_TRAIN_FLAGS = {  # argparse dest -> TrainConfig field
    "alpha": "alpha", "beta": "grl_beta", "bn": "bn_strategy", "seed": "seed", "epochs": "epochs",
    "batch_size": "batch_size", "lr": "lr_init", "lr_decay": "lr_decay", "lr_floor": "lr_floor",
    "dropout": "dropout", "reg": "reg_kind", "reg_weight": "reg_weight", "patience": "early_stop_patience",
    "optimizer": "optimizer", "dev_policy": "dev_policy", "dev_fraction": "dev_fraction",
}
_INPUT_FLAGS = ("source", "target", "target_labels", "holdout", "split_seed")


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig(**{f: getattr(args, a) for a, f in _TRAIN_FLAGS.items()})
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise InputError(str(exc)) from None


def _dev_split(args, cfg: TrainConfig, source: Manifest, sx, target: Manifest, tx):
    """Return (train source x, y, dev x, y) according to the dev policy."""
    sy = source.labels
    try:
        if cfg.dev_policy == "dev-from-target-labels":
            labelled = target
            if args.target_labels:
                labelled = _load_manifest(args.target_labels)
            by_id = {r.id: r.label for r in labelled.records}
            recs = [replace(r, label=by_id.get(r.id)) for r in target.records]
            dev, _ = split_dev(Manifest(recs), cfg.dev_fraction, args.split_seed)
            pos = {r.id: i for i, r in enumerate(target.records)}
            idx = [pos[r.id] for r in dev.records]
            return sx, sy, tx[idx], dev.labels
        if args.holdout:
            hold = _load_manifest(args.holdout)
            return sx, sy, load_feature_stack(hold, Path(args.holdout).parent), hold.labels
        dev, rest = split_dev(source, cfg.dev_fraction, args.split_seed)
        pos = {r.id: i for i, r in enumerate(source.records)}
        d_idx = [pos[r.id] for r in dev.records]
        r_idx = [pos[r.id] for r in rest.records]
        return sx[r_idx], sy[r_idx], sx[d_idx], dev.labels
    except StratificationError as exc:
        raise InputError(f"cannot build dev set: {exc}") from None


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if not args.source or not args.target:
        raise InputError("--source and --target are required (directly or via --config)")
    run_dir = Path(args.run_dir)
    _prepare_dir(run_dir, args.force)
    source = _load_manifest(args.source)
    target = _load_manifest(args.target)
    mcfg = replace(ModelConfig(), dropout_rate=cfg.dropout, grl_beta=cfg.grl_beta)
    snapshot = {"train": cfg.to_dict(), "model": asdict(mcfg),
                "inputs": {k: getattr(args, k) for k in _INPUT_FLAGS}}
    (run_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")

    sx = load_feature_stack(source, Path(args.source).parent)
    tx = load_feature_stack(target, Path(args.target).parent)
    sx, sy, dx, dy = _dev_split(args, cfg, source, sx, target, tx)
    metrics_path = run_dir / "metrics.csv"
    rows = []

    def on_epoch(m):
        rows.append(m)
        write_metrics_csv(metrics_path, rows)

    try:
        result = train(sx, sy, tx, dx, dy, cfg, mcfg, on_epoch=on_epoch)
    except NumericalAbort as exc:
        (run_dir / "abort.txt").write_text(str(exc) + "\n")
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(run_dir / "best.ckpt", result.model_config, result.best_params)
    save_checkpoint(run_dir / "final.ckpt", result.model_config, result.final_params)
    write_metrics_csv(metrics_path, result.metrics)
    if not args.no_plots:
        plot_training_curves(result.metrics, run_dir / "curves.png")
    print(f"best dev UAR {result.best_dev_uar:.4f} at epoch {result.best_epoch}; "
          f"{len(result.metrics)} epochs; artifacts in {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    try:
        mcfg, params = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise InputError(str(exc)) from None
    m = _load_manifest(args.manifest)
    if any(r.label is None for r in m.records):
        raise InputError("every record of the evaluation manifest needs a label")
    x = load_feature_stack(m, Path(args.manifest).parent)
    try:
        uar = evaluate_uar(predict_emotion(x, params, mcfg), m.labels, range(mcfg.n_emotions))
    except MetricError as exc:
        raise InputError(str(exc)) from None
    print(f"UAR {uar:.6f}")
    if args.pca_out:
        recs, reps = list(m.records), [represent(x, params, mcfg)]
        for extra in args.pca_with or []:
            em = _load_manifest(extra)
            recs += em.records
            reps.append(represent(load_feature_stack(em, Path(extra).parent), params, mcfg))
        pca = pca_project(np.vstack(reps), 2)
        domains = [r.domain for r in recs]
        labels = [r.label for r in recs]
        write_pca_csv(args.pca_out, [r.id for r in recs], pca.coords, domains, labels)
        plot_pca(pca.coords, domains, labels, Path(args.pca_out).with_suffix(".png"), pca.explained_variance)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    suite = ops_suite(args.tolerance) if args.scope == "ops" else model_suite(args.tolerance)
    failed = 0
    for r in suite:
        ok = r.report.passed
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {r.name:32s} max rel error {r.report.max_rel_error:.3e}")
    print(f"{len(suite) - failed}/{len(suite)} checks below tolerance {args.tolerance:g}")
    return EXIT_OK if failed == 0 else EXIT_CHECK


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    spec = _spec_from_args(args)
    cfg = replace(TrainConfig(epochs=args.epochs), dev_policy=args.dev_policy).validate()
    out = Path(args.out_dir)
    _prepare_dir(out, args.force)
    data = prepare_synthetic(synthesize_domains(spec), cfg.dev_policy, cfg.dev_fraction)
    runs = []
    if args.kind in ("adaptation", "all"):
        runs += [("baseline", baseline_config(cfg)), ("dann", cfg)]
    if args.kind in ("bn", "all"):
        runs += [(f"dann-{s}", replace(cfg, bn_strategy=s)) for s in BN_STRATEGIES]
    summaries = []
    with open(out / "per_seed.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["config", "seed", "target_uar", "source_uar", "best_epoch", "failure"])
        for name, c in runs:
            s = run_multi_seed(data, c, args.seeds, name)
            summaries.append(s)
            for o in s.outcomes:
                w.writerow([name, o.seed, repr(o.target_uar), repr(o.source_uar), o.best_epoch, o.failure or ""])
            first = next((o for o in s.outcomes if o.result is not None), None)
            if first is None:
                continue
            r = first.result
            write_metrics_csv(out / f"metrics_{name}_seed{first.seed}.csv", r.metrics)
            pca, domains = pca_of_domains(data.source_x, data.eval_x, r.best_params, r.model_config)
            labels = list(data.source_y) + list(data.eval_y)
            ids = [f"src{i:05d}" for i in range(len(data.source_x))] + [f"tgt{i:05d}" for i in data.eval_idx]
            write_pca_csv(out / f"pca_{name}_seed{first.seed}.csv", ids, pca.coords, domains, labels)
            if not args.no_plots:
                plot_training_curves(r.metrics, out / f"curves_{name}_seed{first.seed}.png")
                plot_pca(pca.coords, domains, labels, out / f"pca_{name}_seed{first.seed}.png",
                         pca.explained_variance)
    write_report(out / "report.csv", summaries)
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=2) + "\n")
    for s in summaries:
        flag = f"  failed seeds {s.failed_seeds}" if s.failed_seeds else ""
        print(f"{s.name:10s} target {format_mean_std(s.target_uars)}  source {format_mean_std(s.source_uars)}{flag}")
    return EXIT_CHECK if any(s.failed_seeds for s in summaries) else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec-file", help="JSON object of SynthSpec fields")
    for f in fields(SynthSpec):
        kind = int if f.type in ("int", int) else float
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dann", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="WAV manifest -> normalized LMF1 features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--stats-out", help="compute corpus statistics and write them here")
    g.add_argument("--stats-in", help="apply statistics from a previous extraction")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", help="write a synthetic two-domain corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    _add_spec_flags(p)
    p.set_defaults(func=cmd_synth)

    d = TrainConfig()
    p = sub.add_parser("train", help="train baseline or DANN into a run directory")
    p.add_argument("--config", help="replay a run's config.json; explicit flags still override")
    p.add_argument("--source", help="labelled source manifest of LMF1 features")
    p.add_argument("--target", help="target manifest (labels unused for training)")
    p.add_argument("--target-labels", help="manifest holding target labels for the dev split")
    p.add_argument("--holdout", help="labelled source hold-out used as dev set by dev-from-source-holdout")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--dev-policy", choices=DEV_POLICIES, default=d.dev_policy)
    p.add_argument("--dev-fraction", type=float, default=d.dev_fraction)
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--beta", type=float, default=d.grl_beta)
    p.add_argument("--bn", choices=BN_STRATEGIES, default=d.bn_strategy)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr_init)
    p.add_argument("--lr-decay", type=float, default=d.lr_decay)
    p.add_argument("--lr-floor", type=float, default=d.lr_floor)
    p.add_argument("--dropout", type=float, default=d.dropout)
    p.add_argument("--reg", choices=REG_KINDS, default=d.reg_kind)
    p.add_argument("--reg-weight", type=float, default=d.reg_weight)
    p.add_argument("--patience", type=int, default=d.early_stop_patience)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=d.optimizer)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="UAR of a checkpoint on a labelled manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pca-out", help="write utterance_id,pc1,pc2,domain,label CSV (+ PNG scatter)")
    p.add_argument("--pca-with", action="append", help="extra manifest included in the PCA only")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=("ops", "model"), default="ops")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="multi-seed synthetic experiments -> CSV tables and figures")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--kind", choices=("adaptation", "bn", "all"), default="adaptation")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--dev-policy", choices=DEV_POLICIES, default=d.dev_policy)
    _add_spec_flags(p)
    p.set_defaults(func=cmd_report)
    parser.commands = sub.choices
    return parser


_CONFIG_TO_FLAG = {f: a for a, f in _TRAIN_FLAGS.items()}


def _config_defaults(path: str) -> dict:
    try:
        snap = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    out = {_CONFIG_TO_FLAG[k]: v for k, v in snap.get("train", {}).items() if k in _CONFIG_TO_FLAG}
    out.update({k: v for k, v in snap.get("inputs", {}).items() if k in _INPUT_FLAGS})
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train" and args.config:
            # config values become defaults, so flags given explicitly still win
            parser.commands["train"].set_defaults(**_config_defaults(args.config))
            args = parser.parse_args(argv)
        if args.command == "report" and len(args.seeds) < 2:
            raise InputError("--seeds needs at least 2 values")
        return args.func(args)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
