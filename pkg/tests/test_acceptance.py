"""Acceptance criteria, one test each, with a printed PASS/FAIL line.

Criteria 6 and 7 train on the default synthetic corpus and dominate the
runtime (several minutes together).
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from dann import autodiff as ad
from dann import features as ft
from dann import experiment as ex
from dann.cli import main
from dann.data import SynthSpec, synthesize_domains
from dann.gradcheck import SMALL_MODEL, grl_relative_error, model_suite, ops_suite, update_rule_errors
from dann.model import ModelConfig, encode, encode_flat, forward_language, init_model
from dann.training import TrainConfig, evaluate_uar, lr_at_epoch


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return report


def test_criterion_01_gradcheck(verdict, capsys):
    t0 = time.perf_counter()
    codes = [main(["gradcheck", "--scope", scope, "--tolerance", "1e-5"]) for scope in ("ops", "model")]
    elapsed = time.perf_counter() - t0
    capsys.readouterr()
    worst = max(r.report.max_rel_error for r in ops_suite(1e-5) + model_suite(1e-5))
    verdict(1, codes == [0, 0] and worst < 1e-5 and elapsed < 120,
            f"exit codes {codes}, max rel error {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_grl(verdict):
    p = init_model(SMALL_MODEL, 0)
    x = np.random.default_rng(0).normal(size=(4, SMALL_MODEL.input_frames, SMALL_MODEL.input_dims))
    f = encode(x, p, SMALL_MODEL, "eval")
    plain = ad.dense(f, p.language["lang_w"], p.language["lang_b"]).data.tobytes()
    identity = all(forward_language(f, p, b).data.tobytes() == plain for b in (0.0, 0.5, 1.0, 2.0))
    errors = {b: grl_relative_error(b) for b in (0.0, 0.5, 1.0, 2.0)}
    verdict(2, identity and max(errors.values()) < 1e-12,
            f"forward bit-exact {identity}, max gradient rel error {max(errors.values()):.2e}")


def test_criterion_03_update_rule(verdict):
    worst = max(max(update_rule_errors(a, b).values()) for a, b in [(0.75, 1.0), (0.5, 2.0), (0.9, 0.3)])
    verdict(3, worst < 1e-10, f"max rel error {worst:.2e}")


def _simulate(frames, kernel, stride, pool, pool_stride, filters):
    conv = sum(1 for t in range(0, frames, stride) if t + kernel <= frames)
    pooled = sum(1 for t in range(0, conv, pool_stride) if t + pool <= conv)
    return conv, pooled, (pooled + 1) * filters


def test_criterion_04_shapes(verdict):
    cfg = ModelConfig()
    _, tr = encode_flat(np.zeros((1, 750, 26)), init_model(cfg, 0), cfg, "eval", trace=True)
    chain = (tr.conv.shape[1:], tr.pooled.shape[1:], cfg.flatten_dim)
    ok = chain == ((247, 200), (8, 200), 1800)
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(150):
        frames = int(rng.integers(8, 200))
        kernel = int(rng.integers(1, frames + 1))
        stride = int(rng.integers(1, 6))
        conv_len = (frames - kernel) // stride + 1
        c = ModelConfig(n_filters=int(rng.integers(1, 300)), kernel=kernel, conv_stride=stride,
                        pool_size=int(rng.integers(1, conv_len + 1)), pool_stride=int(rng.integers(1, 40)),
                        input_frames=frames, input_dims=3, dropout_rate=0.0)
        got = (c.conv_out_len, c.pool_out_len, c.flatten_dim)
        mismatches += got != _simulate(frames, kernel, stride, c.pool_size, c.pool_stride, c.n_filters)
    verdict(4, ok and mismatches == 0, f"default chain {chain}, simulator mismatches {mismatches}/150")


def test_criterion_05_lr_schedule(verdict):
    cfg = TrainConfig()
    ok = (lr_at_epoch(cfg, 0) == 1e-3 and abs(lr_at_epoch(cfg, 1) - 9.3e-4) < 1e-15
          and lr_at_epoch(cfg, 41) > 5e-5 and all(lr_at_epoch(cfg, e) == 5e-5 for e in range(42, 300)))
    verdict(5, ok, f"lr(0)={lr_at_epoch(cfg, 0):g} lr(1)={lr_at_epoch(cfg, 1):g} "
                   f"lr(41)={lr_at_epoch(cfg, 41):.3e} lr(42)={lr_at_epoch(cfg, 42):g}")


@pytest.fixture(scope="module")
def adaptation():
    t0 = time.perf_counter()
    comp = ex.compare_adaptation()
    return comp, time.perf_counter() - t0


def test_criterion_06_adaptation(verdict, adaptation):
    comp, elapsed = adaptation
    ok = comp.gap >= 0.03 and comp.shift >= 0.05 and elapsed < 600 and not (
        comp.baseline.failed_seeds or comp.dann.failed_seeds)
    verdict(6, ok, f"baseline {ex.format_mean_std(comp.baseline.target_uars)} "
                   f"dann {ex.format_mean_std(comp.dann.target_uars)} target UAR, gap {100 * comp.gap:.2f} pts, "
                   f"source-target shift {100 * comp.shift:.2f} pts, {elapsed:.0f}s")


def test_criterion_07_bn_strategies(verdict, adaptation, capsys):
    comp, _ = adaptation
    cfg = TrainConfig()
    data = ex.prepare_synthetic(synthesize_domains(SynthSpec()), cfg.dev_policy, cfg.dev_fraction)
    # the default configuration is BN1, so the DANN runs above are reused
    runs = {"BN1": comp.dann}
    for s in ("BN2", "BN3", "BN4"):
        runs[s] = ex.run_multi_seed(data, replace(cfg, bn_strategy=s), range(5), s)
    means = {s: r.target_mean_std()[0] for s, r in runs.items()}
    finite = all(np.isfinite(r.target_uars).all() and len(r.target_uars) == 5 for r in runs.values())
    diff = abs(means["BN1"] - means["BN2"])
    with capsys.disabled():
        print("\n  " + ", ".join(f"{s} {ex.format_mean_std(r.target_uars)}" for s, r in runs.items())
              + f"; BN1 > BN4: {means['BN1'] > means['BN4']} (informative)")
    verdict(7, finite and diff < 0.02, f"all finite {finite}, |BN1 - BN2| = {100 * diff:.2f} pts")


def _confusion_uar(pred, labels):
    classes = sorted(set(labels))
    recalls = []
    for c in classes:
        hits = sum(1 for p, y in zip(pred, labels) if y == c and p == c)
        recalls.append(hits / sum(1 for y in labels if y == c))
    return sum(recalls) / len(recalls)


def test_criterion_08_uar_oracle(verdict):
    rng = np.random.default_rng(1)
    wrong = 0
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(k, 80))
        labels = np.r_[np.arange(k), rng.integers(0, k, n - k)]
        pred = rng.integers(0, k, n)
        wrong += evaluate_uar(pred, labels) != _confusion_uar(pred.tolist(), labels.tolist())
    verdict(8, wrong == 0, f"{1000 - wrong}/1000 pairs match the confusion-matrix oracle exactly")


def test_criterion_09_features(verdict):
    bank = ft.mel_filterbank(16000, 512)
    t = np.arange(8000) / 16000
    tones_ok = sum(
        bool(np.all(ft.extract_logmel(ft.Waveform(0.5 * np.sin(2 * np.pi * f * t), 16000)).argmax(1) == j))
        for j, f in enumerate(bank.centers_hz))
    x2 = np.array([[1.0] + [5.0] * 25, [3.0] + [-2.0] * 25])
    padded = ft.pad_or_truncate(x2)
    pad_ok = (padded.values.shape == (750, 26) and np.all(padded.values[2:, 0] == 1.0)
              and np.all(padded.values[2:, 1:] == -2.0))
    long = np.arange(900 * 26, dtype=float).reshape(900, 26)
    trunc_ok = np.array_equal(ft.pad_or_truncate(long).values, long[75:825])
    x750 = np.random.default_rng(0).normal(size=(750, 26))
    ident_ok = np.array_equal(ft.pad_or_truncate(x750).values, x750)
    verdict(9, tones_ok == 26 and pad_ok and trunc_ok and ident_ok,
            f"tones peaking in their band {tones_ok}/26, padding {pad_ok}, truncation {trunc_ok}, "
            f"identity {ident_ok}")


def test_criterion_10_determinism(verdict, tmp_path, capsys):
    corpus = tmp_path / "corpus"
    assert main(["synth", "--out-dir", str(corpus), "--n-per-domain", "24", "--n-source-holdout", "4"]) == 0
    args = ["--source", str(corpus / "source.csv"), "--target", str(corpus / "target.csv"),
            "--target-labels", str(corpus / "target_labels.csv"), "--batch-size", "16", "--epochs", "3",
            "--seed", "11", "--no-plots"]
    codes = [main(["train", "--run-dir", str(tmp_path / run), *args]) for run in ("a", "b")]
    capsys.readouterr()
    a, b = ((tmp_path / run / "metrics.csv").read_bytes() for run in ("a", "b"))
    ckpt = (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    verdict(10, codes == [0, 0] and a == b and ckpt,
            f"exit codes {codes}, metrics.csv identical {a == b}, final checkpoints identical {ckpt}")
