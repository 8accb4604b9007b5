import csv
import json

import numpy as np
import pytest

from dann import features as ft
from dann.cli import main
from dann.data import load_manifest, save_manifest, Manifest, UtteranceRecord
from dann.training import read_metrics_csv


def synth(out, *flags):
    return main(["synth", "--out-dir", str(out), "--n-per-domain", "16", "--n-source-holdout", "4", *flags])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert synth(out) == 0
    return out


def train_args(corpus, run_dir, *extra):
    return ["train", "--source", str(corpus / "source.csv"), "--target", str(corpus / "target.csv"),
            "--target-labels", str(corpus / "target_labels.csv"), "--run-dir", str(run_dir), "--batch-size", "16",
            *extra]


# ---------------------------------------------------------------------------
# synth


def test_synth_outputs(corpus):
    assert len(load_manifest(corpus / "source.csv")) == 16
    target = load_manifest(corpus / "target.csv")
    assert len(target) == 16 and all(r.label is None for r in target.records)
    labelled = load_manifest(corpus / "target_labels.csv")
    assert all(r.label in (0, 1) for r in labelled.records)
    files = sorted(p.name for p in (corpus / "features").iterdir())
    assert sum(f.startswith(("src", "tgt")) for f in files) == 32
    assert sum(f.startswith("hold") for f in files) == 4
    assert ft.read_features(corpus / "features" / "src00000.lmf").values.shape == (750, 26)
    assert json.loads((corpus / "spec.json").read_text())["n_per_domain"] == 16


def test_synth_is_bit_identical(tmp_path, corpus):
    assert synth(tmp_path / "again") == 0
    for p in (corpus / "features").iterdir():
        assert (tmp_path / "again" / "features" / p.name).read_bytes() == p.read_bytes()


def test_synth_zero_shift_band_means(tmp_path):
    out = tmp_path / "s0"
    assert main(["synth", "--out-dir", str(out), "--n-per-domain", "200", "--n-source-holdout", "0",
                 "--frames", "40", "--bands", "8", "--shift-scale", "0"]) == 0
    means = {}
    for dom, prefix in (("source", "src"), ("target", "tgt")):
        stats = ft.read_stats(out / f"{dom}.lms")
        # undo the per-corpus normalization, then average each utterance over time
        raw = [ft.read_features(p).values * stats.std + stats.mean
               for p in sorted((out / "features").glob(f"{prefix}*.lmf"))]
        means[dom] = np.array([r.mean(axis=0) for r in raw])
    ms, mt = means["source"], means["target"]
    se = np.sqrt(ms.var(axis=0, ddof=1) / len(ms) + mt.var(axis=0, ddof=1) / len(mt))
    assert np.all(np.abs(ms.mean(axis=0) - mt.mean(axis=0)) < 3 * se)


def test_synth_invalid_spec(tmp_path, capsys):
    assert main(["synth", "--out-dir", str(tmp_path / "x"), "--n-per-domain", "1"]) == 2
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"warp": 3}))
    assert main(["synth", "--out-dir", str(tmp_path / "y"), "--spec-file", str(spec)]) == 2
    assert "warp" in capsys.readouterr().err


def test_synth_refuses_overwrite(corpus):
    assert synth(corpus) == 2


# ---------------------------------------------------------------------------
# extract


@pytest.fixture
def wav_corpus(tmp_path):
    bank = ft.mel_filterbank(16000, 512)
    recs = []
    for i, band in enumerate([3, 8, 14, 20]):
        t = np.arange(int(16000 * (0.4 + 0.3 * i))) / 16000
        ft.write_wav(tmp_path / f"u{i}.wav", ft.Waveform(0.4 * np.sin(2 * np.pi * bank.centers_hz[band] * t), 16000))
        recs.append(UtteranceRecord(f"u{i}", f"u{i}.wav", "source", None, i % 2))
    save_manifest(tmp_path / "wavs.csv", Manifest(recs))
    return tmp_path


def test_extract_and_reapply_stats(wav_corpus):
    out = wav_corpus / "feats"
    stats = wav_corpus / "stats.lms"
    assert main(["extract", "--manifest", str(wav_corpus / "wavs.csv"), "--out-dir", str(out),
                 "--stats-out", str(stats)]) == 0
    assert len(list(out.glob("*.lmf"))) == 4 and stats.exists()
    m = load_manifest(out / "manifest.csv")
    assert [r.path for r in m.records] == [f"u{i}.lmf" for i in range(4)]
    again = wav_corpus / "again"
    assert main(["extract", "--manifest", str(wav_corpus / "wavs.csv"), "--out-dir", str(again),
                 "--stats-in", str(stats)]) == 0
    mats = [ft.read_features(p) for p in sorted(again.glob("*.lmf"))]
    valid = np.vstack([x.values[: x.n_valid_frames] for x in mats])
    np.testing.assert_allclose(valid.mean(axis=0), 0, atol=1e-9)


def test_extract_missing_audio(wav_corpus, capsys):
    (wav_corpus / "u2.wav").unlink()
    code = main(["extract", "--manifest", str(wav_corpus / "wavs.csv"), "--out-dir", str(wav_corpus / "f"),
                 "--stats-out", str(wav_corpus / "s.lms")])
    assert code == 2
    assert "u2" in capsys.readouterr().err


def test_extract_bad_manifest(tmp_path):
    (tmp_path / "m.csv").write_text("not,a,manifest\n")
    assert main(["extract", "--manifest", str(tmp_path / "m.csv"), "--out-dir", str(tmp_path / "f"),
                 "--stats-out", str(tmp_path / "s.lms")]) == 2


def test_bad_thread_env(wav_corpus, monkeypatch):
    monkeypatch.setenv("DANN_NUM_THREADS", "lots")
    assert main(["extract", "--manifest", str(wav_corpus / "wavs.csv"), "--out-dir", str(wav_corpus / "f"),
                 "--stats-out", str(wav_corpus / "s.lms")]) == 2


# ---------------------------------------------------------------------------
# train / eval


@pytest.fixture(scope="module")
def run(corpus, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("runs") / "r1"
    assert main(train_args(corpus, run_dir, "--epochs", "3")) == 0
    return run_dir


def test_train_artifacts(run):
    for name in ("config.json", "metrics.csv", "best.ckpt", "final.ckpt", "curves.png"):
        assert (run / name).exists(), name
    rows = read_metrics_csv(run / "metrics.csv")
    assert len(rows) == 3
    snap = json.loads((run / "config.json").read_text())
    assert snap["train"]["alpha"] == 0.75 and snap["train"]["dev_policy"] == "dev-from-target-labels"


def test_train_defaults_metrics_property(corpus, tmp_path):
    assert main(train_args(corpus, tmp_path / "d", "--no-plots")) == 0
    rows = read_metrics_csv(tmp_path / "d" / "metrics.csv")
    assert 1 <= len(rows) <= 50
    lrs = [r.lr for r in rows]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_train_replay_and_overwrite(corpus, run, tmp_path):
    assert main(train_args(corpus, run, "--epochs", "3")) == 2
    assert main(["train", "--config", str(run / "config.json"), "--run-dir", str(tmp_path / "replay"),
                 "--no-plots"]) == 0
    assert (tmp_path / "replay" / "metrics.csv").read_bytes() == (run / "metrics.csv").read_bytes()
    # explicit flags override the replayed config
    assert main(["train", "--config", str(run / "config.json"), "--run-dir", str(tmp_path / "other"),
                 "--no-plots", "--epochs", "1"]) == 0
    assert len(read_metrics_csv(tmp_path / "other" / "metrics.csv")) == 1


def test_train_odd_batch_rejected(corpus, tmp_path):
    assert main(train_args(corpus, tmp_path / "odd", "--bn", "BN1", "--batch-size", "31")) == 2
    assert not (tmp_path / "odd").exists()


def test_train_baseline_mode(corpus, tmp_path):
    assert main(train_args(corpus, tmp_path / "b", "--alpha", "1.0", "--beta", "0.0", "--epochs", "2",
                           "--no-plots")) == 0


def test_train_source_holdout_dev(corpus, tmp_path):
    assert main(train_args(corpus, tmp_path / "h", "--dev-policy", "dev-from-source-holdout",
                           "--holdout", str(corpus / "holdout.csv"), "--epochs", "1", "--no-plots")) == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_abort(corpus, tmp_path, capsys):
    bad = tmp_path / "bad"
    bad.mkdir()
    m = load_manifest(corpus / "source.csv")
    recs = []
    for r in m.records:
        mat = ft.read_features(corpus / r.path)
        mat.values[10, 3] = np.nan
        ft.write_features(bad / f"{r.id}.lmf", mat)
        recs.append(UtteranceRecord(r.id, f"{r.id}.lmf", "source", None, r.label))
    save_manifest(bad / "source.csv", Manifest(recs))
    args = train_args(corpus, tmp_path / "nan", "--epochs", "2")
    args[args.index("--source") + 1] = str(bad / "source.csv")
    assert main(args) == 3
    assert "non-finite" in capsys.readouterr().err
    assert (tmp_path / "nan" / "config.json").exists() and (tmp_path / "nan" / "abort.txt").exists()


def test_eval_twice_and_pca(corpus, run, tmp_path, capsys):
    args = ["eval", "--checkpoint", str(run / "best.ckpt"), "--manifest", str(corpus / "target_labels.csv")]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first and first.startswith("UAR ")
    pca = tmp_path / "pca.csv"
    assert main(args + ["--pca-out", str(pca), "--pca-with", str(corpus / "source.csv")]) == 0
    rows = list(csv.reader(pca.open()))
    assert rows[0] == ["utterance_id", "pc1", "pc2", "domain", "label"]
    assert len(rows) == 33 and all(len(r) == 5 for r in rows)
    assert {r[3] for r in rows[1:]} == {"source", "target"}
    assert pca.with_suffix(".png").exists()


def test_eval_needs_every_class(corpus, run, tmp_path):
    m = load_manifest(corpus / "target_labels.csv")
    save_manifest(tmp_path / "ones.csv", Manifest([r for r in m.records if r.label == 1]))
    assert main(["eval", "--checkpoint", str(run / "best.ckpt"), "--manifest", str(tmp_path / "ones.csv")]) == 2
    assert main(["eval", "--checkpoint", str(run / "best.ckpt"), "--manifest", str(corpus / "target.csv")]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"),
                 "--manifest", str(corpus / "target_labels.csv")]) == 2


def test_eval_separable_set_scores_one(tmp_path, capsys):
    out = tmp_path / "easy"
    assert main(["synth", "--out-dir", str(out), "--n-per-domain", "32", "--n-source-holdout", "0",
                 "--class-separation", "40", "--noise", "0.1", "--shift-scale", "0"]) == 0
    assert main(train_args(out, tmp_path / "r", "--epochs", "4", "--no-plots")) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "best.ckpt"),
                 "--manifest", str(out / "target_labels.csv")]) == 0
    assert capsys.readouterr().out.strip() == "UAR 1.000000"


# ---------------------------------------------------------------------------
# gradcheck / report


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--scope", "ops", "--tolerance", "1e-5"]) == 0
    assert main(["gradcheck", "--scope", "ops", "--tolerance", "0"]) == 1
    assert "FAIL" in capsys.readouterr().out
    assert main(["gradcheck", "--scope", "model"]) == 0
    assert "grl_path" in capsys.readouterr().out


def test_report_writes_tables_and_figures(tmp_path, capsys):
    out = tmp_path / "rep"
    assert main(["report", "--out-dir", str(out), "--seeds", "0", "1", "--epochs", "1",
                 "--n-per-domain", "16", "--n-source-holdout", "4"]) == 0
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[1] == "config,target_uar,source_uar,seeds,failed_seeds"
    assert [row.split(",")[0] for row in lines[2:]] == ["baseline", "dann"]
    for name in ("per_seed.csv", "curves_dann_seed0.png", "pca_dann_seed0.png", "pca_dann_seed0.csv",
                 "metrics_baseline_seed0.csv"):
        assert (out / name).exists(), name
    assert "dann" in capsys.readouterr().out


def test_report_needs_two_seeds(tmp_path):
    assert main(["report", "--out-dir", str(tmp_path / "r"), "--seeds", "0"]) == 2


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2
