import numpy as np
import pytest

from dann import autodiff as ad
from dann.gradcheck import SMALL_MODEL, model_builder, model_suite, ops_suite


def test_small_model_shape():
    assert (SMALL_MODEL.conv_out_len, SMALL_MODEL.pool_out_len, SMALL_MODEL.flatten_dim) == (19, 6, 35)


def test_ops_suite_passes():
    results = ops_suite(1e-5)
    names = {r.name for r in results}
    assert {"conv1d", "maxpool1d", "dense", "attention_pool", "batch_norm", "grad_reverse",
            "softmax_cross_entropy", "dropout"} <= names
    for r in results:
        assert r.report.passed, (r.name, r.report.max_rel_error)


def test_model_suite_passes_and_includes_grl_path():
    results = model_suite(1e-5)
    assert any(r.name.startswith("grl_path") for r in results)
    assert {f"model[{s}]" for s in ("BN1", "BN2", "BN3", "BN4")} <= {r.name for r in results}
    for r in results:
        assert r.report.passed, (r.name, r.report.max_rel_error)


def test_zero_tolerance_never_passes():
    assert not any(r.report.passed for r in ops_suite(0.0))


def test_reversal_breaks_plain_finite_differences():
    # differencing the true loss cannot reproduce the reversed encoder gradient
    build, surrogate, params = model_builder("BN1")
    plain = ad.grad_check(build, params.encoder.values())
    assert not plain.passed
    assert ad.grad_check(build, params.encoder.values(), objective=surrogate).passed


def test_surrogate_equals_loss_when_beta_zero_alpha_one():
    build, surrogate, _ = model_builder("BN1", beta=0.0, alpha=1.0)
    assert float(build().data) == pytest.approx(float(surrogate().data), abs=0)
