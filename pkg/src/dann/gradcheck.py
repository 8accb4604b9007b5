"""Finite-difference gradient-check suites for every op and for a small
instance of the full model (both heads, GRL path included)."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .model import ModelConfig, encode_flat, forward_emotion, forward_language, init_model
from .training import TrainConfig, bn_apply, onehot, total_loss

# small member of the architecture family: 40x4 input -> conv 19x5 -> pool 6x5 -> 7x5 -> 35
SMALL_MODEL = ModelConfig(n_filters=5, kernel=4, conv_stride=2, pool_size=3, pool_stride=3,
                          dropout_rate=0.3, grl_beta=0.7, input_frames=40, input_dims=4)


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport


def _weighted(t: Tensor, w: np.ndarray) -> Tensor:
    flat = ad.reshape(t, (1, t.data.size))
    return ad.reshape(ad.dense(flat, ad.constant(w.reshape(-1, 1)), ad.constant(np.zeros(1))), ())


def ops_suite(tolerance: float = 1e-5, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)

    def p(*shape):
        return ad.parameter(rng.normal(size=shape))

    out = []

    def check(name, build, params, objective=None):
        out.append(CheckResult(name, grad_check(build, params, tolerance, objective=objective)))

    x, w, b = p(2, 13, 3), p(4, 3, 3), p(4)
    wt = rng.normal(size=(2, 6, 4))
    check("conv1d", lambda: _weighted(ad.conv1d(x, w, b, 2), wt), [x, w, b])

    # well-separated values so no window sits within a finite-difference step of a tie
    xp = ad.parameter(rng.permutation(2 * 12 * 3).reshape(2, 12, 3) * 0.1)
    wt = rng.normal(size=(2, 4, 3))
    check("maxpool1d", lambda: _weighted(ad.maxpool1d(xp, 3, 3), wt), [xp])

    xr = ad.parameter(rng.normal(size=(4, 5)) + np.sign(rng.normal(size=(4, 5))) * 0.1)
    wt = rng.normal(size=(4, 5))
    check("relu", lambda: _weighted(ad.relu(xr), wt), [xr])

    xd, wd, bd = p(4, 3), p(3, 5), p(5)
    wt = rng.normal(size=(4, 5))
    check("dense", lambda: _weighted(ad.dense(xd, wd, bd), wt), [xd, wd, bd])

    fa, q = p(3, 6, 4), p(4)
    wt = rng.normal(size=(3, 4))
    check("attention_pool", lambda: _weighted(ad.attention_pool(fa, q)[1], wt), [fa, q])

    xb, g, s, src = p(5, 3), p(3), p(3), p(8, 3)
    wt = rng.normal(size=(5, 3))
    check("batch_norm", lambda: _weighted(ad.batch_norm(xb, g, s), wt), [xb, g, s])
    check("batch_norm_external_stats", lambda: _weighted(ad.batch_norm(xb, g, s, src), wt), [xb, g, s, src])
    running = ad.RunningStats(rng.normal(size=3), rng.uniform(0.5, 2, 3))
    check("batch_norm_eval", lambda: _weighted(ad.batch_norm(xb, g, s, mode="eval", running=running), wt),
          [xb, g, s])

    xg = p(4, 3)
    wt = rng.normal(size=(4, 3))
    # the reversal's backward is -beta times the derivative of its (identity) forward
    check("grad_reverse", lambda: _weighted(ad.grad_reverse(xg, 0.6), wt), [xg],
          objective=lambda: ad.scale(_weighted(xg, wt), -0.6))

    logits = p(5, 3)
    y = onehot(rng.integers(0, 3, 5), 3)
    check("softmax_cross_entropy", lambda: ad.softmax_cross_entropy(logits, y), [logits])

    xo = p(4, 6)
    mask = rng.random((4, 6)) >= 0.4
    wt = rng.normal(size=(4, 6))
    check("dropout", lambda: _weighted(ad.dropout(xo, 0.4, "train", mask=mask), wt), [xo])

    wa, wl = p(3, 4), p(5)
    check("regularizers", lambda: ad.add(ad.abs_sum(wa), ad.square_sum(wl)), [wa, wl])
    return out


def model_builder(strategy: str = "BN1", beta: float = 0.7, alpha: float = 0.75, seed: int = 0,
                  mcfg: ModelConfig = SMALL_MODEL, n_half: int = 3, reg_kind: str = "l2"):
    """Return (build, surrogate, model params) for a small full-model loss.

    ``build`` is the training loss with the reversal layer in place.
    ``surrogate`` drops the reversal and weights the language loss by
    ``-(1 - alpha) * beta``: its true gradient w.r.t. encoder parameters is
    what ``build().backward()`` delivers there.  Dropout uses one fixed
    mask so repeated builds are deterministic.
    """
    rng = np.random.default_rng(seed)
    mcfg = replace(mcfg, grl_beta=beta)
    params = init_model(mcfg, seed)
    for t in params.tensors():
        t.data = t.data + 0.3 * rng.normal(size=t.shape)
    cfg = TrainConfig(alpha=alpha, grl_beta=beta, bn_strategy=strategy, reg_kind=reg_kind,
                      reg_weight=5e-3, batch_size=2 * n_half, dropout=mcfg.dropout_rate)
    xs = rng.normal(size=(n_half, mcfg.input_frames, mcfg.input_dims))
    xt = rng.normal(size=(n_half, mcfg.input_frames, mcfg.input_dims)) + 0.5
    ys = onehot(rng.integers(0, 2, n_half))
    mask = rng.random((2 * n_half, mcfg.flatten_dim)) >= mcfg.dropout_rate

    def loss(reverse: bool) -> Tensor:
        flat = encode_flat(np.concatenate([xs, xt]), params, mcfg, "train", dropout_mask=mask)
        if strategy == "BN4":
            fe, _ = bn_apply(strategy, ad.rows(flat, 0, n_half), n_half, params, mcfg, "source",
                             update_running=False)
            _, fl = bn_apply(strategy, ad.rows(flat, n_half, 2 * n_half), 0, params, mcfg, "target",
                             update_running=False)
            lang_y = onehot(np.ones(n_half, dtype=int))
        else:
            fe, fl = bn_apply(strategy, flat, n_half, params, mcfg, update_running=False)
            lang_y = onehot(np.r_[np.zeros(n_half, int), np.ones(n_half, int)])
        lang = params.language
        lang_logits = (forward_language(fl, params, beta) if reverse
                       else ad.dense(fl, lang["lang_w"], lang["lang_b"]))
        total, _, ll = total_loss(forward_emotion(fe, params), ys, lang_logits, lang_y, cfg, params)
        if reverse:
            return total
        return ad.add(total, ad.scale(ll, -(1.0 - alpha) * (1.0 + beta)))

    return (lambda: loss(True)), (lambda: loss(False)), params


def model_check(name: str, build, surrogate, params, tolerance: float) -> CheckResult:
    """Encoder params against the surrogate, head params against the true loss."""
    enc = grad_check(build, params.encoder.values(), tolerance, objective=surrogate)
    heads = grad_check(build, [*params.emotion.values(), *params.language.values()], tolerance)
    per = enc.per_param + heads.per_param
    return CheckResult(name, GradCheckReport(max(per), tolerance, per))


def model_suite(tolerance: float = 1e-5) -> list[CheckResult]:
    out = []
    for strategy in ("BN1", "BN2", "BN3", "BN4"):
        out.append(model_check(f"model[{strategy}]", *model_builder(strategy), tolerance))
    out.append(model_check("model[BN1,l1]", *model_builder("BN1", reg_kind="l1", seed=1), tolerance))
    out.append(grl_path_check(tolerance))
    return out


def grl_path_check(tolerance: float = 1e-5, beta: float = 0.7) -> CheckResult:
    """Encoder gradient of the language loss vs ``-beta`` x the same gradient without reversal."""
    err = max(grl_relative_error(beta, seed) for seed in range(3))
    return CheckResult(f"grl_path[beta={beta}]", GradCheckReport(err, tolerance, [err]))


def encoder_language_grads(beta: float | None, seed: int = 0, mcfg: ModelConfig = SMALL_MODEL):
    """Gradients of the language loss w.r.t. encoder params; ``beta=None`` removes the GRL."""
    rng = np.random.default_rng(seed)
    params = init_model(mcfg, seed)
    for t in params.tensors():
        t.data = t.data + 0.3 * rng.normal(size=t.shape)
    x = rng.normal(size=(6, mcfg.input_frames, mcfg.input_dims))
    mask = rng.random((6, mcfg.flatten_dim)) >= mcfg.dropout_rate
    flat = encode_flat(x, params, mcfg, "train", dropout_mask=mask)
    _, f = bn_apply("BN1", flat, 3, params, mcfg, update_running=False)
    lang = params.language
    h = f if beta is None else ad.grad_reverse(f, beta)
    logits = ad.dense(h, lang["lang_w"], lang["lang_b"])
    loss = ad.softmax_cross_entropy(logits, onehot(np.r_[np.zeros(3, int), np.ones(3, int)]))
    for t in params.tensors():
        t.zero_grad()
    loss.backward()
    return {n: params.encoder[n].grad.copy() for n in params.encoder}, float(loss.data), logits.data.copy()


def grl_relative_error(beta: float, seed: int = 0) -> float:
    with_grl, _, _ = encoder_language_grads(beta, seed)
    plain, _, _ = encoder_language_grads(None, seed)
    worst = 0.0
    for n in plain:
        expected = -beta * plain[n]
        denom = np.maximum(np.abs(expected), 1e-300)
        diff = np.abs(with_grl[n] - expected)
        rel = np.where(expected == 0, diff, diff / denom)
        worst = max(worst, float(rel.max()))
    return worst


def update_rule_errors(alpha: float = 0.75, beta: float = 1.0, seed: int = 7, lr: float = 0.1,
                       mcfg: ModelConfig = SMALL_MODEL) -> dict[str, float]:
    """Relative error of one plain-SGD step against the three update expressions.

    Each parameter's delta is compared with ``-lr`` times
    ``alpha dLe`` (emotion head), ``(1 - alpha) dLl`` (language head) or
    ``alpha dLe - (1 - alpha) beta dLl`` (encoder), where ``dLe`` and ``dLl``
    come from two separate graphs without any reversal layer.
    """
    from .training import Batch, effective_model_config, make_optimizer, train_step

    rng = np.random.default_rng(seed)
    n = 3
    sx = rng.normal(size=(n, mcfg.input_frames, mcfg.input_dims))
    tx = rng.normal(size=(n, mcfg.input_frames, mcfg.input_dims)) + 0.3
    sy = np.array([0, 1, 1])
    cfg = TrainConfig(alpha=alpha, grl_beta=beta, optimizer="sgd", reg_kind="none", batch_size=2 * n,
                      dropout=mcfg.dropout_rate)
    mcfg = effective_model_config(mcfg, cfg)
    params = init_model(mcfg, seed)
    mask = rng.random((2 * n, mcfg.flatten_dim)) >= mcfg.dropout_rate

    grads = {}
    for which in ("emotion", "language"):
        for t in params.tensors():
            t.zero_grad()
        flat = encode_flat(np.concatenate([sx, tx]), params, mcfg, "train", dropout_mask=mask)
        fe, fl = bn_apply("BN1", flat, n, params, mcfg, update_running=False)
        if which == "emotion":
            loss = ad.softmax_cross_entropy(forward_emotion(fe, params), onehot(sy))
        else:
            lang = params.language
            loss = ad.softmax_cross_entropy(ad.dense(fl, lang["lang_w"], lang["lang_b"]),
                                            onehot(np.r_[np.zeros(n, int), np.ones(n, int)]))
        loss.backward()
        grads[which] = {k: np.zeros_like(t.data) if t.grad is None else t.grad.copy() for k, t in params.named()}

    before = {k: t.data.copy() for k, t in params.named()}
    opt = make_optimizer(cfg, params.tensors())
    train_step(params, opt, mcfg, cfg, Batch(np.arange(n), np.arange(n)), sx, sy, tx, lr, dropout_mask=mask)
    ge, gl = grads["emotion"], grads["language"]
    errors = {}
    for k, t in params.named():
        if k in params.emotion:
            expected = -lr * alpha * ge[k]
        elif k in params.language:
            expected = -lr * (1 - alpha) * gl[k]
        else:
            expected = -lr * (alpha * ge[k] - (1 - alpha) * beta * gl[k])
        scale = np.abs(expected).max()
        errors[k] = float(np.abs((t.data - before[k]) - expected).max() / scale) if scale > 0 else float("inf")
    return errors
