"""Minimal define-by-run reverse-mode differentiation.

Only the operators needed by the conv/attention/BN encoder and its two dense
heads are provided.  Every op accepts an optional leading batch axis where
that makes sense (``conv1d``, ``maxpool1d``, ``attention_pool``) so a whole
mini-batch goes through one numpy call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


class DimensionError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class LabelError(ValueError):
    pass


class Tensor:
    """A value in the computation graph.

    ``grad`` is allocated (zeros, same shape as ``data``) when a backward
    pass starts from a node that depends on this one.
    """

    __slots__ = ("data", "grad", "op", "parents", "requires_grad", "_backward")

    def __init__(self, data, parents: Sequence["Tensor"] = (), op: str = "leaf",
                 requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = None

    def _topo(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = self._topo()
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = np.array(grad, dtype=np.float64).reshape(self.data.shape)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def release(self) -> None:
        """Drop the graph below this node (intermediate grads and closures).

        Backward closures reference their own output, so without this the
        buffers of a finished step linger until the cyclic collector runs.
        Leaves keep their ``grad``.
        """
        stack = [self]
        while stack:
            node = stack.pop()
            if node._backward is None and not node.parents:
                continue
            stack.extend(node.parents)
            node._backward = None
            node.parents = ()
            node.grad = None


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    return Tensor(data, parents, op)


# ---------------------------------------------------------------------------
# elementwise / structural helpers


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data + b.data, (a, b), "add")

    def backward():
        _accum(a, out.grad)
        _accum(b, out.grad)

    out._backward = backward
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _result(a.data * c, (a,), "scale")

    def backward():
        _accum(a, out.grad * c)

    out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = _result(np.where(mask, x.data, 0.0), (x,), "relu")

    def backward():
        _accum(x, out.grad * mask)

    out._backward = backward
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _result(x.data.reshape(shape), (x,), "reshape")

    def backward():
        _accum(x, out.grad.reshape(x.shape))

    out._backward = backward
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = _result(np.concatenate([p.data for p in parts], axis=axis), parts, "concat")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward():
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, out.grad[tuple(idx)])

    out._backward = backward
    return out


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[start:stop]`` along the first axis."""
    out = _result(x.data[start:stop], (x,), "rows")

    def backward():
        if x.requires_grad:
            x.grad[start:stop] += out.grad

    out._backward = backward
    return out


def abs_sum(x: Tensor) -> Tensor:
    out = _result(np.abs(x.data).sum(), (x,), "abs_sum")

    def backward():
        _accum(x, out.grad * np.sign(x.data))

    out._backward = backward
    return out


def square_sum(x: Tensor) -> Tensor:
    out = _result((x.data * x.data).sum(), (x,), "square_sum")

    def backward():
        _accum(x, out.grad * 2.0 * x.data)

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# layers


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid 1-D convolution (cross-correlation) over time.

    ``x`` is ``T x D`` or ``N x T x D``; ``kernels`` is ``F x K x D``.
    Returns ``T' x F`` (or ``N x T' x F``) with ``T' = (T - K) // stride + 1``.
    """
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or kernels.data.ndim != 3:
        raise DimensionError("conv1d expects input (N x) T x D and kernels F x K x D")
    n, t, d = xd.shape
    f, k, kd = kernels.shape
    if kd != d:
        raise DimensionError(f"kernel depth {kd} does not match input channels {d}")
    if bias.shape != (f,):
        raise DimensionError(f"bias shape {bias.shape} does not match {f} filters")
    if t < k:
        raise DimensionError(f"input length {t} shorter than kernel {k}")
    t_out = (t - k) // stride + 1
    # windows: N x T' x D x K -> N x T' x K x D
    win = sliding_window_view(xd, k, axis=1)[:, : (t_out - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(n * t_out, k * d)
    wmat = kernels.data.reshape(f, k * d)
    y = (cols @ wmat.T + bias.data).reshape(n, t_out, f)
    out = _result(y[0] if squeeze else y, (x, kernels, bias), "conv1d")

    def backward():
        g = out.grad.reshape(n * t_out, f)
        if kernels.requires_grad:
            kernels.grad += (g.T @ cols).reshape(f, k, d)
        if bias.requires_grad:
            bias.grad += g.sum(axis=0)
        if x.requires_grad:
            gcols = (g @ wmat).reshape(n, t_out, k, d)
            gx = np.zeros_like(xd)
            stop = (t_out - 1) * stride + 1
            for j in range(k):
                gx[:, j : j + stop : stride] += gcols[:, :, j]
            x.grad += gx[0] if squeeze else gx

    out._backward = backward
    return out


def maxpool1d(x: Tensor, size: int, stride: int) -> Tensor:
    """Valid max pooling over time; gradient goes to the first argmax."""
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    n, t, f = xd.shape
    if size < 1 or stride < 1:
        raise DimensionError("pool size and stride must be positive")
    if size > t:
        raise DimensionError(f"pool size {size} larger than input length {t}")
    t_out = (t - size) // stride + 1
    win = sliding_window_view(xd, size, axis=1)[:, : (t_out - 1) * stride + 1 : stride]
    # win: N x T'' x F x size; np.argmax returns the lowest index on ties
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    out = _result(y[0] if squeeze else y, (x,), "maxpool1d")

    def backward():
        if not x.requires_grad:
            return
        g = out.grad[None] if squeeze else out.grad
        gx = np.zeros_like(xd)
        pos = arg + (np.arange(t_out) * stride)[None, :, None]
        ni = np.arange(n)[:, None, None]
        fi = np.arange(f)[None, None, :]
        np.add.at(gx, (np.broadcast_to(ni, pos.shape), pos, np.broadcast_to(fi, pos.shape)), g)
        x.grad += gx[0] if squeeze else gx

    out._backward = backward
    return out


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise DimensionError("dense expects N x I input and I x O weights")
    if x.shape[1] != weights.shape[0]:
        raise DimensionError(f"input width {x.shape[1]} != weight rows {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match {weights.shape[1]} outputs")
    out = _result(x.data @ weights.data + bias.data, (x, weights, bias), "dense")

    def backward():
        g = out.grad
        _accum(x, g @ weights.data.T)
        _accum(weights, x.data.T @ g)
        _accum(bias, g.sum(axis=0))

    out._backward = backward
    return out


def attention_pool(feats: Tensor, query: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax attention with a single global query vector.

    ``feats`` is ``T x F`` or ``N x T x F``.  Returns ``(weights, pooled)``;
    the weights tensor is a plain value (no gradient path).
    """
    squeeze = feats.data.ndim == 2
    fd = feats.data[None] if squeeze else feats.data
    if fd.ndim != 3 or fd.shape[1] < 1:
        raise DimensionError("attention_pool expects (N x) T x F with T >= 1")
    if query.shape != (fd.shape[2],):
        raise DimensionError(f"query shape {query.shape} does not match feature width {fd.shape[2]}")
    scores = fd @ query.data
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    w = e / e.sum(axis=1, keepdims=True)
    pooled = np.einsum("nt,ntf->nf", w, fd)
    out = _result(pooled[0] if squeeze else pooled, (feats, query), "attention_pool")

    def backward():
        g = out.grad[None] if squeeze else out.grad
        dw = np.einsum("nf,ntf->nt", g, fd)
        ds = w * (dw - (w * dw).sum(axis=1, keepdims=True))
        if feats.requires_grad:
            gf = w[..., None] * g[:, None, :] + ds[..., None] * query.data
            feats.grad += gf[0] if squeeze else gf
        if query.requires_grad:
            query.grad += np.einsum("nt,ntf->f", ds, fd)

    out._backward = backward
    weights = Tensor(w[0] if squeeze else w, op="attention_weights")
    return weights, out


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, width: int) -> "RunningStats":
        return cls(np.zeros(width), np.ones(width))

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.mean = self.momentum * self.mean + (1.0 - self.momentum) * mean
        self.var = self.momentum * self.var + (1.0 - self.momentum) * var


def batch_norm(x: Tensor, gamma: Tensor, shift: Tensor, stats_source: Tensor | None = None,
               mode: str = "train", running: RunningStats | None = None,
               update_running: bool = True, eps: float = BN_EPS) -> Tensor:
    """Normalize ``x`` (N x F) with statistics taken from ``stats_source``.

    ``stats_source`` defaults to ``x`` itself.  In eval mode the running
    statistics are used and ``stats_source`` is ignored.  Variance is the
    population (biased) variance.
    """
    if x.data.ndim != 2:
        raise DimensionError("batch_norm expects N x F input")
    if mode == "eval":
        if running is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        inv = 1.0 / np.sqrt(running.var + eps)
        xhat = (x.data - running.mean) * inv
        out = _result(gamma.data * xhat + shift.data, (x, gamma, shift), "batch_norm")

        def backward_eval():
            g = out.grad
            _accum(x, g * gamma.data * inv)
            _accum(gamma, (g * xhat).sum(axis=0))
            _accum(shift, g.sum(axis=0))

        out._backward = backward_eval
        return out
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")

    src = x if stats_source is None else stats_source
    m = src.shape[0]
    if m < 2:
        raise DegenerateBatchError(f"batch_norm needs at least 2 rows of statistics, got {m}")
    if src.shape[1] != x.shape[1]:
        raise DimensionError("stats_source width does not match input width")
    mu = src.data.mean(axis=0)
    centered_src = src.data - mu
    var = (centered_src * centered_src).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xc = x.data - mu
    xhat = xc * inv
    if running is not None and update_running:
        running.update(mu, var)
    parents = (x, gamma, shift) if src is x else (x, gamma, shift, src)
    out = _result(gamma.data * xhat + shift.data, parents, "batch_norm")

    def backward():
        g = out.grad
        gxhat = g * gamma.data
        _accum(gamma, (g * xhat).sum(axis=0))
        _accum(shift, g.sum(axis=0))
        _accum(x, gxhat * inv)
        if src.requires_grad:
            dmu = -(gxhat * inv).sum(axis=0)
            dvar = -0.5 * (gxhat * xc).sum(axis=0) * inv**3
            src.grad += dmu / m + dvar * 2.0 * centered_src / m

    out._backward = backward
    return out


@dataclass
class GrlConfig:
    beta: float = 1.0

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError(f"GRL beta must be >= 0, got {self.beta}")


def grad_reverse(x: Tensor, cfg: GrlConfig | float) -> Tensor:
    """Identity forward; upstream gradient multiplied by ``-beta`` backward."""
    beta = cfg.beta if isinstance(cfg, GrlConfig) else GrlConfig(float(cfg)).beta
    out = _result(x.data.copy(), (x,), "grad_reverse")

    def backward():
        _accum(x, -beta * out.grad)

    out._backward = backward
    return out


def softmax_cross_entropy(logits: Tensor, onehot) -> Tensor:
    """Mean over rows of ``-y . log softmax(logits)``."""
    y = np.asarray(onehot, dtype=np.float64)
    if logits.data.ndim != 2 or y.shape != logits.shape:
        raise DimensionError(f"logits {logits.shape} and one-hot {y.shape} must both be N x C")
    if y.shape[1] < 2:
        raise LabelError("need at least two classes")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise LabelError("each one-hot row must contain exactly one 1")
    n = y.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -(y * logp).sum() / n
    out = _result(np.array(loss), (logits,), "softmax_cross_entropy")

    def backward():
        _accum(logits, out.grad * (np.exp(logp) - y) / n)

    out._backward = backward
    return out


def dropout(x: Tensor, rate: float, mode: str = "train", rng: np.random.Generator | None = None,
            mask: np.ndarray | None = None) -> Tensor:
    """Inverted dropout; a fixed ``mask`` (1 = keep) overrides ``rng``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng or a mask")
        mask = rng.random(x.shape) >= rate
    keep = np.asarray(mask, dtype=np.float64) / (1.0 - rate)
    out = _result(x.data * keep, (x,), "dropout")

    def backward():
        _accum(x, out.grad * keep)

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(build: Callable[[], Tensor], params: Iterable[Tensor], tolerance: float = 1e-5,
               step: float = 1e-6, floor: float = 1e-4,
               objective: Callable[[], Tensor] | None = None) -> GradCheckReport:
    """Compare analytic gradients against central differences, entry by entry.

    The per-entry error is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps entries whose true gradient is ~0 from reporting pure round-off.
    ``objective`` (default ``build``) is the function differenced
    numerically -- graphs containing a gradient reversal need the
    surrogate whose true gradient the reversal implements.
    """
    params = list(params)
    objective = objective or build
    loss = build()
    if loss.data.size != 1:
        raise ValueError("grad_check needs a scalar loss")
    for p in params:
        p.zero_grad()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    per_param = []
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(objective().data)
            flat[i] = orig - step
            down = float(objective().data)
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
        per_param.append(worst)
    return GradCheckReport(max(per_param, default=0.0), tolerance, per_param)
