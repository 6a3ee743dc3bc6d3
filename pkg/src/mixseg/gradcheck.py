"""Finite-difference verification of every differentiable op and loss.

``grad_check`` compares the reverse-mode gradient of a scalar-valued
function against central differences, coordinate by coordinate, in
64-bit precision.  ``CASES`` registers one named check per op and per
loss; ``run_suite`` executes them over several seeds and reports the
worst relative error per case.

A deliberate-corruption hook (``corrupt_op``) biases the recorded
gradient of one named op so the suite's failure path can be exercised
as a negative control.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import tensor as T
from .data import BoxAnnotation, ScribbleAnnotation, UNLABELED, BG_SCRIBBLE, FG_SCRIBBLE
from .tensor import Tensor, no_grad

__all__ = ["grad_check", "run_suite", "corrupt_op", "CASES", "CheckResult"]

DEFAULT_H = 1e-6
PASS_THRESHOLD = 1e-4


def grad_check(f, x, h: float = DEFAULT_H, sample: int | None = None, rng=None) -> float:
    """Max relative error between the autodiff and numeric gradient of f at x.

    f maps one Tensor to a scalar Tensor.  Relative error per coordinate
    is |a - n| / max(1e-8, |a| + |n|).  ``sample`` restricts the check
    to that many randomly chosen coordinates (all, when omitted).
    """
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    out = f(xt)
    val = out.item()
    if not np.isfinite(val):
        raise ValueError(f"grad_check: function value is not finite ({val})")
    out.backward()
    analytic = (
        xt.grad.reshape(-1).copy()
        if xt.grad is not None
        else np.zeros(xt.data.size)
    )

    coords = np.arange(xt.data.size)
    if sample is not None and sample < coords.size:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = gen.choice(coords.size, size=sample, replace=False)
    flat = xt.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(xt).item()
            flat[i] = orig - h
            fm = f(xt).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
            worst = max(worst, err)
    return worst


@contextmanager
def corrupt_op(name: str, bias: float = 1e-2):
    """Add a constant bias to the recorded gradient of one op (test hook)."""
    targets = [m for m in (T, L) if callable(getattr(m, name, None))]
    if not targets:
        raise ValueError(f"corrupt_op: no op named {name!r}")
    orig = getattr(targets[0], name)

    def wrapped(*args, **kwargs):
        out = orig(*args, **kwargs)
        if isinstance(out, Tensor) and out._vjps:
            patched = []
            for vjp in out._vjps:
                if vjp is None:
                    patched.append(None)
                    continue
                def biased(g, acc, vjp=vjp):
                    vjp(g, acc)
                    acc += bias
                patched.append(biased)
            out._vjps = tuple(patched)
        return out

    for m in targets:
        setattr(m, name, wrapped)
    try:
        yield
    finally:
        for m in targets:
            setattr(m, name, orig)


# --------------------------------------------------------------------------
# Case registry.  Each case maps an rng to (f, x0): a scalar function of one
# tensor and a starting point nudged away from any non-smooth point (ties in
# min/max, zero in abs, the 0.5 crossing in the entropy branch).

def _weights(rng, shape):
    # Fixed non-uniform weights expose transposed or misrouted gradients
    # that a plain sum would hide.
    return Tensor(rng.uniform(0.5, 1.5, size=shape))


def _wsum(t: Tensor, w: Tensor) -> Tensor:
    return T.reduce_sum(T.mul(t, w))


def _distinct_map(rng, h, w, lo=0.1, hi=0.9, margin=1e-4):
    """A map whose per-row and per-column maxima are unique by a margin."""
    while True:
        y = rng.uniform(lo, hi, size=(h, w))
        sc = np.sort(y, axis=0)
        sr = np.sort(y, axis=1)
        if np.all(sc[-1, :] - sc[-2, :] >= margin) and np.all(
            sr[:, -1] - sr[:, -2] >= margin
        ):
            return y


def _away_from(y, point, margin):
    """Push values off a non-smooth point by at least margin."""
    y = y.copy()
    close = np.abs(y - point) < margin
    y[close] = point + margin * np.where(y[close] >= point, 1.0, -1.0)
    return y


def _case_add(rng):
    b = Tensor(rng.normal(size=(4, 4)))
    w = _weights(rng, (4, 4))
    return lambda x: _wsum(T.add(x, b), w), rng.normal(size=(4, 4))


def _case_sub(rng):
    b = Tensor(rng.normal(size=(4, 4)))
    w = _weights(rng, (4, 4))
    return lambda x: _wsum(T.sub(b, T.sub(x, 0.3)), w), rng.normal(size=(4, 4))


def _case_mul(rng):
    b = Tensor(rng.normal(size=(4, 4)))
    w = _weights(rng, (4, 4))
    return lambda x: _wsum(T.mul(T.mul(x, b), 1.7), w), rng.normal(size=(4, 4))


def _case_div(rng):
    b = Tensor(rng.uniform(0.5, 2.0, size=(4, 4)))
    w = _weights(rng, (4, 4))
    x0 = rng.uniform(0.5, 2.0, size=(4, 4))
    return lambda x: _wsum(T.div(b, T.div(x, 2.0)), w), x0


def _case_min(rng):
    b = rng.normal(size=(5, 5))
    x0 = _away_from(rng.normal(size=(5, 5)), 0.0, 1e-3) + b  # keep |x-b| > 1e-3
    bt = Tensor(b)
    w = _weights(rng, (5, 5))
    return lambda x: _wsum(T.minimum(x, bt), w), x0


def _case_neg(rng):
    w = _weights(rng, (3, 6))
    return lambda x: _wsum(T.neg(x), w), rng.normal(size=(3, 6))


def _case_abs(rng):
    x0 = _away_from(rng.normal(size=(4, 4)), 0.0, 1e-3)
    w = _weights(rng, (4, 4))
    return lambda x: _wsum(T.absolute(x), w), x0


def _case_relu(rng):
    x0 = _away_from(rng.normal(size=(4, 4)), 0.0, 1e-3)
    w = _weights(rng, (4, 4))
    return lambda x: _wsum(T.relu(x), w), x0


def _case_sigmoid(rng):
    w = _weights(rng, (4, 4))
    return lambda x: _wsum(T.sigmoid(x), w), rng.normal(scale=2.0, size=(4, 4))


def _case_safe_log(rng):
    # Stay above eps so the clamp is inactive and the function smooth.
    x0 = rng.uniform(1e-3, 2.0, size=(4, 4))
    w = _weights(rng, (4, 4))
    return lambda x: _wsum(T.safe_log(x), w), x0


def _case_axis_max_rows(rng):
    x0 = _distinct_map(rng, 6, 5)
    w = _weights(rng, (1, 5))
    return lambda x: _wsum(T.axis_max(x, "rows"), w), x0


def _case_axis_max_cols(rng):
    x0 = _distinct_map(rng, 5, 6)
    w = _weights(rng, (5, 1))
    return lambda x: _wsum(T.axis_max(x, "cols"), w), x0


def _case_reduce_sum(rng):
    return lambda x: T.reduce(x, "sum"), rng.normal(size=(7,))


def _case_reduce_mean(rng):
    return lambda x: T.reduce(x, "mean"), rng.normal(size=(2, 6))


def _case_conv2d_s1(rng):
    w = Tensor(rng.normal(scale=0.5, size=(3, 2, 3, 3)))
    ws = _weights(rng, (3, 6, 6))
    return lambda x: _wsum(T.conv2d(x, w, stride=1, pad=1), ws), rng.normal(
        size=(2, 6, 6)
    )


def _case_conv2d_s2(rng):
    w = Tensor(rng.normal(scale=0.5, size=(2, 3, 3, 3)))
    ws = _weights(rng, (2, 3, 3))
    return lambda x: _wsum(T.conv2d(x, w, stride=2, pad=1), ws), rng.normal(
        size=(3, 6, 6)
    )


def _case_conv2d_w(rng):
    x = Tensor(rng.normal(size=(4, 2, 5, 5)))
    ws = _weights(rng, (4, 3, 5, 5))
    return lambda w: _wsum(T.conv2d(x, w, stride=1, pad=1), ws), rng.normal(
        scale=0.5, size=(3, 2, 3, 3)
    )


def _case_conv2d_bias(rng):
    x = Tensor(rng.normal(size=(2, 4, 4)))
    w = Tensor(rng.normal(scale=0.5, size=(3, 2, 1, 1)))
    ws = _weights(rng, (3, 4, 4))
    return lambda b: _wsum(T.conv2d(x, w, bias=b, stride=1, pad=0), ws), rng.normal(
        size=(3,)
    )


def _case_upsample(rng):
    ws = _weights(rng, (2, 7, 8))
    return lambda x: _wsum(T.upsample_bilinear(x, 7, 8), ws), rng.normal(size=(2, 3, 4))


def _case_stack_index(rng):
    b = Tensor(rng.normal(size=(3, 3)))
    w = _weights(rng, (3, 3))
    def f(x):
        s = T.stack([x, b, T.mul(x, 2.0)])
        return _wsum(T.add(T.index0(s, 0), T.index0(s, 2)), w)
    return f, rng.normal(size=(3, 3))


def _case_reshape(rng):
    w = _weights(rng, (2, 8))
    return lambda x: _wsum(T.reshape(x, (2, 8)), w), rng.normal(size=(4, 4))


def _probs(rng, shape, lo=0.05, hi=0.95):
    return rng.uniform(lo, hi, size=shape)


def _case_loss_bce_sum(rng):
    m = Tensor((rng.random(size=(4, 4)) > 0.5).astype(float))
    return lambda y: L.loss_bce(y, m, normalize="sum"), _probs(rng, (4, 4))


def _case_loss_bce_mean(rng):
    m = Tensor((rng.random(size=(4, 4)) > 0.5).astype(float))
    return lambda y: L.loss_bce(y, m, normalize="mean"), _probs(rng, (4, 4))


def _case_loss_dice(rng):
    m = (rng.random(size=(5, 5)) > 0.5).astype(float)
    m.reshape(-1)[0] = 1.0
    mt = Tensor(m)
    return lambda y: L.loss_dice(y, mt), _probs(rng, (5, 5))


def _random_box(rng, h, w):
    x0, x1 = sorted(rng.integers(0, w, size=2).tolist())
    y0, y1 = sorted(rng.integers(0, h, size=2).tolist())
    return BoxAnnotation(x0, y0, x1, y1)


def _case_loss_sp(rng):
    h, w = 6, 6
    box = _random_box(rng, h, w)
    y0 = _distinct_map(rng, h, w, lo=0.05, hi=0.95)
    return lambda y: L.loss_sp(y, box), y0


def _case_loss_bme(rng):
    y0 = _away_from(_probs(rng, (4, 4)), 0.5, 1e-3)
    w = _weights(rng, (4, 4))
    return lambda y: _wsum(L.loss_bme(y), w), y0


def _scribble_grid(rng, h, w):
    codes = np.full((h, w), UNLABELED, dtype=np.uint8)
    n = h * w
    idx = rng.permutation(n)[: max(2, n // 6)]
    for j, i in enumerate(idx):
        codes.reshape(-1)[i] = FG_SCRIBBLE if j % 2 == 0 else BG_SCRIBBLE
    return ScribbleAnnotation(codes)


def _case_loss_scribble(rng):
    h, w = 5, 5
    s = _scribble_grid(rng, h, w)
    y0 = _away_from(_probs(rng, (h, w)), 0.5, 1e-3)
    return lambda y: L.loss_scribble(y, s), y0


def _case_loss_lr(rng):
    m = Tensor(_probs(rng, (4, 4)))
    y0 = _probs(rng, (4, 4))
    d = np.abs(y0 - m.data) < 1e-3
    y0[d] += 2e-3
    return lambda y: L.loss_lr(y, m), y0


def _case_loss_total(rng):
    h, w = 6, 6
    m = (rng.random(size=(h, w)) > 0.5).astype(float)
    m.reshape(-1)[0] = 1.0
    mt = Tensor(m)
    box = _random_box(rng, h, w)
    scrib = _scribble_grid(rng, h, w)
    m_ph = Tensor(_probs(rng, (h, w)))
    while True:
        y0 = _distinct_map(rng, h, w, lo=0.05, hi=0.95)
        if np.all(np.abs(y0 - 0.5) > 1e-3) and np.all(np.abs(y0 - m_ph.data) > 1e-3):
            break

    def f(y):
        l_pixel = T.add(L.loss_bce(y, mt, normalize="mean"), L.loss_dice(y, mt))
        parts = {
            "l_pixel": l_pixel,
            "l_sp": L.loss_sp(y, box),
            "l_scribble": L.loss_scribble(y, scrib),
            "l_lr": L.loss_lr(y, m_ph),
        }
        total, _ = L.loss_total(parts, {"sp": True, "bme": True, "lr": True})
        return total

    return f, y0


CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "div": _case_div,
    "min": _case_min,
    "neg": _case_neg,
    "abs": _case_abs,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "safe_log": _case_safe_log,
    "axis_max_rows": _case_axis_max_rows,
    "axis_max_cols": _case_axis_max_cols,
    "reduce_sum": _case_reduce_sum,
    "reduce_mean": _case_reduce_mean,
    "conv2d_stride1": _case_conv2d_s1,
    "conv2d_stride2": _case_conv2d_s2,
    "conv2d_weights": _case_conv2d_w,
    "conv2d_bias": _case_conv2d_bias,
    "upsample_bilinear": _case_upsample,
    "stack_index0": _case_stack_index,
    "reshape": _case_reshape,
    "loss_bce_sum": _case_loss_bce_sum,
    "loss_bce_mean": _case_loss_bce_mean,
    "loss_dice": _case_loss_dice,
    "loss_sp": _case_loss_sp,
    "loss_bme": _case_loss_bme,
    "loss_scribble": _case_loss_scribble,
    "loss_lr": _case_loss_lr,
    "loss_total": _case_loss_total,
}


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool


def run_suite(seeds=(0, 1, 2, 3, 4), h: float = DEFAULT_H) -> list[CheckResult]:
    """Run every registered case over the seeds; worst error per case."""
    results = []
    for name, builder in CASES.items():
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            f, x0 = builder(rng)
            worst = max(worst, grad_check(f, x0, h=h))
        results.append(CheckResult(name, worst, worst <= PASS_THRESHOLD))
    return results
