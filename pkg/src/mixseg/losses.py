"""Loss terms for training one segmenter from three annotation streams.

Pixel-supervised samples pay binary cross-entropy plus Dice.  Box
samples pay a projection loss: prediction and rasterized box are
collapsed to per-axis max profiles, so only the extent of the predicted
region matters, not its shape inside the rectangle.  Scribble samples
pay labeled-pixel cross-entropy plus a minimum-entropy commitment on
the unlabeled majority.  A linear-regularization term ties predictions
on blended images to the matching blend of individual predictions.

All losses are pure functions of Tensors and differentiable through
the autodiff core; masks and annotations enter as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BoxAnnotation, ScribbleAnnotation
from .tensor import (
    Tensor,
    ShapeMismatchError,
    absolute,
    add,
    axis_max,
    div,
    minimum,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    safe_log,
    sub,
)

__all__ = [
    "loss_bce",
    "loss_dice",
    "project_pair",
    "loss_sp",
    "loss_bme",
    "loss_scribble",
    "linear_fuse",
    "loss_lr",
    "loss_total",
    "LossBreakdown",
    "FusionSpec",
]


def _as_const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(op, a.shape, b.shape)


def _bce_map(y: Tensor, m: Tensor) -> Tensor:
    """Per-pixel -[m log y + (1-m) log(1-y)] with clamped logs."""
    one_minus_y = add(neg(y), 1.0)
    one_minus_m = add(neg(m), 1.0)
    return neg(
        add(mul(safe_log(y), m), mul(safe_log(one_minus_y), one_minus_m))
    )


def loss_bce(y: Tensor, m, normalize: str = "sum") -> Tensor:
    """Binary cross-entropy between probabilities y and targets m.

    normalize="sum" is the raw summed form; "mean" divides by the pixel
    count (used for the pixel-supervised term so scales stay comparable
    across image sizes).
    """
    mt = _as_const(m, y)
    _check_shapes("loss_bce", y, mt)
    per = _bce_map(y, mt)
    if normalize == "sum":
        return reduce_sum(per)
    if normalize == "mean":
        return reduce_mean(per)
    raise ValueError(f"normalize must be 'sum' or 'mean', got {normalize!r}")


def loss_dice(y: Tensor, m) -> Tensor:
    """Soft Dice loss 1 - 2*sum(m*y)/sum(m+y), in [0, 1].

    When both maps are identically zero the strict ratio is 0/0; +1
    smoothing on numerator and denominator then defines the loss as 0
    without disturbing any nonempty case.
    """
    mt = _as_const(m, y)
    _check_shapes("loss_dice", y, mt)
    num = mul(reduce_sum(mul(y, mt)), 2.0)
    den = reduce_sum(add(y, mt))
    if float(den.data) == 0.0:
        num = add(num, 1.0)
        den = add(den, 1.0)
    return add(neg(div(num, den)), 1.0)


def project_pair(y: Tensor, box: BoxAnnotation):
    """Per-axis max profiles of the prediction next to the box indicators.

    Returns (y_w, y_h, m_w, m_h): y_w/m_w are 1 x W column profiles,
    y_h/m_h are H x 1 row profiles; m profiles are 1 on the box span.
    """
    h, w = y.shape
    box.validate(w, h)
    y_w = axis_max(y, "rows")
    y_h = axis_max(y, "cols")
    m_w = np.zeros((1, w), dtype=y.data.dtype)
    m_w[0, box.x0 : box.x1 + 1] = 1.0
    m_h = np.zeros((h, 1), dtype=y.data.dtype)
    m_h[box.y0 : box.y1 + 1, 0] = 1.0
    return y_w, y_h, Tensor(m_w), Tensor(m_h)


def loss_sp(y: Tensor, box: BoxAnnotation, bce_normalize: str = "sum") -> Tensor:
    """Subspace-projection supervision for a box-annotated sample.

    Half the summed BCE plus half the Dice over the two projection
    pairs; depends on the prediction only through its per-axis maxima.
    """
    y_w, y_h, m_w, m_h = project_pair(y, box)
    bce = add(
        loss_bce(y_w, m_w, normalize=bce_normalize),
        loss_bce(y_h, m_h, normalize=bce_normalize),
    )
    dice = add(loss_dice(y_w, m_w), loss_dice(y_h, m_h))
    return add(mul(bce, 0.5), mul(dice, 0.5))


def loss_bme(y: Tensor) -> Tensor:
    """Per-pixel min(-log y, -log(1-y)): cheapest confident commitment.

    Peaks at ln 2 for y=0.5 and falls toward either end; the gradient
    follows the selected branch (the -log y branch on the exact tie).
    """
    return minimum(neg(safe_log(y)), neg(safe_log(add(neg(y), 1.0))))


def loss_scribble(y: Tensor, s: ScribbleAnnotation) -> Tensor:
    """Scribble supervision: BCE on the labeled set S, minimum-entropy on
    the unlabeled set U, normalized by the full pixel count |U|+|S|."""
    codes = s.codes
    if y.shape != codes.shape:
        raise ShapeMismatchError("loss_scribble", y.shape, codes.shape)
    labeled = s.labeled
    if not labeled.any():
        raise ValueError("scribble annotation has an empty labeled set")
    dtype = y.data.dtype
    s_mask = Tensor(labeled.astype(dtype))
    u_mask = Tensor((~labeled).astype(dtype))
    labels = Tensor(s.labels.astype(dtype))
    bme_sum = reduce_sum(mul(loss_bme(y), u_mask))
    bce_sum = reduce_sum(mul(_bce_map(y, labels), s_mask))
    return div(add(bme_sum, bce_sum), float(codes.size))


def linear_fuse(a: Tensor, b: Tensor, lam: float) -> Tensor:
    """Convex combination lam*a + (1-lam)*b, elementwise."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"fusion weight must be in [0, 1], got {lam}")
    _check_shapes("linear_fuse", a, b)
    return add(mul(a, lam), mul(b, 1.0 - lam))


def loss_lr(y_ph: Tensor, m_ph) -> Tensor:
    """Mean absolute deviation between the hybrid prediction and its
    pseudo-label.  The pseudo-label must already be detached; a live
    gradient there would let the target chase itself."""
    mt = _as_const(m_ph, y_ph)
    _check_shapes("loss_lr", y_ph, mt)
    if mt.requires_grad:
        raise ValueError("loss_lr pseudo-label must be detached from the graph")
    return reduce_mean(absolute(sub(y_ph, mt)))


@dataclass(frozen=True)
class FusionSpec:
    """How the fusion weight is chosen each step."""

    lam: float = 0.5
    mode: str = "fixed"
    low: float = 0.3
    high: float = 0.7

    def __post_init__(self):
        if self.mode not in ("fixed", "uniform"):
            raise ValueError(f"fusion mode must be fixed or uniform, got {self.mode!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"fusion weight must be in [0, 1], got {self.lam}")
        if not 0.0 <= self.low <= self.high <= 1.0:
            raise ValueError(f"bad fusion range [{self.low}, {self.high}]")

    def draw(self, rng) -> float:
        if self.mode == "fixed":
            return self.lam
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class LossBreakdown:
    """Per-iteration bookkeeping; disabled components are recorded as 0."""

    l_pixel: float
    l_sp: float
    l_scribble: float
    l_lr: float
    l_total: float

    CSV_HEADER = "iteration,l_pixel,l_sp,l_scribble,l_lr,l_total"

    def csv_row(self, iteration: int) -> str:
        return ",".join(
            [
                str(iteration),
                repr(self.l_pixel),
                repr(self.l_sp),
                repr(self.l_scribble),
                repr(self.l_lr),
                repr(self.l_total),
            ]
        )


_PART_TOGGLE = {"l_sp": "sp", "l_scribble": "bme", "l_lr": "lr"}


def loss_total(parts, toggles) -> tuple[Tensor, LossBreakdown]:
    """Unweighted sum of the enabled loss parts.

    parts maps l_pixel (required) and optionally l_sp, l_scribble, l_lr
    to scalar Tensors; toggles holds the sp/bme/lr switches.  Returns
    the differentiable total plus a float-64 breakdown whose l_total is
    exactly the sum of the recorded components, independent of the
    tensor dtype used for backprop.
    """
    if "l_pixel" not in parts:
        raise ValueError("loss_total requires an l_pixel part")
    total = parts["l_pixel"]
    recorded = {"l_pixel": float(parts["l_pixel"].data)}
    for key in ("l_sp", "l_scribble", "l_lr"):
        if toggles.get(_PART_TOGGLE[key], False):
            if key not in parts or parts[key] is None:
                raise ValueError(f"toggle for {key} is on but the part is missing")
            total = add(total, parts[key])
            recorded[key] = float(parts[key].data)
        else:
            recorded[key] = 0.0
    recorded["l_total"] = (
        recorded["l_pixel"]
        + recorded["l_sp"]
        + recorded["l_scribble"]
        + recorded["l_lr"]
    )
    return total, LossBreakdown(**recorded)
