"""Mixed-supervision training loop, evaluation, and the ablation harness.

Each iteration consumes a batch of (pixel, box, scribble) triplets, one
sample from each supervision stream.  All images a step needs -- the
three originals plus, when the regularizer is on, the two blends of the
pixel image with the weak ones -- are stacked into a single batched
forward.  Branches whose losses are toggled off are never built, so a
disabled configuration is bit-identical to one that lacks the branch
entirely.

Determinism: every random choice flows from one seed through named
child streams (init, three stream shufflers, augmentation, fusion
weight), and all of their states serialize into checkpoints so a
restored run continues bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import Sample, augment
from .losses import (
    FusionSpec,
    LossBreakdown,
    linear_fuse,
    loss_bce,
    loss_dice,
    loss_lr,
    loss_scribble,
    loss_sp,
    loss_total,
)
from .network import (
    EncoderConfig,
    ModelParams,
    config_hash,
    forward_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tensor, add, index0, mul, no_grad, sigmoid

__all__ = [
    "TrainConfig",
    "TrainingError",
    "ConfigurationError",
    "TrainResult",
    "EvalReport",
    "SGDMomentum",
    "sgd_momentum_step",
    "train_step",
    "train",
    "evaluate",
    "predict_probs",
    "dice_iou",
    "weighted_average",
    "ablate",
    "ABLATION_ROWS",
    "parse_config_file",
    "load_train_config",
]

CHECKPOINT_DIRNAME = "checkpoint"
LOSSES_CSV = "losses.csv"
EVAL_CSV = "eval.csv"
ABLATION_CSV = "ablation.csv"
ABLATION_RUNS_CSV = "ablation_runs.csv"


class TrainingError(RuntimeError):
    """Unrecoverable problem during training (bad corpus, non-finite math)."""


class ConfigurationError(ValueError):
    """Invalid configuration or config file contents."""


@dataclass(frozen=True)
class TrainConfig:
    # Stable step size for joint from-scratch training of all four loss
    # terms: the projection loss focuses its gradient on the per-axis
    # argmax pixels and the entropy term sharpens whatever the early net
    # believes, so larger steps keep the shared trunk from ever fitting
    # the pixel stream.
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch_size: int = 4
    iterations: int = 3000
    use_sp: bool = True
    use_bme: bool = True
    use_lr: bool = True
    lambda_mode: str = "fixed"
    lambda_value: float = 0.5
    lambda_low: float = 0.3
    lambda_high: float = 0.7
    seed: int = 0
    eval_interval: int = 500
    lr_schedule: str = "constant"
    dtype: str = "float32"
    # Normalization of the projection loss's cross-entropy half.  The raw
    # summed form grows with image size and overpowers the other terms at
    # the default learning rate; the mean form keeps the four objectives
    # on comparable scales.  Both are valid readings of the formula.
    sp_bce_normalize: str = "mean"
    # Global-norm gradient clip applied before the momentum update
    # (0 disables).  Trained from scratch, the multiplicative decoder
    # produces occasional gradient spikes that the default learning rate
    # turns into divergence; clipping caps the step without touching the
    # update rule.
    grad_clip_norm: float = 2.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.iterations <= 0:
            raise ConfigurationError(f"iterations must be > 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_interval < 0:
            raise ConfigurationError("eval_interval must be >= 0 (0 disables)")
        if self.lr_schedule not in ("constant", "poly"):
            raise ConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.sp_bce_normalize not in ("sum", "mean"):
            raise ConfigurationError(
                f"sp_bce_normalize must be sum or mean, got {self.sp_bce_normalize!r}"
            )
        if self.grad_clip_norm < 0:
            raise ConfigurationError("grad_clip_norm must be >= 0 (0 disables)")
        FusionSpec(self.lambda_value, self.lambda_mode, self.lambda_low, self.lambda_high)

    @property
    def toggles(self) -> dict:
        return {"sp": self.use_sp, "bme": self.use_bme, "lr": self.use_lr}

    @property
    def fusion(self) -> FusionSpec:
        return FusionSpec(
            self.lambda_value, self.lambda_mode, self.lambda_low, self.lambda_high
        )


def parse_config_file(path) -> dict:
    """Plain ``key = value`` lines; blank lines and # comments ignored."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val
    return values


_TRUE = {"1", "true", "on", "yes"}
_FALSE = {"0", "false", "off", "no"}


def _coerce(name: str, kind, raw):
    if not isinstance(raw, str):
        return raw
    if kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigurationError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as e:
        raise ConfigurationError(f"{name}: {e}") from e


def load_train_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then file values, then explicit overrides."""
    known = {f.name: f.type for f in fields(TrainConfig)}
    types = {"learning_rate": float, "momentum": float, "batch_size": int,
             "iterations": int, "use_sp": bool, "use_bme": bool, "use_lr": bool,
             "lambda_mode": str, "lambda_value": float, "lambda_low": float,
             "lambda_high": float, "seed": int, "eval_interval": int,
             "lr_schedule": str, "dtype": str, "sp_bce_normalize": str,
             "grad_clip_norm": float}
    merged: dict = {}
    for source in (parse_config_file(path) if path else {}, overrides or {}):
        for key, val in source.items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, types[key], val)
    return TrainConfig(**merged)


def sgd_momentum_step(params: dict, grads: dict, state: dict, lr: float, momentum: float):
    """Classic momentum: v <- momentum*v + g, p <- p - lr*v.

    All three mappings are name -> array with matching shapes; returns
    (new_params, new_state) without mutating the inputs.
    """
    new_p, new_v = {}, {}
    for name, p in params.items():
        g, v = grads[name], state[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(
                f"{name}: param {p.shape}, grad {g.shape}, state {v.shape} disagree"
            )
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in tensor {name!r}")
        vn = momentum * v + g
        new_v[name] = vn
        new_p[name] = p - lr * vn
    return new_p, new_v


class SGDMomentum:
    """Stateful wrapper applying ``sgd_momentum_step`` to ModelParams."""

    def __init__(self, params: ModelParams, lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self, lr: float | None = None) -> None:
        p = {n: t.data for n, t in self.params.items()}
        g = {
            n: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for n, t in self.params.items()
        }
        new_p, self.velocity = sgd_momentum_step(
            p, g, self.velocity, self.lr if lr is None else lr, self.momentum
        )
        for n, t in self.params.items():
            t.data = new_p[n]
            t.grad = None


def _mean_over(parts: list[Tensor]) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = add(total, p)
    return mul(total, 1.0 / len(parts)) if len(parts) > 1 else total


def _check_triplet(triplet) -> None:
    kinds = tuple(s.kind for s in triplet)
    if kinds != ("pixel", "box", "scribble"):
        raise ConfigurationError(
            f"triplet must be (pixel, box, scribble) samples, got {kinds}"
        )


def train_step(
    params: ModelParams,
    triplet,
    cfg: TrainConfig,
    optimizer: SGDMomentum,
    lam: float | None = None,
    lr: float | None = None,
) -> LossBreakdown:
    """One optimizer step on a triplet or a batch of triplets.

    Performs a single batched forward over every image the enabled
    branches need, then one backward and one parameter update.  Loss
    components are averaged over the batch.
    """
    triplets = triplet if isinstance(triplet, list) else [triplet]
    for t in triplets:
        _check_triplet(t)
    if lam is None:
        lam = cfg.fusion.lam
    dtype = np.dtype(cfg.dtype)
    use_box = cfg.use_sp or cfg.use_lr
    use_scr = cfg.use_bme or cfg.use_lr

    images: list[np.ndarray] = []

    def push(arr) -> int:
        images.append(np.asarray(arr, dtype=dtype))
        return len(images) - 1

    slots = []
    for sp_, sb, ss in triplets:
        slot = {"p": push(sp_.image)}
        if use_box:
            slot["b"] = push(sb.image)
        if use_scr:
            slot["s"] = push(ss.image)
        if cfg.use_lr:
            slot["pb"] = push(lam * sp_.image + (1.0 - lam) * sb.image)
            slot["ps"] = push(lam * sp_.image + (1.0 - lam) * ss.image)
        slots.append(slot)

    probs = sigmoid(forward_batch(params, np.stack(images)))

    pixel_parts, sp_parts, scr_parts, lr_parts = [], [], [], []
    for (sp_, sb, ss), slot in zip(triplets, slots):
        y_p = index0(probs, slot["p"])
        pixel_parts.append(
            add(loss_bce(y_p, sp_.annotation, normalize="mean"),
                loss_dice(y_p, sp_.annotation))
        )
        y_b = index0(probs, slot["b"]) if use_box else None
        y_s = index0(probs, slot["s"]) if use_scr else None
        if cfg.use_sp:
            sp_parts.append(loss_sp(y_b, sb.annotation, cfg.sp_bce_normalize))
        if cfg.use_bme:
            scr_parts.append(loss_scribble(y_s, ss.annotation))
        if cfg.use_lr:
            y_pb = index0(probs, slot["pb"])
            y_ps = index0(probs, slot["ps"])
            m_pb = linear_fuse(y_p.detach(), y_b.detach(), lam)
            m_ps = linear_fuse(y_p.detach(), y_s.detach(), lam)
            lr_parts.append(
                mul(add(loss_lr(y_pb, m_pb), loss_lr(y_ps, m_ps)), 0.5)
            )

    parts = {"l_pixel": _mean_over(pixel_parts)}
    if sp_parts:
        parts["l_sp"] = _mean_over(sp_parts)
    if scr_parts:
        parts["l_scribble"] = _mean_over(scr_parts)
    if lr_parts:
        parts["l_lr"] = _mean_over(lr_parts)

    total, breakdown = loss_total(parts, cfg.toggles)
    if not np.isfinite(breakdown.l_total):
        raise TrainingError(f"non-finite total loss {breakdown.l_total}")
    params.zero_grad()
    total.backward()
    if cfg.grad_clip_norm > 0:
        _clip_grads(params, cfg.grad_clip_norm)
    optimizer.step(lr=lr)
    return breakdown


def _clip_grads(params: ModelParams, max_norm: float) -> None:
    """Scale all gradients so their joint 2-norm is at most max_norm."""
    sq = 0.0
    for _, t in params.items():
        if t.grad is not None:
            sq += float(np.sum(np.square(t.grad, dtype=np.float64)))
    norm = np.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / norm
        for _, t in params.items():
            if t.grad is not None:
                t.grad *= t.data.dtype.type(scale)


class _StreamCycler:
    """Endless reshuffled pass over one sample stream."""

    def __init__(self, samples: list[Sample], rng):
        self.samples = samples
        self.rng = rng
        self.order = rng.permutation(len(samples))
        self.pos = 0

    def next(self) -> Sample:
        if self.pos >= len(self.order):
            self.order = self.rng.permutation(len(self.samples))
            self.pos = 0
        s = self.samples[int(self.order[self.pos])]
        self.pos += 1
        return s

    def state(self) -> dict:
        return {
            "pos": self.pos,
            "order": [int(i) for i in self.order],
            "rng": self.rng.bit_generator.state,
        }

    def restore(self, state: dict) -> None:
        self.pos = state["pos"]
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.rng.bit_generator.state = state["rng"]


def _lr_at(cfg: TrainConfig, iteration: int) -> float:
    if cfg.lr_schedule == "poly":
        return cfg.learning_rate * (1.0 - (iteration - 1) / cfg.iterations) ** 0.9
    return cfg.learning_rate


def _split_streams(corpus: list[Sample]):
    streams = {"pixel": [], "box": [], "scribble": []}
    tests = []
    for s in corpus:
        if s.split == "test":
            tests.append(s)
        else:
            streams[s.kind].append(s)
    for kind, samples in streams.items():
        if not samples:
            raise TrainingError(f"corpus has no {kind}-annotated training samples")
    return streams, tests


@dataclass
class EvalReport:
    """Per-dataset Dice/IoU plus their image-count-weighted averages."""

    names: list[str]
    counts: dict[str, int]
    dice: dict[str, float]
    iou: dict[str, float]
    wavg_dice: float
    wavg_iou: float


@dataclass
class TrainResult:
    params: ModelParams
    rows: list[LossBreakdown]
    eval_rows: list[tuple[int, EvalReport]]
    out_dir: Path | None = None


def weighted_average(values, counts) -> float:
    """Image-count-weighted mean across datasets."""
    values = list(values)
    counts = list(counts)
    if len(values) != len(counts) or not values:
        raise ValueError("values and counts must be equal-length and non-empty")
    if any(c <= 0 for c in counts):
        raise ValueError(f"counts must be positive, got {counts}")
    return float(sum(v * c for v, c in zip(values, counts)) / sum(counts))


def dice_iou(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Overlap metrics between binary masks; empty-vs-empty scores 1."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(truth, dtype=bool)
    inter = int(np.logical_and(p, g).sum())
    psum, gsum = int(p.sum()), int(g.sum())
    dice = 1.0 if psum + gsum == 0 else 2.0 * inter / (psum + gsum)
    union = psum + gsum - inter
    iou = 1.0 if union == 0 else inter / union
    return dice, iou


def predict_probs(params: ModelParams, images: np.ndarray, chunk: int = 25) -> np.ndarray:
    """Sigmoid probabilities for a stack of images, forward-only."""
    out = []
    with no_grad():
        for start in range(0, len(images), chunk):
            batch = np.asarray(images[start : start + chunk])
            out.append(sigmoid(forward_batch(params, batch)).data)
    return np.concatenate(out, axis=0)


def evaluate(params: ModelParams, test_sets) -> EvalReport:
    """Thresholded-prediction Dice/IoU per dataset and weighted overall."""
    test_sets = list(test_sets)
    if not test_sets:
        raise ValueError("evaluate needs at least one test set")
    names, counts, dice, iou = [], {}, {}, {}
    for name, samples in test_sets:
        samples = list(samples)
        if not samples:
            raise ValueError(f"test set {name!r} is empty")
        probs = predict_probs(params, np.stack([s.image for s in samples]))
        d_vals, i_vals = [], []
        for s, p in zip(samples, probs):
            d, i = dice_iou(p >= 0.5, s.truth)
            d_vals.append(d)
            i_vals.append(i)
        names.append(name)
        counts[name] = len(samples)
        dice[name] = float(np.mean(d_vals))
        iou[name] = float(np.mean(i_vals))
    order = names
    return EvalReport(
        names=order,
        counts=counts,
        dice=dice,
        iou=iou,
        wavg_dice=weighted_average([dice[n] for n in order], [counts[n] for n in order]),
        wavg_iou=weighted_average([iou[n] for n in order], [counts[n] for n in order]),
    )


def _resume_hash(cfg: TrainConfig) -> str:
    """Digest of every config field that shapes the per-step math.

    iterations and eval_interval are excluded: neither changes any
    update or random draw, and excluding them is what allows resuming
    an interrupted run or extending a finished one.
    """
    d = asdict(cfg)
    d["iterations"] = 0
    d["eval_interval"] = 0
    return config_hash(d)


def _trainer_state(cfg, cyclers, aug_rng, lam_rng) -> dict:
    return {
        "train_config": asdict(cfg),
        "train_config_hash": _resume_hash(cfg),
        "streams": [c.state() for c in cyclers],
        "aug_rng": aug_rng.bit_generator.state,
        "lam_rng": lam_rng.bit_generator.state,
    }


def train(
    corpus: list[Sample],
    cfg: TrainConfig,
    out_dir=None,
    encoder_cfg: EncoderConfig | None = None,
    resume_from=None,
) -> TrainResult:
    """Run the triplet loop for cfg.iterations steps.

    Writes losses.csv, eval.csv, and a resumable checkpoint under
    out_dir when given.  With resume_from, restores parameters,
    optimizer velocity, and every random stream, then continues as if
    the original run had never stopped.
    """
    streams, tests = _split_streams(corpus)
    h, w = streams["pixel"][0].truth.shape
    for s in corpus:
        if s.truth.shape != (h, w):
            raise TrainingError(f"sample {s.id}: size {s.truth.shape} != corpus {(h, w)}")
    if encoder_cfg is None:
        encoder_cfg = EncoderConfig(height=h, width=w)

    root = np.random.SeedSequence(cfg.seed)
    init_seq, sp_seq, sb_seq, ss_seq, aug_seq, lam_seq = root.spawn(6)
    cyclers = [
        _StreamCycler(streams["pixel"], np.random.default_rng(sp_seq)),
        _StreamCycler(streams["box"], np.random.default_rng(sb_seq)),
        _StreamCycler(streams["scribble"], np.random.default_rng(ss_seq)),
    ]
    aug_rng = np.random.default_rng(aug_seq)
    lam_rng = np.random.default_rng(lam_seq)

    if resume_from is not None:
        params, start_iter, extra, extra_tensors = load_checkpoint(resume_from)
        state = extra.get("trainer")
        if state is None:
            raise TrainingError(f"{resume_from}: checkpoint has no trainer state")
        if state["train_config_hash"] != _resume_hash(cfg):
            raise TrainingError(
                f"{resume_from}: checkpoint was written by a different train config"
            )
        for cycler, cstate in zip(cyclers, state["streams"]):
            if len(cstate["order"]) != len(cycler.samples):
                raise TrainingError("resume corpus stream sizes differ from checkpoint")
            cycler.restore(cstate)
        aug_rng.bit_generator.state = state["aug_rng"]
        lam_rng.bit_generator.state = state["lam_rng"]
        optimizer = SGDMomentum(params, cfg.learning_rate, cfg.momentum)
        velocity = {}
        for name in optimizer.velocity:
            key = f"velocity.{name}"
            if key not in extra_tensors:
                raise TrainingError(f"{resume_from}: missing optimizer state for {name}")
            velocity[name] = extra_tensors[key]
        optimizer.velocity = velocity
    else:
        params = init_params(encoder_cfg, init_seq, dtype=cfg.dtype)
        start_iter = 0
        optimizer = SGDMomentum(params, cfg.learning_rate, cfg.momentum)

    fusion = cfg.fusion
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def checkpoint(iteration: int) -> None:
        if out is None:
            return
        save_checkpoint(
            out / CHECKPOINT_DIRNAME,
            params,
            iteration,
            extra_json={"trainer": _trainer_state(cfg, cyclers, aug_rng, lam_rng)},
            extra_tensors={f"velocity.{n}": v for n, v in optimizer.velocity.items()},
        )

    rows: list[LossBreakdown] = []
    eval_rows: list[tuple[int, EvalReport]] = []
    for iteration in range(start_iter + 1, cfg.iterations + 1):
        triplets = []
        for _ in range(cfg.batch_size):
            p = augment(cyclers[0].next(), aug_rng)
            b = augment(cyclers[1].next(), aug_rng)
            s = augment(cyclers[2].next(), aug_rng)
            triplets.append((p, b, s))
        lam = fusion.draw(lam_rng)
        bd = train_step(
            params, triplets, cfg, optimizer, lam=lam, lr=_lr_at(cfg, iteration)
        )
        rows.append(bd)
        if (
            cfg.eval_interval
            and iteration % cfg.eval_interval == 0
            and iteration < cfg.iterations
        ):
            if tests:
                eval_rows.append((iteration, evaluate(params, [("test", tests)])))
            checkpoint(iteration)

    if tests and cfg.eval_interval:
        eval_rows.append((cfg.iterations, evaluate(params, [("test", tests)])))
    checkpoint(cfg.iterations)

    if out is not None:
        lines = [LossBreakdown.CSV_HEADER]
        lines += [bd.csv_row(start_iter + 1 + i) for i, bd in enumerate(rows)]
        (out / LOSSES_CSV).write_text("\n".join(lines) + "\n")
        elines = ["iteration,dataset,count,dice,iou"]
        for it, rep in eval_rows:
            for name in rep.names:
                elines.append(
                    f"{it},{name},{rep.counts[name]},{repr(rep.dice[name])},{repr(rep.iou[name])}"
                )
            elines.append(f"{it},wAVG,{sum(rep.counts.values())},{repr(rep.wavg_dice)},{repr(rep.wavg_iou)}")
        (out / EVAL_CSV).write_text("\n".join(elines) + "\n")

    return TrainResult(params=params, rows=rows, eval_rows=eval_rows, out_dir=out)


# Table-2-shaped toggle matrix: (label, use_sp, use_bme, use_lr).
ABLATION_ROWS = [
    ("baseline", False, False, False),
    ("sp", True, False, False),
    ("bme", False, True, False),
    ("sp_bme", True, True, False),
    ("full", True, True, True),
]


@dataclass
class AblationRow:
    label: str
    use_sp: bool
    use_bme: bool
    use_lr: bool
    seeds: list[int]
    dices: list[float]
    ious: list[float]
    mean_dice: float = field(init=False)
    mean_iou: float = field(init=False)

    def __post_init__(self):
        self.mean_dice = float(np.mean(self.dices))
        self.mean_iou = float(np.mean(self.ious))


def _neutral_hash(cfg: TrainConfig) -> str:
    """Hash of the fields every ablation row must share: toggles and seed
    vary by design, and eval_interval never affects the training math."""
    return config_hash(
        replace(cfg, use_sp=False, use_bme=False, use_lr=False, seed=0, eval_interval=0)
    )


def ablate(
    corpus: list[Sample],
    base_cfg: TrainConfig,
    seeds=(0, 1, 2),
    out_dir=None,
    progress=None,
) -> list[AblationRow]:
    """Train the five toggle configurations over shared seeds.

    Rows differ from the base config only in the three toggles and the
    seed (enforced by hashing the config with those fields neutralized);
    evaluation happens once at the end of each run.
    """
    _, tests = _split_streams(corpus)
    if not tests:
        raise TrainingError("ablation needs a test split")
    reference = _neutral_hash(base_cfg)
    results = []
    run_lines = ["config,seed,dice,iou"]
    for label, use_sp, use_bme, use_lr in ABLATION_ROWS:
        dices, ious = [], []
        for seed in seeds:
            cfg = replace(
                base_cfg,
                use_sp=use_sp,
                use_bme=use_bme,
                use_lr=use_lr,
                seed=seed,
                eval_interval=0,
            )
            if _neutral_hash(cfg) != reference:
                raise TrainingError("ablation row drifted from the base config")
            result = train(corpus, cfg)
            report = evaluate(result.params, [("test", tests)])
            dices.append(report.wavg_dice)
            ious.append(report.wavg_iou)
            run_lines.append(f"{label},{seed},{repr(report.wavg_dice)},{repr(report.wavg_iou)}")
            if progress is not None:
                progress(label, seed, report.wavg_dice)
        results.append(
            AblationRow(label, use_sp, use_bme, use_lr, list(seeds), dices, ious)
        )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["config,use_sp,use_bme,use_lr,n_seeds,mean_dice,mean_iou"]
        for row in results:
            lines.append(
                ",".join(
                    [
                        row.label,
                        str(int(row.use_sp)),
                        str(int(row.use_bme)),
                        str(int(row.use_lr)),
                        str(len(row.seeds)),
                        repr(row.mean_dice),
                        repr(row.mean_iou),
                    ]
                )
            )
        (out / ABLATION_CSV).write_text("\n".join(lines) + "\n")
        (out / ABLATION_RUNS_CSV).write_text("\n".join(run_lines) + "\n")
    return results
