"""Small encoder-decoder segmentation network.

The encoder is a stride-2 stem followed by four blocks of (3x3 conv,
relu, stride-2 3x3 conv, relu), so stage i runs at 1/2^(i+1) of the
input resolution.  The decoder unifies the last three feature scales
to a common width with 1x1 convs, upsamples them to the second stage's
resolution, multiplies the three maps elementwise, and maps the product
to one logit channel that is upsampled back to full resolution.  The
first stage feeds the encoder chain only; the decoder never reads it.

Parameters live in a flat name-to-Tensor mapping so checkpoints are a
directory of raw tensor files plus a JSON index.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (
    Tensor,
    conv2d,
    load_tensor,
    mul,
    relu,
    reshape,
    save_tensor,
    upsample_bilinear,
)

__all__ = [
    "EncoderConfig",
    "ModelParams",
    "CheckpointError",
    "init_params",
    "forward",
    "forward_batch",
    "forward_features",
    "config_hash",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_INDEX = "index.json"


class CheckpointError(ValueError):
    """Missing, inconsistent, or corrupted checkpoint contents."""


@dataclass(frozen=True)
class EncoderConfig:
    """Widths and input geometry of the toy backbone."""

    channels: tuple[int, ...] = (16, 32, 64, 128)
    height: int = 96
    width: int = 96
    decoder_channels: int = 16

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 4:
            raise ValueError(f"encoder needs 4 stages, got {len(self.channels)}")
        if any(c < 1 for c in self.channels) or self.decoder_channels < 1:
            raise ValueError("channel widths must be positive")
        for name, v in (("height", self.height), ("width", self.width)):
            if v < 32 or v % 32:
                raise ValueError(f"{name} must be a positive multiple of 32, got {v}")


@dataclass
class ModelParams:
    """Named parameter tensors plus the config they were built for."""

    cfg: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.size for t in self.tensors.values())


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(
        rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True
    )


def _zeros(n, dtype):
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


def init_params(cfg: EncoderConfig, seed, dtype="float64") -> ModelParams:
    """Deterministic He-scaled uniform init; biases zero."""
    dt = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    t: dict[str, Tensor] = {}
    c = cfg.channels
    t["stem.w"] = _he_uniform(rng, (c[0], 3, 3, 3), 3 * 9, dt)
    t["stem.b"] = _zeros(c[0], dt)
    prev = c[0]
    for i, ci in enumerate(c, start=1):
        t[f"stage{i}.a.w"] = _he_uniform(rng, (ci, prev, 3, 3), prev * 9, dt)
        t[f"stage{i}.a.b"] = _zeros(ci, dt)
        t[f"stage{i}.b.w"] = _he_uniform(rng, (ci, ci, 3, 3), ci * 9, dt)
        t[f"stage{i}.b.b"] = _zeros(ci, dt)
        prev = ci
    for i in (2, 3, 4):
        cin = c[i - 1]
        t[f"unify{i}.w"] = _he_uniform(rng, (cfg.decoder_channels, cin, 1, 1), cin, dt)
        t[f"unify{i}.b"] = _zeros(cfg.decoder_channels, dt)
    t["head.w"] = _he_uniform(rng, (1, cfg.decoder_channels, 1, 1), cfg.decoder_channels, dt)
    t["head.b"] = _zeros(1, dt)
    return ModelParams(cfg=cfg, tensors=t)


def _check_image_shape(params: ModelParams, x: Tensor, batched: bool) -> None:
    cfg = params.cfg
    want = (3, cfg.height, cfg.width)
    got = x.shape[1:] if batched else x.shape
    if len(x.shape) != (4 if batched else 3) or tuple(got) != want:
        raise ValueError(
            f"input shape {x.shape} does not match configured {want}"
            + (" batch" if batched else "")
        )


def _encode(params: ModelParams, x: Tensor) -> list[Tensor]:
    t = params.tensors
    h = relu(conv2d(x, t["stem.w"], t["stem.b"], stride=2, pad=1))
    feats = []
    for i in (1, 2, 3, 4):
        h = relu(conv2d(h, t[f"stage{i}.a.w"], t[f"stage{i}.a.b"], stride=1, pad=1))
        h = relu(conv2d(h, t[f"stage{i}.b.w"], t[f"stage{i}.b.b"], stride=2, pad=1))
        feats.append(h)
    return feats


def _decode(params: ModelParams, feats: list[Tensor]) -> Tensor:
    t = params.tensors
    f2, f3, f4 = feats[1], feats[2], feats[3]
    h2, w2 = f2.shape[-2], f2.shape[-1]
    d2 = conv2d(f2, t["unify2.w"], t["unify2.b"])
    d3 = upsample_bilinear(conv2d(f3, t["unify3.w"], t["unify3.b"]), h2, w2)
    d4 = upsample_bilinear(conv2d(f4, t["unify4.w"], t["unify4.b"]), h2, w2)
    fused = mul(mul(d2, d3), d4)
    logit = conv2d(fused, t["head.w"], t["head.b"])
    return upsample_bilinear(logit, params.cfg.height, params.cfg.width)


def forward(params: ModelParams, image) -> Tensor:
    """Raw logits, same spatial shape as the (3, H, W) input."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    _check_image_shape(params, x, batched=False)
    logits = _decode(params, _encode(params, x))
    return reshape(logits, logits.shape[1:])


def forward_batch(params: ModelParams, images) -> Tensor:
    """Raw logits (N, H, W) for an (N, 3, H, W) batch in one pass."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    _check_image_shape(params, x, batched=True)
    logits = _decode(params, _encode(params, x))
    n = logits.shape[0]
    return reshape(logits, (n, logits.shape[-2], logits.shape[-1]))


def forward_features(params: ModelParams, image):
    """Encoder features f1..f4 plus the logits, for wiring inspections."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    _check_image_shape(params, x, batched=False)
    feats = _encode(params, x)
    logits = _decode(params, feats)
    return feats, reshape(logits, logits.shape[1:])


def config_hash(cfg) -> str:
    """Stable digest of any config dataclass, for checkpoint pairing."""
    blob = json.dumps(asdict(cfg) if not isinstance(cfg, dict) else cfg, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(
    ckpt_dir,
    params: ModelParams,
    iteration: int,
    extra_json: dict | None = None,
    extra_tensors: dict | None = None,
) -> None:
    """Write every named tensor as a raw tensor file plus a JSON index.

    extra_json rides along verbatim (trainer state); extra_tensors adds
    more named arrays (optimizer velocity) in the same format.
    """
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {
        "schema": 1,
        "iteration": int(iteration),
        "config": asdict(params.cfg),
        "config_hash": config_hash(params.cfg),
        "tensors": [],
        "extra_tensors": [],
        "extra": extra_json or {},
    }
    for name, t in params.items():
        fname = f"{name}.mxt"
        save_tensor(out / fname, t.data)
        index["tensors"].append({"name": name, "shape": list(t.shape), "file": fname})
    for name, arr in (extra_tensors or {}).items():
        fname = f"{name}.mxt"
        save_tensor(out / fname, np.asarray(arr))
        index["extra_tensors"].append(
            {"name": name, "shape": list(np.asarray(arr).shape), "file": fname}
        )
    (out / CHECKPOINT_INDEX).write_text(json.dumps(index, indent=1))


def load_checkpoint(ckpt_dir):
    """Returns (params, iteration, extra_json, extra_tensors); verifies
    the stored config hash and every tensor's declared shape."""
    root = Path(ckpt_dir)
    ipath = root / CHECKPOINT_INDEX
    if not ipath.is_file():
        raise CheckpointError(f"no {CHECKPOINT_INDEX} in {root}")
    index = json.loads(ipath.read_text())
    cfg_dict = index["config"]
    if config_hash(cfg_dict) != index["config_hash"]:
        raise CheckpointError(f"{root}: config hash mismatch")
    cfg = EncoderConfig(
        channels=tuple(cfg_dict["channels"]),
        height=cfg_dict["height"],
        width=cfg_dict["width"],
        decoder_channels=cfg_dict["decoder_channels"],
    )
    tensors: dict[str, Tensor] = {}
    for rec in index["tensors"]:
        path = root / rec["file"]
        if not path.is_file():
            raise CheckpointError(f"{root}: missing tensor file {rec['file']}")
        arr = load_tensor(path)
        if list(arr.shape) != rec["shape"]:
            raise CheckpointError(
                f"{root}: tensor {rec['name']} has shape {list(arr.shape)}, "
                f"index says {rec['shape']}"
            )
        tensors[rec["name"]] = Tensor(arr, requires_grad=True)
    extra_tensors = {
        rec["name"]: load_tensor(root / rec["file"])
        for rec in index.get("extra_tensors", [])
    }
    params = ModelParams(cfg=cfg, tensors=tensors)
    return params, index["iteration"], index.get("extra", {}), extra_tensors
