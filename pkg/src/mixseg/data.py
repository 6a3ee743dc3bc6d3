"""Synthetic segmentation corpus with three kinds of annotation.

Images are smooth color backgrounds with an ellipse-union foreground of
distinct intensity and texture.  From the exact truth mask the corpus
derives the three supervision streams: full pixel masks, tight bounding
boxes, and sparse foreground/background scribbles drawn by confined
random walks.

On disk a corpus is a directory of PPM images (P6) and PGM label maps
(P5) plus a manifest.json carrying ids, splits, annotation kinds,
per-file sha256 checksums, and inline box corners.  Round-trips are
bit-exact; images are quantized to 8 bits at generation time.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .tensor import _interp_matrix

__all__ = [
    "UNLABELED",
    "BG_SCRIBBLE",
    "FG_SCRIBBLE",
    "BoxAnnotation",
    "ScribbleAnnotation",
    "Sample",
    "SynthConfig",
    "CorpusError",
    "EmptyMaskError",
    "gen_sample",
    "gen_corpus",
    "mask_to_box",
    "box_to_mask",
    "mask_to_scribble",
    "apply_flip_rot",
    "transform_box",
    "augment",
    "write_corpus",
    "read_corpus",
    "write_ppm",
    "read_ppm",
    "write_pgm",
    "read_pgm",
]

# Scribble pixel codes as stored in PGM files.
UNLABELED = 0
BG_SCRIBBLE = 128
FG_SCRIBBLE = 255

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
DEFAULT_SCRIBBLE_COVERAGE = 0.03


class CorpusError(ValueError):
    """Malformed corpus directory, manifest, or sample file."""


class EmptyMaskError(ValueError):
    """A mask without foreground where foreground is required."""


@dataclass(frozen=True)
class BoxAnnotation:
    """Axis-aligned rectangle with inclusive pixel corners."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 <= self.x1 and 0 <= self.y0 <= self.y1):
            raise ValueError(f"degenerate box corners {self.as_list()}")

    def validate(self, width: int, height: int) -> None:
        if self.x1 >= width or self.y1 >= height:
            raise ValueError(
                f"box {self.as_list()} exceeds image bounds {width}x{height}"
            )

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class ScribbleAnnotation:
    """Per-pixel code map; most pixels carry no label at all."""

    codes: np.ndarray

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.uint8)
        bad = set(np.unique(codes)) - {UNLABELED, BG_SCRIBBLE, FG_SCRIBBLE}
        if bad:
            raise ValueError(f"invalid scribble codes {sorted(bad)}")
        if not (codes != UNLABELED).any():
            raise ValueError("scribble has no labeled pixels")
        object.__setattr__(self, "codes", codes)

    @property
    def labeled(self) -> np.ndarray:
        """Boolean map of the set S of scribbled pixels."""
        return self.codes != UNLABELED

    @property
    def labels(self) -> np.ndarray:
        """0/1 class labels, meaningful only where ``labeled`` holds."""
        return (self.codes == FG_SCRIBBLE).astype(np.float64)


@dataclass
class Sample:
    """One image with exactly one annotation plus the held-out truth mask.

    The truth mask exists for every sample but must only be consulted by
    evaluation; training on box and scribble samples sees just the weak
    annotation.
    """

    id: str
    split: str
    kind: str
    image: np.ndarray
    annotation: object
    truth: np.ndarray

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"sample {self.id}: bad split {self.split!r}")
        if self.kind not in ("pixel", "box", "scribble"):
            raise ValueError(f"sample {self.id}: bad kind {self.kind!r}")


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic generator."""

    height: int = 96
    width: int = 96
    blob_count: tuple[int, int] = (1, 3)
    axis_range: tuple[float, float] = (8.0, 26.0)
    texture: float = 0.12
    seed: int = 0

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError("image size must be at least 32x32")
        if self.blob_count[0] > self.blob_count[1] or self.blob_count[0] < 0:
            raise ValueError(f"empty blob count range {self.blob_count}")
        if self.axis_range[0] > self.axis_range[1] or self.axis_range[0] <= 0:
            raise ValueError(f"empty axis range {self.axis_range}")


def _smooth_field(rng, h: int, w: int, cells: int = 5) -> np.ndarray:
    """Low-frequency noise: a coarse grid blown up bilinearly."""
    coarse = rng.normal(0.0, 1.0, size=(cells, cells))
    mh = _interp_matrix(cells, h, "float64")
    mw = _interp_matrix(cells, w, "float64")
    return mh @ coarse @ mw.T


def _ellipse_alpha(cfg: SynthConfig, rng, count: int) -> np.ndarray:
    """Coverage in [0,1] of the ellipse union, 2x2-supersampled."""
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    alpha = np.zeros((h, w))
    for _ in range(count):
        cy = rng.uniform(0.2, 0.8) * h
        cx = rng.uniform(0.2, 0.8) * w
        a = rng.uniform(*cfg.axis_range)
        b = rng.uniform(*cfg.axis_range)
        theta = rng.uniform(0.0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        hit = np.zeros((h, w))
        for oy in (-0.25, 0.25):
            for ox in (-0.25, 0.25):
                dy = yy + oy - cy
                dx = xx + ox - cx
                u = (dx * ct + dy * st) / a
                v = (-dx * st + dy * ct) / b
                hit += (u * u + v * v <= 1.0)
        alpha = np.maximum(alpha, hit / 4.0)
    return alpha


def _contrast_direction(rng) -> np.ndarray:
    """Unit color-space direction of the foreground mean shift.

    Half of the contrast energy sits on the gray axis with a random
    polarity, so every image shares a brightness cue that is quick to
    pick up; the other half points along a random hue axis, so a model
    trained on few images keeps meeting unseen color contrasts.
    """
    axis = np.full(3, 1.0) / np.sqrt(3.0)
    polarity = 1.0 if rng.random() < 0.5 else -1.0
    chroma = rng.normal(0.0, 1.0, size=3)
    chroma -= (chroma @ axis) * axis
    norm = np.linalg.norm(chroma)
    if norm < 1e-9:  # vanishing probability, but keep it total
        chroma, norm = np.array([1.0, -1.0, 0.0]), np.sqrt(2.0)
    return (polarity * axis + chroma / norm) / np.sqrt(2.0)


def gen_sample(cfg: SynthConfig, rng) -> Sample:
    """One synthetic image and its exact mask, deterministic per (cfg, rng).

    The foreground differs from the background by a mean shift along a
    per-image color direction (see ``_contrast_direction``), carries its
    own texture, and sits on a smooth gradient background with
    sensor-like noise.  The image is quantized to 8 bits so disk
    round-trips are lossless.
    """
    h, w = cfg.height, cfg.width
    count = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
    alpha = _ellipse_alpha(cfg, rng, count)
    truth = (alpha >= 0.5).astype(np.uint8)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    direction = _contrast_direction(rng)
    magnitude = rng.uniform(0.25, 0.50)
    channels = []
    for deltac in magnitude * direction:
        base = rng.uniform(0.35, 0.65)
        gx, gy = rng.uniform(-0.25, 0.25, size=2)
        bg = base + gx * (xx / w - 0.5) + gy * (yy / h - 0.5)
        bg += 0.08 * _smooth_field(rng, h, w) + 0.03 * _smooth_field(rng, h, w, 11)
        # Texture of matched amplitude on both classes keeps local
        # variance uninformative; the detectable cue is the mean shift.
        tex_bg = rng.normal(0.0, cfg.texture, size=(h, w))
        tex_fg = rng.normal(0.0, cfg.texture, size=(h, w))
        chan = (
            bg
            + tex_bg * (1.0 - alpha)
            + alpha * (deltac + tex_fg)
            + rng.normal(0.0, 0.02, size=(h, w))
        )
        channels.append(chan)
    img = np.clip(np.stack(channels), 0.0, 1.0)
    img = np.round(img * 255.0) / 255.0
    return Sample(
        id="",
        split="train",
        kind="pixel",
        image=img.astype(np.float32),
        annotation=truth,
        truth=truth,
    )


def mask_to_box(m: np.ndarray) -> BoxAnnotation:
    """Tightest rectangle around the foreground; errors on empty masks."""
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        raise EmptyMaskError("cannot derive a box from a mask with no foreground")
    return BoxAnnotation(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def box_to_mask(b: BoxAnnotation, width: int, height: int) -> np.ndarray:
    b.validate(width, height)
    m = np.zeros((height, width), dtype=np.uint8)
    m[b.y0 : b.y1 + 1, b.x0 : b.x1 + 1] = 1
    return m


def _walk_scribble(inside: np.ndarray, seed_yx, target: int, rng) -> np.ndarray:
    """Self-avoiding 4-neighbor walk confined to ``inside``; marks exactly
    ``target`` pixels, teleporting when boxed in."""
    h, w = inside.shape
    marked = np.zeros((h, w), dtype=bool)
    y, x = seed_yx
    marked[y, x] = True
    steps = [(0, 1), (0, -1), (1, 0), (-1, 0)]
    while marked.sum() < target:
        candidates = []
        for dy, dx in steps:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and inside[ny, nx] and not marked[ny, nx]:
                candidates.append((ny, nx))
        if candidates:
            y, x = candidates[int(rng.integers(len(candidates)))]
        else:
            free = np.flatnonzero(inside & ~marked)
            if free.size == 0:
                break
            pick = int(free[int(rng.integers(free.size))])
            y, x = divmod(pick, w)
        marked[y, x] = True
    return marked


def _nearest_to_centroid(inside: np.ndarray) -> tuple[int, int]:
    ys, xs = np.nonzero(inside)
    cy, cx = ys.mean(), xs.mean()
    d2 = (ys - cy) ** 2 + (xs - cx) ** 2
    i = int(np.argmin(d2))
    return int(ys[i]), int(xs[i])


def mask_to_scribble(
    m: np.ndarray, coverage: float = DEFAULT_SCRIBBLE_COVERAGE, rng=None
) -> ScribbleAnnotation:
    """Sparse strokes: one walk inside the foreground (seeded at its
    centroid), one inside the background, each covering about
    ``coverage`` of its class.  Every labeled pixel is class-correct."""
    if not 0 < coverage <= 0.2:
        raise ValueError(f"coverage must be in (0, 0.2], got {coverage}")
    if rng is None:
        rng = np.random.default_rng(0)
    fg = np.asarray(m) != 0
    bg = ~fg
    if not fg.any() or not bg.any():
        raise EmptyMaskError("scribbles need both foreground and background")
    codes = np.full(m.shape, UNLABELED, dtype=np.uint8)
    fg_target = max(1, round(coverage * int(fg.sum())))
    bg_target = max(1, round(coverage * int(bg.sum())))
    fg_marks = _walk_scribble(fg, _nearest_to_centroid(fg), fg_target, rng)
    bys, bxs = np.nonzero(bg)
    j = int(rng.integers(bys.size))
    bg_marks = _walk_scribble(bg, (int(bys[j]), int(bxs[j])), bg_target, rng)
    codes[fg_marks] = FG_SCRIBBLE
    codes[bg_marks] = BG_SCRIBBLE
    return ScribbleAnnotation(codes)


def apply_flip_rot(arr: np.ndarray, hflip: bool, vflip: bool, k: int) -> np.ndarray:
    """Flip then rotate (k quarter-turns counterclockwise) the last two axes."""
    if hflip:
        arr = np.flip(arr, axis=-1)
    if vflip:
        arr = np.flip(arr, axis=-2)
    if k % 4:
        arr = np.rot90(arr, k % 4, axes=(-2, -1))
    return np.ascontiguousarray(arr)


def transform_box(
    box: BoxAnnotation, width: int, height: int, hflip: bool, vflip: bool, k: int
) -> BoxAnnotation:
    """Corner remapping matching ``apply_flip_rot`` on the rasterized mask."""
    x0, y0, x1, y1 = box.x0, box.y0, box.x1, box.y1
    if hflip:
        x0, x1 = width - 1 - x1, width - 1 - x0
    if vflip:
        y0, y1 = height - 1 - y1, height - 1 - y0
    for _ in range(k % 4):
        # One quarter-turn counterclockwise: (y, x) -> (W-1-x, y).
        x0, y0, x1, y1 = y0, width - 1 - x1, y1, width - 1 - x0
        width, height = height, width
    return BoxAnnotation(x0, y0, x1, y1)


def augment(s: Sample, rng) -> Sample:
    """Random flips and quarter-turn rotation, identical on image and labels."""
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    k = int(rng.integers(0, 4))
    h, w = s.truth.shape
    image = apply_flip_rot(s.image, hflip, vflip, k)
    truth = apply_flip_rot(s.truth, hflip, vflip, k)
    if s.kind == "pixel":
        ann = apply_flip_rot(s.annotation, hflip, vflip, k)
    elif s.kind == "box":
        ann = transform_box(s.annotation, w, h, hflip, vflip, k)
    else:
        ann = ScribbleAnnotation(apply_flip_rot(s.annotation.codes, hflip, vflip, k))
    return replace(s, image=image, annotation=ann, truth=truth)


def _sample_ok(truth: np.ndarray) -> bool:
    n = int(truth.sum())
    return 0 < n < truth.size


def gen_corpus(
    cfg: SynthConfig,
    counts: tuple[int, int, int, int] = (60, 200, 200, 100),
    scribble_coverage: float = DEFAULT_SCRIBBLE_COVERAGE,
) -> list[Sample]:
    """Deterministic corpus: pixel/box/scribble train streams plus a test
    split, counts in that order.  Every sample keeps both classes present
    so boxes and scribbles are always derivable."""
    n_pixel, n_box, n_scribble, n_test = counts
    if min(counts) < 0:
        raise ValueError(f"negative counts {counts}")
    if n_pixel < 1:
        raise ValueError("the pixel stream must have at least one sample")
    streams = [
        ("p", "train", "pixel", n_pixel),
        ("b", "train", "box", n_box),
        ("s", "train", "scribble", n_scribble),
        ("t", "test", "pixel", n_test),
    ]
    out: list[Sample] = []
    for sid, (prefix, split, kind, count) in enumerate(streams):
        for i in range(count):
            for attempt in range(64):
                seq = np.random.SeedSequence(
                    cfg.seed, spawn_key=(sid, i, attempt)
                )
                child_img, child_ann = seq.spawn(2)
                s = gen_sample(cfg, np.random.default_rng(child_img))
                if _sample_ok(s.truth):
                    break
            else:
                raise RuntimeError(f"could not generate a valid sample for {prefix}{i}")
            s.id = f"{prefix}{i:04d}"
            s.split = split
            s.kind = kind
            if kind == "box":
                s.annotation = mask_to_box(s.truth)
            elif kind == "scribble":
                s.annotation = mask_to_scribble(
                    s.truth, scribble_coverage, np.random.default_rng(child_ann)
                )
            out.append(s)
    return out


# --------------------------------------------------------------------------
# Netpbm files.  The writer emits a fixed header layout; the reader accepts
# any whitespace/comment arrangement a conforming tool may produce.

def _write_netpbm(path, magic: bytes, payload: np.ndarray, w: int, h: int) -> None:
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(payload.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    """img is (3, H, W) uint8; stored interleaved RGB."""
    if img.ndim != 3 or img.shape[0] != 3 or img.dtype != np.uint8:
        raise ValueError(f"write_ppm expects (3, H, W) uint8, got {img.shape} {img.dtype}")
    _, h, w = img.shape
    _write_netpbm(path, b"P6", np.transpose(img, (1, 2, 0)), w, h)


def write_pgm(path, m: np.ndarray) -> None:
    if m.ndim != 2 or m.dtype != np.uint8:
        raise ValueError(f"write_pgm expects 2-D uint8, got {m.shape} {m.dtype}")
    h, w = m.shape
    _write_netpbm(path, b"P5", m, w, h)


def _read_netpbm(path, magic: bytes) -> tuple[np.ndarray, int, int]:
    blob = Path(path).read_bytes()
    if not blob.startswith(magic):
        raise CorpusError(f"{path}: expected {magic.decode()} file")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        if pos >= len(blob):
            raise CorpusError(f"{path}: truncated header")
        c = blob[pos : pos + 1]
        if c == b"#":
            pos = blob.index(b"\n", pos) + 1
        elif c.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end : end + 1].isspace():
                end += 1
            fields.append(int(blob[pos:end]))
            pos = end
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise CorpusError(f"{path}: unsupported maxval {maxval}")
    depth = 3 if magic == b"P6" else 1
    data = np.frombuffer(blob, dtype=np.uint8, offset=pos)
    if data.size != w * h * depth:
        raise CorpusError(f"{path}: payload size {data.size} != {w}x{h}x{depth}")
    return data, w, h


def read_ppm(path) -> np.ndarray:
    data, w, h = _read_netpbm(path, b"P6")
    return np.ascontiguousarray(np.transpose(data.reshape(h, w, 3), (2, 0, 1)))


def read_pgm(path) -> np.ndarray:
    data, w, h = _read_netpbm(path, b"P5")
    return data.reshape(h, w).copy()


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_corpus(samples: list[Sample], out_dir) -> str:
    """Persist samples plus manifest; returns the manifest's sha256."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        files = {"image": f"{s.id}.ppm", "truth": f"{s.id}_truth.pgm"}
        write_ppm(out / files["image"], np.round(s.image * 255.0).astype(np.uint8))
        write_pgm(out / files["truth"], (s.truth * 255).astype(np.uint8))
        entry = {"id": s.id, "split": s.split, "kind": s.kind, "files": files}
        if s.kind == "box":
            entry["box"] = s.annotation.as_list()
        elif s.kind == "scribble":
            files["scribble"] = f"{s.id}_scribble.pgm"
            write_pgm(out / files["scribble"], s.annotation.codes)
        entry["sha256"] = {key: _sha256(out / name) for key, name in files.items()}
        entries.append(entry)
    manifest = {"schema": SCHEMA_VERSION, "samples": entries}
    blob = json.dumps(manifest, indent=1).encode()
    (out / MANIFEST_NAME).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_corpus(corpus_dir) -> list[Sample]:
    """Load and verify a corpus; any inconsistency names the sample."""
    root = Path(corpus_dir)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise CorpusError(f"no {MANIFEST_NAME} in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise CorpusError(f"{mpath}: invalid JSON ({e})") from e
    if manifest.get("schema") != SCHEMA_VERSION:
        raise CorpusError(f"{mpath}: unsupported schema {manifest.get('schema')!r}")
    samples = []
    for entry in manifest["samples"]:
        sid = entry.get("id", "<missing id>")
        files = entry["files"]
        for key, name in files.items():
            path = root / name
            if not path.is_file():
                raise CorpusError(f"sample {sid}: missing file {name}")
            digest = _sha256(path)
            if digest != entry["sha256"].get(key):
                raise CorpusError(f"sample {sid}: checksum mismatch on {name}")
        img_u8 = read_ppm(root / files["image"])
        truth_u8 = read_pgm(root / files["truth"])
        tvals = set(np.unique(truth_u8))
        if not tvals <= {0, 255}:
            raise CorpusError(f"sample {sid}: non-binary truth values {sorted(tvals)}")
        truth = (truth_u8 == 255).astype(np.uint8)
        kind = entry["kind"]
        if kind == "pixel":
            ann: object = truth
        elif kind == "box":
            ann = BoxAnnotation(*entry["box"])
            ann.validate(truth.shape[1], truth.shape[0])
        elif kind == "scribble":
            codes = read_pgm(root / files["scribble"])
            try:
                ann = ScribbleAnnotation(codes)
            except ValueError as e:
                raise CorpusError(f"sample {sid}: {e}") from e
        else:
            raise CorpusError(f"sample {sid}: unknown annotation kind {kind!r}")
        samples.append(
            Sample(
                id=sid,
                split=entry["split"],
                kind=kind,
                image=img_u8.astype(np.float32) / 255.0,
                annotation=ann,
                truth=truth,
            )
        )
    return samples
