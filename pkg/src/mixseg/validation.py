"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .data import Sample

__all__ = [
    "check_samples",
    "check_image_stack",
    "check_binary_masks",
    "common_image_size",
]


def check_samples(X, name: str = "X") -> list[Sample]:
    """Require a non-empty sequence of Sample objects of one image size."""
    samples = list(X)
    if not samples:
        raise ValueError(f"{name} must contain at least one sample")
    for i, s in enumerate(samples):
        if not isinstance(s, Sample):
            raise TypeError(f"{name}[{i}] is {type(s).__name__}, expected Sample")
    common_image_size(samples, name)
    return samples


def common_image_size(samples, name: str = "X") -> tuple[int, int]:
    h, w = samples[0].image.shape[-2:]
    for s in samples:
        if s.image.shape != (3, h, w):
            raise ValueError(
                f"{name}: sample {s.id!r} has image shape {s.image.shape}, "
                f"expected (3, {h}, {w})"
            )
    return h, w


def check_image_stack(X, name: str = "X") -> np.ndarray:
    """Accept (N, 3, H, W) or a single (3, H, W) image; values in [0, 1]."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"{name} must be (N, 3, H, W) or (3, H, W), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_binary_masks(y, n: int, shape: tuple[int, int], name: str = "y") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape != (n, *shape):
        raise ValueError(f"{name} must have shape {(n, *shape)}, got {arr.shape}")
    vals = set(np.unique(arr).tolist())
    if not vals <= {0, 1}:
        raise ValueError(f"{name} must be binary 0/1, found values {sorted(vals)}")
    return arr.astype(np.uint8)
