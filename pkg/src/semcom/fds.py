"""Receiver-side fast denoising of corrupted one-hot maps.

The present-class planes go through average pooling (kills noise spikes),
max pooling (restores the 1-regions), and a binarization threshold; absent
classes come back as exact zero planes. The max stage dilates class regions
by up to one kernel radius; that artifact is documented, not corrected.
Inputs are the de-normalized plane values (the power scale is undone by the
caller using the out-of-band header before denoising).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


class FdsError(ValueError):
    pass


@dataclass(frozen=True)
class FdsConfig:
    # Threshold must exceed 2/3: a straight region edge pools to exactly 2/3
    # one pixel outside the boundary, so anything lower dilates every region
    # by a full ring and loses to naive thresholding on mildly noisy maps.
    avg_kernel: int = 3
    max_kernel: int = 3
    threshold: float = 0.8
    enforce_partition: bool = False

    def __post_init__(self):
        if self.avg_kernel % 2 == 0 or self.max_kernel % 2 == 0:
            raise FdsError(f"kernels must be odd, got avg={self.avg_kernel} max={self.max_kernel}")
        if not 0.0 < self.threshold < 1.0:
            raise FdsError(f"threshold must lie in (0, 1), got {self.threshold}")


def pooled_planes(noisy_planes, cfg):
    """MaxPool(AvgPool(planes)) with stride 1, edge-replicate padding."""
    planes = np.asarray(noisy_planes, dtype=np.float64)
    if planes.ndim != 3:
        raise FdsError(f"expected C_p x H x W planes, got shape {planes.shape}")
    with T.no_grad():
        x = T.Tensor(planes[None, ...])
        x = T.pool2d(x, "avg", cfg.avg_kernel, stride=1, pad="same")
        x = T.pool2d(x, "max", cfg.max_kernel, stride=1, pad="same")
    return x.data[0]


def fds(noisy_planes, present_classes, c_total, cfg=FdsConfig()):
    """Denoise received planes and pad the absent classes with clean zeros.

    Returns a binary uint8 stack of shape [C_total, H, W]; spatial shape is
    preserved for any kernel setting.
    """
    planes = np.asarray(noisy_planes, dtype=np.float64)
    present = list(present_classes)
    if planes.ndim != 3 or planes.shape[0] != len(present):
        raise FdsError(
            f"{planes.shape[0] if planes.ndim == 3 else '?'} planes do not match "
            f"header with {len(present)} classes")
    if any(c < 0 or c >= c_total for c in present):
        raise FdsError(f"header class ids {present} out of range [0, {c_total})")
    pooled = pooled_planes(planes, cfg)
    bits = (pooled > cfg.threshold).astype(np.uint8)
    if cfg.enforce_partition:
        winner = np.argmax(pooled, axis=0)  # ties to the lower class id
        bits = np.zeros_like(bits)
        np.put_along_axis(bits, winner[None], 1, axis=0)
    full = np.zeros((c_total,) + planes.shape[1:], dtype=np.uint8)
    full[present] = bits
    return full


def naive_threshold(raw_planes, present_classes, c_total, threshold=0.5):
    """Baseline receiver: 0.5-threshold the raw planes, no pooling, no rescale."""
    planes = np.asarray(raw_planes, dtype=np.float64)
    bits = (planes > threshold).astype(np.uint8)
    full = np.zeros((c_total,) + planes.shape[1:], dtype=np.uint8)
    full[list(present_classes)] = bits
    return full


def stack_agreement(a, b):
    """Fraction of pixels whose full across-plane bit vectors match."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise FdsError(f"stack shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a == b).all(axis=0)))
