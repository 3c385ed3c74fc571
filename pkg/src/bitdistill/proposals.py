"""Proposal patches, the channel-wise temperature softmax and pair building.

Coordinates are continuous feature-map units where pixel ``j`` covers
``[j, j + 1)``. Resizing uses bilinear sampling on an align-corners-false
grid: output index ``i`` of a ``p``-wide patch samples source coordinate
``x + (i + 0.5) * w / p - 0.5``, clamped to the valid pixel-center range.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import ShapeError, load_tensor, save_tensor

PATCH_SIZE = 7
DEFAULT_TEMPERATURE = 4.0


@dataclass(frozen=True)
class Region:
    x: float
    y: float
    w: float
    h: float

    def clipped(self, height: int, width: int) -> "Region":
        """Intersection with the ``height x width`` map; raises if empty."""
        x0, y0 = max(self.x, 0.0), max(self.y, 0.0)
        x1, y1 = min(self.x + self.w, float(width)), min(self.y + self.h, float(height))
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"{self} does not intersect a {height}x{width} feature map")
        return Region(x0, y0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class ChannelStats:
    mu: np.ndarray
    sigma2: np.ndarray


@dataclass
class Proposal:
    region: Region
    source: str  # "teacher" or "student"
    patch: np.ndarray
    transformed: Optional[np.ndarray] = None


@dataclass
class ProposalPair:
    index: int
    region: Region
    source: str
    teacher_patch: np.ndarray
    student_patch: np.ndarray


def bilinear_taps(start, length, p: int, size: int):
    """Source indices ``(lo, hi)`` and interpolation weight of ``hi`` for ``p`` samples.

    ``start`` and ``length`` may be arrays; results then gain a trailing axis of size ``p``.
    """
    start = np.asarray(start, dtype=np.float64)[..., None]
    length = np.asarray(length, dtype=np.float64)[..., None]
    src = start + (np.arange(p) + 0.5) * (length / p) - 0.5
    src = np.clip(src, 0.0, size - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, src - lo


def interpolation_matrix(start, length, p: int, size: int) -> np.ndarray:
    """Dense ``(..., p, size)`` bilinear weights; ``patch = Wy @ F @ Wx.T`` per channel."""
    lo, hi, frac = bilinear_taps(start, length, p, size)
    mat = np.zeros(lo.shape + (size,))
    np.put_along_axis(mat, lo[..., None], (1.0 - frac)[..., None], axis=-1)
    # lo == hi at the clamped edge; accumulate so the weights still sum to one
    hi_w = np.take_along_axis(mat, hi[..., None], axis=-1) + frac[..., None]
    np.put_along_axis(mat, hi[..., None], hi_w, axis=-1)
    return mat


def crop_resize(feature, region: Region, p: int = PATCH_SIZE) -> np.ndarray:
    """Crop ``region`` from a ``(C, H, W)`` map and resize it to ``(C, p, p)``."""
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim != 3:
        raise ShapeError(f"feature map must be (C, H, W), got shape {f.shape}")
    _, height, width = f.shape
    r = region.clipped(height, width)
    y0, y1, fy = bilinear_taps(r.y, r.h, p, height)
    x0, x1, fx = bilinear_taps(r.x, r.w, p, width)
    fy, fx = fy[:, None], fx[None, :]
    top = f[:, y0[:, None], x0] * (1 - fx) + f[:, y0[:, None], x1] * fx
    bottom = f[:, y1[:, None], x0] * (1 - fx) + f[:, y1[:, None], x1] * fx
    return top * (1 - fy) + bottom * fy


def channel_transform(patch, T: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Spatial softmax with temperature ``T`` applied to each channel.

    Works on any array whose last two axes are spatial.
    """
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    x = np.asarray(patch, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("channel_transform input contains non-finite values")
    flat = x.reshape(x.shape[:-2] + (-1,)) / T
    flat = np.exp(flat - flat.max(axis=-1, keepdims=True))
    flat /= flat.sum(axis=-1, keepdims=True)
    return flat.reshape(x.shape)


def channel_gaussian_stats(patch) -> ChannelStats:
    x = np.asarray(patch, dtype=np.float64)
    flat = x.reshape(x.shape[0], -1)
    return ChannelStats(flat.mean(axis=1), flat.var(axis=1))


def make_proposal(feature, region: Region, source: str, T: float = DEFAULT_TEMPERATURE,
                  p: int = PATCH_SIZE) -> Proposal:
    patch = crop_resize(feature, region, p)
    return Proposal(region, source, patch, channel_transform(patch, T))


def build_pairs(teacher_props, student_props, teacher_feat, student_feat,
                T: float = DEFAULT_TEMPERATURE, p: int = PATCH_SIZE) -> list[ProposalPair]:
    """Pair every proposal with the patch at the same location in the other model.

    Teacher-originated regions come first, then student ones; no deduplication.
    """
    tf = np.asarray(teacher_feat, dtype=np.float64)
    sf = np.asarray(student_feat, dtype=np.float64)
    if tf.shape != sf.shape:
        raise ShapeError(f"teacher features {tf.shape} and student features {sf.shape} differ")
    pairs = []
    tagged = [(r, "teacher") for r in teacher_props] + [(r, "student") for r in student_props]
    for n, (region, source) in enumerate(tagged):
        t_patch = channel_transform(crop_resize(tf, region, p), T)
        s_patch = channel_transform(crop_resize(sf, region, p), T)
        pairs.append(ProposalPair(n, region, source, t_patch, s_patch))
    return pairs


def save_pairs(pairs, directory) -> None:
    """Write ``pairs.csv`` plus teacher/student patch stacks in IDAT format."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pairs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_index", "source", "x", "y", "w", "h"])
        for pr in pairs:
            r = pr.region
            writer.writerow([pr.index, pr.source, repr(r.x), repr(r.y), repr(r.w), repr(r.h)])
    save_tensor(out / "teacher_patches.idat", np.stack([pr.teacher_patch for pr in pairs]))
    save_tensor(out / "student_patches.idat", np.stack([pr.student_patch for pr in pairs]))


def load_pairs(directory) -> list[ProposalPair]:
    src = Path(directory)
    with open(src / "pairs.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{src / 'pairs.csv'} contains no pairs")
    teacher = load_tensor(src / "teacher_patches.idat")
    student = load_tensor(src / "student_patches.idat")
    if len(teacher) != len(rows) or len(student) != len(rows):
        raise ValueError(f"{src}: patch stacks do not match {len(rows)} CSV rows")
    pairs = []
    for i, row in enumerate(rows):
        region = Region(float(row["x"]), float(row["y"]), float(row["w"]), float(row["h"]))
        pairs.append(ProposalPair(int(row["pair_index"]), region, row["source"], teacher[i], student[i]))
    return pairs
