"""Synthetic detection scenes: 1-4 coloured shapes of five classes on noise."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..tensor import load_tensor, save_tensor

IMAGE_SIZE = 64
GRID = 16
STRIDE = IMAGE_SIZE // GRID
CLASS_NAMES = ("square", "disc", "triangle", "ring", "cross")
N_CLASSES = len(CLASS_NAMES)
MIN_SIZE, MAX_SIZE = 12, 22


@dataclass
class Scene:
    image: np.ndarray  # (3, 64, 64) float32
    boxes: np.ndarray  # (n, 4) x0, y0, x1, y1 in pixels
    classes: np.ndarray  # (n,) int
    noise: dict = field(default_factory=dict)

    @property
    def centers(self) -> np.ndarray:
        return np.stack([(self.boxes[:, 0] + self.boxes[:, 2]) / 2,
                         (self.boxes[:, 1] + self.boxes[:, 3]) / 2], axis=1)

    def cells(self) -> np.ndarray:
        """Grid cell ``(row, col)`` holding each object centre."""
        c = np.clip((self.centers // STRIDE).astype(int), 0, GRID - 1)
        return c[:, ::-1]


def _shape_mask(cls: int, x0, y0, size, yy, xx) -> np.ndarray:
    u = (xx + 0.5 - x0) / size  # normalised coordinates in [0, 1) inside the box
    v = (yy + 0.5 - y0) / size
    inside = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
    du, dv = u - 0.5, v - 0.5
    r = np.sqrt(du * du + dv * dv)
    if cls == 0:
        return inside
    if cls == 1:
        return r < 0.5
    if cls == 2:
        return inside & (np.abs(du) <= v / 2)
    if cls == 3:
        return (r < 0.5) & (r > 0.3)
    return inside & ((np.abs(du) < 0.15) | (np.abs(dv) < 0.15))


def _render(rng, classes) -> Scene:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    sigma = rng.uniform(0.05, 0.15)
    tilt = rng.uniform(-0.2, 0.2, size=2)
    base = 0.3 + tilt[0] * (xx / IMAGE_SIZE - 0.5) + tilt[1] * (yy / IMAGE_SIZE - 0.5)
    image = np.repeat(base[None], 3, axis=0) + rng.normal(0.0, sigma, size=(3, IMAGE_SIZE, IMAGE_SIZE))
    boxes, used = [], set()
    for cls in classes:
        for _ in range(100):
            size = int(rng.integers(MIN_SIZE, MAX_SIZE + 1))
            x0 = int(rng.integers(0, IMAGE_SIZE - size + 1))
            y0 = int(rng.integers(0, IMAGE_SIZE - size + 1))
            cell = ((y0 + size / 2) // STRIDE, (x0 + size / 2) // STRIDE)
            box = np.array([x0, y0, x0 + size, y0 + size], dtype=np.float64)
            if cell not in used and all(box_iou(box, b) < 0.1 for b in boxes):
                break
        used.add(cell)
        boxes.append(box)
        colour = rng.uniform(0.55, 1.0, size=3) * rng.choice([-1.0, 1.0])
        mask = _shape_mask(int(cls), x0, y0, size, yy, xx)
        image[:, mask] = 0.3 + colour[:, None] * 0.7
    return Scene(image.astype(np.float32), np.array(boxes), np.asarray(classes, dtype=np.int64),
                 {"sigma": float(sigma), "tilt": tilt.tolist()})


def box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def gen_dataset(seed: int, n_scenes: int, cache_dir=None) -> list[Scene]:
    """Deterministic dataset; object classes cycle through shuffled blocks of all five."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be at least 1")
    if cache_dir is not None:
        path = Path(cache_dir) / f"scenes_seed{seed}_n{n_scenes}"
        if (path / "objects.json").exists():
            return load_dataset(path)
    rng = np.random.default_rng(seed)
    counts = rng.integers(1, 5, size=n_scenes)
    n_objects = int(counts.sum())
    pool = np.concatenate([rng.permutation(N_CLASSES) for _ in range(n_objects // N_CLASSES + 1)])
    scenes, pos = [], 0
    for c in counts:
        scenes.append(_render(rng, pool[pos : pos + c]))
        pos += c
    if cache_dir is not None:
        save_dataset(scenes, path)
    return scenes


def save_dataset(scenes, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_tensor(path / "images.idat", np.stack([s.image for s in scenes]))
    meta = [{"boxes": s.boxes.tolist(), "classes": s.classes.tolist(), "noise": s.noise} for s in scenes]
    (path / "objects.json").write_text(json.dumps(meta))


def load_dataset(path) -> list[Scene]:
    path = Path(path)
    images = load_tensor(path / "images.idat").astype(np.float32)
    meta = json.loads((path / "objects.json").read_text())
    return [Scene(img, np.array(m["boxes"], dtype=np.float64), np.array(m["classes"], dtype=np.int64), m["noise"])
            for img, m in zip(images, meta)]


def encode_targets(scenes):
    """Per-cell training targets: objectness, class (-1 = none) and box offsets."""
    n = len(scenes)
    obj = np.zeros((n, GRID, GRID), dtype=np.float32)
    cls = np.full((n, GRID, GRID), -1, dtype=np.int64)
    box = np.zeros((n, 4, GRID, GRID), dtype=np.float32)
    for i, s in enumerate(scenes):
        for (row, col), c, b, ctr in zip(s.cells(), s.classes, s.boxes, s.centers):
            obj[i, row, col] = 1.0
            cls[i, row, col] = c
            box[i, :, row, col] = [ctr[0] / STRIDE - col - 0.5, ctr[1] / STRIDE - row - 0.5,
                                   np.log((b[2] - b[0]) / 16.0), np.log((b[3] - b[1]) / 16.0)]
    return obj, cls, box


def decode_box(offsets, row: int, col: int) -> np.ndarray:
    dx, dy, tw, th = offsets
    cx, cy = (col + 0.5 + dx) * STRIDE, (row + 0.5 + dy) * STRIDE
    w, h = 16.0 * np.exp(tw), 16.0 * np.exp(th)
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
