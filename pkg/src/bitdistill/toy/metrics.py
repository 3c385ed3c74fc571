"""Scene-level detection score used in place of mAP.

For each scene, with ``k`` ground-truth objects:

* class accuracy: fraction of objects whose centre cell is predicted as an
  object (probability > 0.5) with the right class;
* hit rate: fraction of objects matched one-to-one, greedily by IoU, with
  IoU >= 0.5 by one of the top-``k`` predicted boxes (cells above 0.5 only).

The score is their product, averaged over scenes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import GRID, box_iou, decode_box

OBJ_THRESHOLD = 0.5
IOU_THRESHOLD = 0.5


@dataclass
class Prediction:
    objectness: np.ndarray  # (GRID, GRID) probabilities
    class_logits: np.ndarray  # (n_classes, GRID, GRID)
    boxes: np.ndarray  # (4, GRID, GRID) offsets


def scene_score(pred: Prediction, scene) -> float:
    n = len(scene.classes)
    cells = scene.cells()
    correct = 0
    for (row, col), c in zip(cells, scene.classes):
        if pred.objectness[row, col] > OBJ_THRESHOLD and int(np.argmax(pred.class_logits[:, row, col])) == c:
            correct += 1
    flat = pred.objectness.ravel()
    order = np.argsort(-flat, kind="stable")
    order = [i for i in order[:n] if flat[i] > OBJ_THRESHOLD]
    boxes = [decode_box(pred.boxes[:, i // GRID, i % GRID], i // GRID, i % GRID) for i in order]
    unmatched = list(range(len(boxes)))
    hits = 0
    for gt in scene.boxes:
        if not unmatched:
            break
        ious = [box_iou(boxes[j], gt) for j in unmatched]
        best = int(np.argmax(ious))
        if ious[best] >= IOU_THRESHOLD:
            hits += 1
            unmatched.pop(best)
    return (correct / n) * (hits / n)


def score_predictions(preds, scenes) -> float:
    if not scenes:
        raise ValueError("evaluation needs at least one scene")
    return float(np.mean([scene_score(p, s) for p, s in zip(preds, scenes)]))
