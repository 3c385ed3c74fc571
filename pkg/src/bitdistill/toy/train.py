"""Teacher pre-training, student distillation and evaluation for the toy task.

Randomness comes from one ``SeedSequence(seed)`` spawned, in order, into
streams for: training scenes, eval scenes, teacher init, teacher batch order,
student init, student batch order and random pair selection. Every mode sees
the same data, initial student and batch order for a given seed.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..config import DistillConfig
from ..loss import entropy_loss_batch, entropy_loss_grad_batch, total_loss
from ..proposals import Region, channel_transform, interpolation_matrix
from ..select import discrepancy, select_mask, selection_size
from .data import GRID, N_CLASSES, STRIDE, box_iou, encode_targets, gen_dataset
from .metrics import Prediction, score_predictions
from .model import BinaryConv2d, ToyDetector

log = logging.getLogger(__name__)

MODES = ("none", "random", "gt-region", "ida")
OBJ_POS_WEIGHT = 10.0


class TeacherQualityError(RuntimeError):
    pass


@dataclass
class TrainReport:
    mode: str
    seed: int
    config_hash: str
    config: dict
    teacher_metric: float
    eval_metric: float
    epochs: list = field(default_factory=list)
    packed_equivalence: bool | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def save(self, directory) -> tuple[Path, Path]:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"report_{self.mode}_seed{self.seed}"
        json_path = out / f"{stem}.json"
        json_path.write_text(self.to_json())
        csv_path = out / f"{stem}_epochs.csv"
        keys = ["epoch", "l_gt", "l_p", "l_r", "total"]
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            writer.writeheader()
            for row in self.epochs:
                writer.writerow({k: row.get(k, "") for k in keys})
        return json_path, csv_path


@dataclass
class Streams:
    train_data: int
    eval_data: int
    teacher_init: int
    teacher_order: np.random.Generator
    student_init: int
    student_order: np.random.Generator
    selection: np.random.Generator


def make_streams(seed: int) -> Streams:
    children = np.random.SeedSequence(seed).spawn(7)
    ints = [int(c.generate_state(1)[0]) for c in children]
    return Streams(ints[0], ints[1], ints[2], np.random.default_rng(children[3]), ints[4],
                   np.random.default_rng(children[5]), np.random.default_rng(children[6]))


def _images(scenes) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in scenes]))


def regions_from_objectness(obj: np.ndarray, n_props: int, size: float) -> list[Region]:
    """Top cells by objectness (ties in raster order) as fixed-size regions."""
    order = np.argsort(-obj.ravel(), kind="stable")[:n_props]
    out = []
    for i in order:
        row, col = divmod(int(i), obj.shape[1])
        r = Region(col + 0.5 - size / 2, row + 0.5 - size / 2, size, size)
        out.append(r.clipped(*obj.shape))
    return out


@torch.no_grad()
def predict(model, scenes, batch: int = 50) -> list[Prediction]:
    model.eval()
    preds = []
    for b in range(0, len(scenes), batch):
        _, out = model(_images(scenes[b : b + batch]))
        out = out.double().numpy()
        for o in out:
            obj = 1.0 / (1.0 + np.exp(-o[0]))
            preds.append(Prediction(obj, o[1 : 1 + N_CLASSES], o[1 + N_CLASSES :]))
    return preds


def evaluate(model, scenes) -> float:
    return score_predictions(predict(model, scenes), scenes)


def propose(model, scene, n_props: int, size: float = 5.0) -> list[Region]:
    return regions_from_objectness(predict(model, [scene])[0].objectness, n_props, size)


def detection_loss(out, obj_t, cls_t, box_t) -> torch.Tensor:
    obj_logit = out[:, 0]
    l_obj = F.binary_cross_entropy_with_logits(
        obj_logit, obj_t, pos_weight=torch.tensor(OBJ_POS_WEIGHT))
    pos = cls_t >= 0
    logits = out[:, 1 : 1 + N_CLASSES].permute(0, 2, 3, 1)[pos]
    l_cls = F.cross_entropy(logits, cls_t[pos])
    boxes = out[:, 1 + N_CLASSES :].permute(0, 2, 3, 1)[pos]
    l_box = F.smooth_l1_loss(boxes, box_t.permute(0, 2, 3, 1)[pos])
    return l_obj + l_cls + l_box


class EntropyDistillLoss(torch.autograd.Function):
    """Mean entropy loss over stacked pairs with the analytic numpy gradient."""

    @staticmethod
    def forward(ctx, rs, rt):
        rs64 = rs.detach().double().numpy()
        losses = entropy_loss_batch(rs64, rt)
        grad = entropy_loss_grad_batch(rs64, rt) / len(rs64)
        ctx.save_for_backward(torch.from_numpy(grad).to(rs.dtype))
        return rs.new_tensor(losses.mean())

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None


def crop_patches(feats: torch.Tensor, batch_idx, regions, p: int) -> torch.Tensor:
    """Differentiable bilinear crops ``(R, C, p, p)``; same grid as :func:`crop_resize`."""
    h, w = feats.shape[-2:]
    box = np.array([[r.x, r.y, r.w, r.h] for r in regions])
    wy = torch.from_numpy(interpolation_matrix(box[:, 1], box[:, 3], p, h)).to(feats.dtype)
    wx = torch.from_numpy(interpolation_matrix(box[:, 0], box[:, 2], p, w)).to(feats.dtype)
    maps = feats[torch.as_tensor(batch_idx)]
    return torch.einsum("rph,rchw,rqw->rcpq", wy, maps, wx)


def _gt_overlap(region: Region, scene) -> float:
    rb = np.array([region.x, region.y, region.x + region.w, region.y + region.h]) * STRIDE
    return max(box_iou(rb, gt) for gt in scene.boxes)


def choose_pairs(mode: str, eps: np.ndarray, regions, scene, gamma: float, rng) -> np.ndarray:
    """Indices of the pairs to distill for one image."""
    n = len(eps)
    k = selection_size(n, gamma)
    if mode == "ida":
        return np.flatnonzero(select_mask(eps, gamma).bits)
    if mode == "random":
        return np.sort(rng.choice(n, size=k, replace=False))
    if mode == "gt-region":
        overlap = np.array([_gt_overlap(r, scene) for r in regions])
        order = np.argsort(-overlap, kind="stable")
        chosen = [i for i in order[:k] if overlap[i] > 0] or [int(order[0])]
        return np.sort(np.array(chosen))
    raise ValueError(f"unknown distillation mode {mode!r}")


def _lr_at(cfg: DistillConfig, epoch: int, n_epochs: int) -> float:
    lr = cfg.lr
    if epoch >= int(0.6 * n_epochs):
        lr *= 0.1
    if epoch >= int(0.85 * n_epochs):
        lr *= 0.1
    return lr


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite {what} during training")


def train_teacher(cfg: DistillConfig, train_scenes, eval_scenes, streams: Streams):
    torch.manual_seed(streams.teacher_init)
    model = ToyDetector(cfg.teacher_width)
    targets = [torch.from_numpy(t) for t in encode_targets(train_scenes)]
    images = _images(train_scenes)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    for epoch in range(cfg.teacher_epochs):
        for g in opt.param_groups:
            g["lr"] = _lr_at(cfg, epoch, cfg.teacher_epochs)
        model.train()
        for idx in np.array_split(streams.teacher_order.permutation(len(images)),
                                  max(1, len(images) // cfg.batch_size)):
            idx = torch.from_numpy(idx)
            _, out = model(images[idx])
            loss = detection_loss(out, *(t[idx] for t in targets))
            _check_finite(loss.item(), "teacher loss")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, evaluate(model, eval_scenes)


def _reconstruction(model) -> torch.Tensor:
    convs = model.binary_convs()
    if not convs:
        return torch.zeros(())
    return torch.stack([c.reconstruction_penalty() for c in convs]).mean()


def train_student(cfg: DistillConfig, mode: str, teacher, train_scenes, eval_scenes,
                  streams: Streams, teacher_metric: float) -> TrainReport:
    if mode not in MODES:
        raise ValueError(f"unknown distillation mode {mode!r}; choose from {MODES}")
    lam = 0.0 if mode == "none" else cfg.lam
    torch.manual_seed(streams.student_init)
    student = ToyDetector(cfg.student_width, binary_backbone=True, binary_neck=False)
    targets = [torch.from_numpy(t) for t in encode_targets(train_scenes)]
    images = _images(train_scenes)
    with torch.no_grad():
        teacher.eval()
        t_feats, t_out = teacher(images)
    t_feats = t_feats.double().numpy()
    t_obj = t_out[:, 0].numpy()
    opt = torch.optim.SGD(student.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    report = TrainReport(mode, cfg.seed, cfg.hash(), cfg.to_dict(), teacher_metric, 0.0)
    stage2 = cfg.epochs // 2
    for epoch in range(cfg.epochs):
        if epoch == stage2:
            student.set_neck_binary(True)
        for g in opt.param_groups:
            g["lr"] = _lr_at(cfg, epoch, cfg.epochs)
        student.train()
        sums = {"l_gt": 0.0, "l_p": 0.0, "l_r": 0.0, "total": 0.0}
        batches = np.array_split(streams.student_order.permutation(len(images)),
                                 max(1, len(images) // cfg.batch_size))
        for idx in batches:
            feats, out = student(images[torch.from_numpy(idx)])
            l_gt = detection_loss(out, *(t[torch.from_numpy(idx)] for t in targets))
            l_r = _reconstruction(student)
            loss = l_gt + cfg.mu * l_r
            l_p_val = 0.0
            if lam > 0:
                l_p = _distill_term(cfg, mode, feats, out, idx, t_feats, t_obj, train_scenes, streams)
                loss = loss + lam * l_p
                l_p_val = l_p.item()
            parts = total_loss(l_gt.item(), l_p_val, l_r.item(), lam, cfg.mu)
            _check_finite(loss.item(), "student loss")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(student.parameters(), cfg.clip_norm)
            opt.step()
            for key in sums:
                sums[key] += getattr(parts, key)
        row = {"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()}}
        if mode == "none":
            del row["l_p"]
        report.epochs.append(row)
        log.info("mode=%s seed=%d epoch=%d %s", mode, cfg.seed, epoch, row)
    report.eval_metric = evaluate(student, eval_scenes)
    report.packed_equivalence = verify_packed_layers(student, eval_scenes[0])
    return report


class ClipGradNorm(torch.autograd.Function):
    """Identity whose backward rescales the incoming gradient to norm <= max_norm."""

    @staticmethod
    def forward(ctx, x, max_norm):
        ctx.max_norm = max_norm
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        norm = grad.norm()
        if norm > ctx.max_norm:
            grad = grad * (ctx.max_norm / norm)
        return grad, None


def _distill_term(cfg, mode, feats, out, idx, t_feats, t_obj, scenes, streams) -> torch.Tensor:
    s_obj = out[:, 0].detach().numpy()
    per_image, batch_idx, regions = [], [], []
    for j, i in enumerate(idx):
        regs = (regions_from_objectness(t_obj[i], cfg.n_props, cfg.region_cells)
                + regions_from_objectness(s_obj[j], cfg.n_props, cfg.region_cells))
        per_image.append(regs)
        batch_idx += [j] * len(regs)
        regions += regs
    t_raw = crop_patches(torch.from_numpy(t_feats[idx]), batch_idx, regions, cfg.patch_size).numpy()
    rt = channel_transform(t_raw, cfg.temperature)
    feats = ClipGradNorm.apply(feats, cfg.distill_clip_norm)
    raw = crop_patches(feats, batch_idx, regions, cfg.patch_size)
    rs = torch.softmax(raw.flatten(2) / cfg.temperature, dim=-1).view_as(raw)
    eps = discrepancy(rt, rs.detach().double().numpy())
    chosen, start = [], 0
    for j, i in enumerate(idx):
        n = len(per_image[j])
        pick = choose_pairs(mode, eps[start : start + n], per_image[j], scenes[i], cfg.gamma, streams.selection)
        chosen.append(start + pick)
        start += n
    chosen = np.concatenate(chosen)
    return EntropyDistillLoss.apply(rs[torch.from_numpy(chosen)], rt[chosen])


@torch.no_grad()
def verify_packed_layers(model, scene) -> bool:
    """Check every binarized conv against the packed kernel on one scene."""
    model.eval()
    captured = {}
    hooks = [m.register_forward_hook(lambda mod, inp, out, key=m: captured.__setitem__(key, (inp[0], out)))
             for m in model.binary_convs()]
    model(_images([scene]))
    for h in hooks:
        h.remove()
    for conv, (inp, out) in captured.items():
        x = inp[0].double().numpy()
        core, _ = conv.packed_forward(x)
        xb = F.pad(torch.where(inp > 0, 1.0, -1.0), (1, 1, 1, 1), value=-1.0).double()
        wb = torch.where(conv.weight > 0, 1.0, -1.0).double()
        ref = F.conv2d(xb, wb, stride=conv.stride)[0].numpy()
        if not np.array_equal(core, ref.astype(np.int64)) or not np.array_equal(ref, np.round(ref)):
            return False
        scaled = conv.scales().view(-1, 1, 1) * torch.from_numpy(core).float()
        if not torch.allclose(scaled, out[0], rtol=1e-5, atol=1e-5):
            return False
    return True


def prepare(cfg: DistillConfig, cache_dir=None):
    streams = make_streams(cfg.seed)
    train_scenes = gen_dataset(streams.train_data, cfg.n_train, cache_dir)
    eval_scenes = gen_dataset(streams.eval_data, cfg.n_eval, cache_dir)
    return streams, train_scenes, eval_scenes


def pretrain_teacher(cfg: DistillConfig, streams, train_scenes, eval_scenes):
    teacher, metric = train_teacher(cfg, train_scenes, eval_scenes, streams)
    if metric < cfg.teacher_gate:
        raise TeacherQualityError(
            f"teacher eval metric {metric:.3f} is below the {cfg.teacher_gate} gate; "
            "retrain the teacher (e.g. raise teacher_epochs)")
    return teacher, metric


def train(cfg: DistillConfig, mode: str, cache_dir=None) -> TrainReport:
    torch.use_deterministic_algorithms(True)
    streams, train_scenes, eval_scenes = prepare(cfg, cache_dir)
    teacher, metric = pretrain_teacher(cfg, streams, train_scenes, eval_scenes)
    return train_student(cfg, mode, teacher, train_scenes, eval_scenes, streams, metric)


def train_all_modes(cfg: DistillConfig, modes=MODES, cache_dir=None) -> dict[str, TrainReport]:
    """Train one teacher, then one student per mode from identical streams."""
    torch.use_deterministic_algorithms(True)
    streams, train_scenes, eval_scenes = prepare(cfg, cache_dir)
    teacher, metric = pretrain_teacher(cfg, streams, train_scenes, eval_scenes)
    reports = {}
    for mode in modes:
        fresh = make_streams(cfg.seed)
        reports[mode] = train_student(cfg, mode, teacher, train_scenes, eval_scenes, fresh, metric)
    return reports
