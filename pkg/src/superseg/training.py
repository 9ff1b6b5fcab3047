"""Hybrid pretraining and projector tuning.

Stage 1 jointly trains the sparse encoder and the superpoint transformer
with per-scene Hungarian matching, classification cross-entropy, BCE+Dice
mask losses, and feature distillation (squared error plus cosine) against
teacher features pooled per superpoint; the three terms sum with unit
weights. Stage 2 freezes everything except the projection layers and
optimizes the instruction-tuning objective text + 0.1 * mask on synthetic
referring tasks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from .autodiff import (
    Matrix,
    Tape,
    add,
    cross_entropy_rows,
    div,
    gather_rows,
    mean_all,
    mul,
    scale,
    sigmoid,
    softplus,
    sqrt,
    sub,
    sum_cols,
)
from .config import RunConfig
from .errors import TrainingDivergedError
from .multiview import lift_features, make_ring_cameras, render_views
from .pointcloud import PointCloud
from .sparse_unet import build_scene_grid, encode_scene, init_unet_params
from .superpoints import compute_superpoints, superpoint_pool
from .synthetic import SyntheticScene, generate_scene
from .transformer import apply_mask_head, init_ost_params, ost_forward

_COS_EPS = 1e-14


# ---------------------------------------------------------------------------
# ground truth at superpoint granularity


def gt_superpoint_masks(instance_labels, instance_semantics, assignment, n_superpoints):
    """Majority-vote instance per superpoint -> per-instance binary rows.

    Returns (masks G x M, semantic ids G). Instances that win no superpoint
    keep an all-zero row.
    """
    n_inst = int(instance_semantics.shape[0])
    masks = np.zeros((n_inst, n_superpoints))
    if n_inst == 0:
        return masks, np.asarray(instance_semantics, dtype=np.int64)
    # count points of each instance id (-1 folded to column n_inst) per sp
    folded = np.where(instance_labels < 0, n_inst, instance_labels)
    counts = np.zeros((n_superpoints, n_inst + 1), dtype=np.int64)
    np.add.at(counts, (assignment, folded), 1)
    winner = counts.argmax(axis=1)  # ties resolve to the lower instance id
    for inst in range(n_inst):
        masks[inst, winner == inst] = 1.0
    return masks, np.asarray(instance_semantics, dtype=np.int64)


@dataclass
class MatchResult:
    query_indices: np.ndarray
    gt_indices: np.ndarray

    @property
    def n_matched(self):
        return int(self.query_indices.shape[0])


def match_cost_matrix(class_logits, mask_logits, gt_masks, gt_sem,
                      w_cls=1.0, w_bce=1.0, w_dice=1.0, smooth=1.0):
    """Per-pair cost: w_cls * (-log p_class) + w_bce * BCE + w_dice * Dice."""
    x = np.asarray(class_logits, dtype=np.float64)
    xm = x - x.max(axis=1, keepdims=True)
    logp = xm - np.log(np.exp(xm).sum(axis=1, keepdims=True))
    cost_cls = -logp[:, np.asarray(gt_sem, dtype=np.int64)]

    ml = np.asarray(mask_logits, dtype=np.float64)
    y = np.asarray(gt_masks, dtype=np.float64)
    s = ml.shape[1]
    cost_bce = np.logaddexp(0.0, ml).mean(axis=1)[:, None] - (ml @ y.T) / s
    p = expit(ml)
    inter = p @ y.T
    dice = 1.0 - (2.0 * inter + smooth) / (p.sum(axis=1)[:, None] + y.sum(axis=1)[None, :] + smooth)
    return w_cls * cost_cls + w_bce * cost_bce + w_dice * dice


def hungarian_match(class_logits, mask_logits, gt_masks, gt_sem, **weights) -> MatchResult:
    """Minimum-cost injective assignment of queries to ground-truth
    instances. Zero instances leaves every query unmatched (no-object)."""
    gt_sem = np.asarray(gt_sem, dtype=np.int64)
    if gt_sem.shape[0] == 0:
        empty = np.empty(0, dtype=np.int64)
        return MatchResult(query_indices=empty, gt_indices=empty)
    cost = match_cost_matrix(class_logits, mask_logits, gt_masks, gt_sem, **weights)
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(cols, kind="stable")
    return MatchResult(
        query_indices=rows[order].astype(np.int64),
        gt_indices=cols[order].astype(np.int64),
    )


# ---------------------------------------------------------------------------
# losses (differentiable)


def cls_loss(class_logits: Matrix, match: MatchResult, gt_sem, num_categories: int) -> Matrix:
    """Mean cross-entropy over every query; unmatched queries target the
    trailing no-object class."""
    targets = np.full(class_logits.rows, num_categories, dtype=np.int64)
    if match.n_matched:
        targets[match.query_indices] = np.asarray(gt_sem, dtype=np.int64)[match.gt_indices]
    return cross_entropy_rows(class_logits, targets)


def bce_dice_loss(mask_logits: Matrix, gt_rows: np.ndarray, smooth: float = 1.0) -> Matrix:
    """Mean over rows of BCE-with-logits plus smoothed Dice."""
    y = Matrix(np.asarray(gt_rows, dtype=np.float64))
    bce = mean_all(sub(softplus(mask_logits), mul(mask_logits, y)))
    p = sigmoid(mask_logits)
    inter = sum_cols(mul(p, y))
    num = add(scale(inter, 2.0), Matrix(np.full((inter.rows, 1), smooth)))
    den = add(sum_cols(p), Matrix(y.data.sum(axis=1, keepdims=True) + smooth))
    dice = sub(Matrix(np.ones((inter.rows, 1))), div(num, den))
    return add(bce, mean_all(dice))


def mask_loss(mask_logits: Matrix, match: MatchResult, gt_masks, smooth: float = 1.0) -> Matrix:
    """Mean BCE+Dice over matched pairs; zero when nothing matched."""
    if match.n_matched == 0:
        return Matrix([[0.0]])
    rows = gather_rows(mask_logits, match.query_indices)
    gt = np.asarray(gt_masks, dtype=np.float64)[match.gt_indices]
    return bce_dice_loss(rows, gt, smooth)


def kd_targets(lifted: np.ndarray, assignment, n_superpoints: int, point_valid=None):
    """Pool lifted per-point features into superpoints over valid points.

    Returns (targets M x C, sp_valid M bool); a superpoint with no valid
    member is excluded from the distillation loss.
    """
    lifted = np.asarray(lifted, dtype=np.float64)
    if point_valid is None:
        point_valid = np.ones(lifted.shape[0], dtype=bool)
    idx = np.flatnonzero(point_valid)
    seg = np.asarray(assignment, dtype=np.int64)[idx]
    counts = np.bincount(seg, minlength=n_superpoints).astype(np.float64)
    targets = np.zeros((n_superpoints, lifted.shape[1]))
    for c in range(lifted.shape[1]):
        targets[:, c] = np.bincount(seg, weights=lifted[idx, c], minlength=n_superpoints)
    sp_valid = counts > 0
    targets[sp_valid] /= counts[sp_valid, None]
    return targets, sp_valid


def kd_loss(alignment: Matrix, targets: np.ndarray, sp_valid) -> Matrix:
    """Mean over valid superpoints of squared error plus (1 - cosine)."""
    sp_valid = np.asarray(sp_valid, dtype=bool)
    idx = np.flatnonzero(sp_valid)
    if idx.shape[0] == 0:
        return Matrix([[0.0]])
    z = gather_rows(alignment, idx)
    t = np.asarray(targets, dtype=np.float64)[idx]
    d = sub(z, Matrix(t))
    mse = sum_cols(mul(d, d))
    dot = sum_cols(mul(z, Matrix(t)))
    zn = sqrt(add(sum_cols(mul(z, z)), Matrix(np.full((idx.shape[0], 1), _COS_EPS))))
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    cos = div(dot, mul(zn, Matrix(np.maximum(tn, 1e-30))))
    one = Matrix(np.ones((idx.shape[0], 1)))
    return mean_all(add(mse, sub(one, cos)))


def ift_loss(text_loss, mask_term, coef: float = 0.1) -> Matrix:
    """Instruction-tuning objective: text + coef * mask."""
    if not isinstance(text_loss, Matrix):
        text_loss = Matrix([[float(text_loss)]])
    if not isinstance(mask_term, Matrix):
        mask_term = Matrix([[float(mask_term)]])
    return add(text_loss, scale(mask_term, coef))


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Decoupled weight decay Adam over a flat name -> Matrix dict.

    Updates are functional: step() returns a new dict of new Matrix values,
    leaving the previous ones untouched.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            out[name] = Matrix(p.data - lr * (update + self.weight_decay * p.data))
        return out


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from base_lr to 0 over total_steps."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# dataset preparation


@dataclass
class SceneSample:
    """Per-scene caches that depend only on geometry and config."""

    scene: SyntheticScene
    grid: object  # SceneGrid
    part: object  # SuperpointPartition
    gt_sp_masks: np.ndarray
    gt_sem: np.ndarray
    kd_target: np.ndarray
    kd_valid: np.ndarray


def prepare_sample(scene: SyntheticScene, cfg: RunConfig) -> SceneSample:
    grid = build_scene_grid(scene.pc, cfg.encoder)
    part = compute_superpoints(scene.pc, cfg.superpoints)
    masks, sem = gt_superpoint_masks(
        scene.instance_labels, scene.instance_semantics, part.assignment, part.n_superpoints
    )
    if cfg.training.kd_source == "lifted":
        cams = make_ring_cameras(
            center=(0.0, 0.0, 0.3),
            radius=cfg.cameras.ring_radius,
            height=cfg.cameras.height,
            n_views=cfg.cameras.n_views,
            image_size=cfg.cameras.image_size,
            focal=cfg.cameras.focal,
        )
        render_views(cams, scene.pc.coords, scene.teacher_features)
        lifted, valid = lift_features(cams, scene.pc.coords, cfg.cameras.depth_tol)
    else:
        lifted, valid = scene.teacher_features, None
    target, sp_valid = kd_targets(lifted, part.assignment, part.n_superpoints, valid)
    return SceneSample(
        scene=scene,
        grid=grid,
        part=part,
        gt_sp_masks=masks,
        gt_sem=sem,
        kd_target=target,
        kd_valid=sp_valid,
    )


def make_dataset(cfg: RunConfig, n_scenes: int, index_offset: int = 0):
    return [
        prepare_sample(generate_scene(cfg.seed, cfg.scene, index_offset + i), cfg)
        for i in range(n_scenes)
    ]


# ---------------------------------------------------------------------------
# stage 1


def scene_forward(params, cfg: RunConfig, sample: SceneSample):
    """Encoder -> pooling -> transformer -> matched losses for one scene."""
    tr = cfg.training
    point_feats, _ = encode_scene(
        _scoped(params, "unet."), cfg.encoder, sample.scene.pc, sample.grid
    )
    sp_feats = superpoint_pool(point_feats, sample.part)
    result = ost_forward(_scoped(params, "ost."), cfg.ost, sp_feats, sample.part.centroids)
    mask_logits = apply_mask_head(result.output.mask_kernels, sp_feats)
    match = hungarian_match(
        result.output.class_logits.data,
        mask_logits.data,
        sample.gt_sp_masks,
        sample.gt_sem,
        w_cls=tr.match_cls_weight,
        w_bce=tr.match_bce_weight,
        w_dice=tr.match_dice_weight,
        smooth=tr.dice_smooth,
    )
    l_cls = cls_loss(result.output.class_logits, match, sample.gt_sem, cfg.scene.num_categories)
    l_mask = mask_loss(mask_logits, match, sample.gt_sp_masks, tr.dice_smooth)
    l_kd = kd_loss(result.output.alignment, sample.kd_target, sample.kd_valid)
    total = add(add(scale(l_cls, tr.cls_weight), scale(l_mask, tr.mask_weight)),
                scale(l_kd, tr.kd_weight))
    return {"cls": l_cls, "mask": l_mask, "kd": l_kd, "total": total,
            "match": match, "result": result, "mask_logits": mask_logits}


def _scoped(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def init_stage1_params(cfg: RunConfig) -> dict:
    rng_unet = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    rng_ost = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 2])))
    params = {}
    for k, v in init_unet_params(rng_unet, cfg.encoder).items():
        params[f"unet.{k}"] = v
    for k, v in init_ost_params(
        rng_ost, cfg.ost, cfg.encoder.out_channels, cfg.scene.num_categories
    ).items():
        params[f"ost.{k}"] = v
    return params


def pretrain_step(batch, params, opt: AdamW, cfg: RunConfig, lr: float):
    """One optimizer update over a batch of scenes; returns (new params,
    float losses averaged over the batch)."""
    sums = {"cls": 0.0, "mask": 0.0, "kd": 0.0, "total": 0.0}
    with Tape() as tape:
        parts = []
        for sample in batch:
            out = scene_forward(params, cfg, sample)
            parts.append(out["total"])
            for key in sums:
                sums[key] += out[key].item()
        total = parts[0]
        for p in parts[1:]:
            total = add(total, p)
        if len(parts) > 1:
            total = scale(total, 1.0 / len(parts))
        if not math.isfinite(total.item()):
            raise TrainingDivergedError(
                f"non-finite loss {total.item()} (cls={sums['cls']}, "
                f"mask={sums['mask']}, kd={sums['kd']})"
            )
        tape.backward(total)
        grads = {n: tape.grad(p) for n, p in params.items()}
    new_params = opt.step(params, grads, lr)
    losses = {k: v / len(batch) for k, v in sums.items()}
    return new_params, losses


def pretrain(cfg: RunConfig, samples=None, log_hook=None):
    """Stage-1 training over the configured scene set.

    Returns (params, log_rows, samples); log rows are
    (step, cls, mask, kd, total).
    """
    if samples is None:
        samples = make_dataset(cfg, cfg.n_train_scenes)
    params = init_stage1_params(cfg)
    opt = AdamW(
        beta1=cfg.training.adam_beta1,
        beta2=cfg.training.adam_beta2,
        eps=cfg.training.adam_eps,
        weight_decay=cfg.training.weight_decay,
    )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 3])))
    total_steps = cfg.training.epochs * len(samples)
    log_rows = []
    step = 0
    for _ in range(cfg.training.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.training.accumulate_steps):
            batch = [samples[i] for i in order[start:start + cfg.training.accumulate_steps]]
            lr = cosine_lr(step, total_steps, cfg.training.learning_rate)
            params, losses = pretrain_step(batch, params, opt, cfg, lr)
            row = (step, losses["cls"], losses["mask"], losses["kd"], losses["total"])
            log_rows.append(row)
            if log_hook is not None and step % cfg.training.log_every == 0:
                log_hook(row)
            step += 1
    return params, log_rows, samples


def evaluate_stage1(params, cfg: RunConfig, samples):
    """Held-out matched-instance mask IoU (point level) and matched
    classification accuracy."""
    ious = []
    correct = 0
    matched = 0
    for sample in samples:
        out = scene_forward(params, cfg, sample)
        match = out["match"]
        probs = expit(out["mask_logits"].data)
        pred_cls = out["result"].output.class_logits.data.argmax(axis=1)
        for q, g in zip(match.query_indices, match.gt_indices):
            sp_mask = probs[q] > 0.5
            pred_points = sp_mask[sample.part.assignment]
            gt_points = sample.scene.instance_labels == g
            union = np.logical_or(pred_points, gt_points).sum()
            inter = np.logical_and(pred_points, gt_points).sum()
            ious.append(1.0 if union == 0 else inter / union)
            matched += 1
            if pred_cls[q] == sample.gt_sem[g]:
                correct += 1
    mean_iou = float(np.mean(ious)) if ious else 0.0
    acc = correct / matched if matched else 0.0
    return {"mask_iou": mean_iou, "cls_acc": acc, "n_matched": matched}
