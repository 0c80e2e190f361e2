"""Optimizer, learning-rate schedule, and the detector / crossmodal training
loops. All loops are seed-deterministic: batch order comes from one seeded
generator and gradient accumulation sums in a fixed order."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .fusion import bce_answer_loss
from .losses import CostWeights, detection_loss
from .pipeline import CrossmodalPipeline
from .tensor import no_grad


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LrSchedule:
    """Linear warmup to the base rate, then linear decay to zero."""

    base_lr: float
    warmup_steps: int
    total_steps: int

    def at(self, step):
        if self.warmup_steps and step <= self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        if self.total_steps <= self.warmup_steps:
            return self.base_lr
        return self.base_lr * max(0.0, (self.total_steps - step) / (self.total_steps - self.warmup_steps))


class AdamW:
    """Decoupled-weight-decay Adam over named parameter groups."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.groups = groups  # [{"params": [(name, tensor)], "lr_mult": float}]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for group in self.groups:
            glr = lr * group.get("lr_mult", 1.0)
            for name, p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                m = self.m.get(name)
                if m is None:
                    m = np.zeros_like(p.data)
                    self.m[name] = m
                    self.v[name] = np.zeros_like(p.data)
                v = self.v[name]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if self.weight_decay:
                    update = update + self.weight_decay * p.data
                p.data = p.data - glr * update


def clip_gradients(params, max_norm):
    if not max_norm:
        return
    total = 0.0
    grads = [p.grad for _, p in params if p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale


class MetricsLog:
    """JSON-lines metric stream; rows are sorted-key so files are
    byte-reproducible for identical runs."""

    def __init__(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.path = Path(path)
        self._fh = open(path, "w")

    def write(self, row):
        self._fh.write(json.dumps(row, sort_keys=True) + "\n")

    def close(self):
        self._fh.close()


def split_indices(n, eval_fraction):
    n_eval = max(1, int(round(n * eval_fraction))) if eval_fraction > 0 else 0
    train = np.arange(0, n - n_eval)
    evals = np.arange(n - n_eval, n)
    return train, evals


def _check_finite(value, step):
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at step {step}")


# -- detector pre-training ----------------------------------------------------


@dataclass
class DetectorTrainConfig:
    steps: int = 400
    batch_size: int = 8
    accumulation_steps: int = 1
    base_lr: float = 2e-3
    backbone_lr_mult: float = 0.5
    warmup_steps: int = 40
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    eval_fraction: float = 0.1
    aux_loss: bool = False
    cost: CostWeights = field(default_factory=CostWeights)


def detector_param_groups(model, cfg: DetectorTrainConfig):
    backbone, rest = [], []
    for name, p in model.named_parameters():
        (backbone if name.startswith("backbone") else rest).append((name, p))
    return [
        {"params": rest, "lr_mult": 1.0},
        {"params": backbone, "lr_mult": cfg.backbone_lr_mult},
    ]


def _detector_sample_loss(model, ds: Dataset, idx, cfg: DetectorTrainConfig):
    ann = ds.annotations[idx]
    boxes = np.asarray(ann["boxes"], dtype=np.float64)
    classes = np.asarray(ann["classes"], dtype=np.int64)
    if cfg.aux_loss:
        sets = model.detect_with_aux(ds.images[idx])
        loss = None
        for det in sets:
            term, _ = detection_loss(det, boxes, classes, cfg.cost)
            loss = term if loss is None else loss + term
        return loss / float(len(sets))
    det = model.detect(ds.images[idx], context_mode="none")
    loss, _ = detection_loss(det, boxes, classes, cfg.cost)
    return loss


def train_detector(model, ds: Dataset, cfg: DetectorTrainConfig, out_dir, seed=0):
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_idx, eval_idx = split_indices(len(ds), cfg.eval_fraction)
    params = list(model.named_parameters())
    optimizer = AdamW(detector_param_groups(model, cfg), weight_decay=cfg.weight_decay)
    schedule = LrSchedule(cfg.base_lr, cfg.warmup_steps, cfg.steps)
    metrics = MetricsLog(out / "metrics.jsonl")
    samples_per_step = cfg.batch_size * cfg.accumulation_steps
    for step in range(1, cfg.steps + 1):
        lr = schedule.at(step)
        batch = rng.choice(train_idx, size=samples_per_step, replace=True)
        step_loss = 0.0
        for idx in batch:
            loss = _detector_sample_loss(model, ds, int(idx), cfg)
            step_loss += loss.item()
            (loss / float(samples_per_step)).backward()
        step_loss /= samples_per_step
        _check_finite(step_loss, step)
        clip_gradients(params, cfg.grad_clip)
        optimizer.step(lr)
        model.zero_grad()
        metrics.write({"step": step, "loss": round(step_loss, 10), "lr": round(lr, 12)})
    metrics.close()
    summary = {"steps": cfg.steps, "final_loss": round(step_loss, 10), "eval": detector_eval(model, ds, eval_idx)}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


def detector_eval(model, ds: Dataset, indices):
    """Matched-pair class accuracy and mean matched IoU on held-out scenes."""
    from .losses import _corners_np, detection_cost_matrix, hungarian_match

    if not len(indices):
        return {}
    correct = 0
    total = 0
    iou_sum = 0.0
    cost_cfg = CostWeights()
    for idx in indices:
        ann = ds.annotations[int(idx)]
        boxes = np.asarray(ann["boxes"], dtype=np.float64)
        classes = np.asarray(ann["classes"], dtype=np.int64)
        with no_grad():
            det = model.detect(ds.images[int(idx)], context_mode="none")
        cost = detection_cost_matrix(det, boxes, classes, cost_cfg)
        match = hungarian_match(cost)
        for gi, qi in match.pairs:
            pred_class = int(np.argmax(det.class_logits.data[qi, : model.cfg.num_classes]))
            correct += int(pred_class == classes[gi])
            a = _corners_np(boxes[gi : gi + 1])[0]
            b = _corners_np(det.boxes.data[qi : qi + 1])[0]
            inter_w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
            inter_h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
            inter = inter_w * inter_h
            union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
            iou_sum += inter / union if union > 0 else 0.0
            total += 1
    return {
        "matched_class_accuracy": round(correct / total, 6) if total else 0.0,
        "mean_matched_iou": round(iou_sum / total, 6) if total else 0.0,
        "eval_scenes": int(len(indices)),
    }


# -- crossmodal training -------------------------------------------------------


@dataclass
class VqaTrainConfig:
    frozen_steps: int = 400
    e2e_steps: int = 300
    batch_size: int = 8
    accumulation_steps: int = 1
    base_lr: float = 2e-3
    detector_lr_mult: float = 0.25
    backbone_lr_mult: float = 0.05
    gated_class_lr_mult: float = 10.0
    warmup_steps: int = 40
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    eval_fraction: float = 0.1
    eval_every: int = 0
    gate_threshold: float = 0.5


def vqa_param_groups(pipeline: CrossmodalPipeline, cfg: VqaTrainConfig, gated):
    language, det_body, backbone, class_head = [], [], [], []
    for name, p in pipeline.named_parameters():
        if name.startswith("detector.backbone"):
            backbone.append((name, p))
        elif name.startswith("detector.class_head"):
            class_head.append((name, p))
        elif name.startswith("detector"):
            det_body.append((name, p))
        else:
            language.append((name, p))
    class_mult = cfg.detector_lr_mult * (cfg.gated_class_lr_mult if gated else 1.0)
    return [
        {"params": language, "lr_mult": 1.0},
        {"params": det_body, "lr_mult": cfg.detector_lr_mult},
        {"params": backbone, "lr_mult": cfg.backbone_lr_mult},
        {"params": class_head, "lr_mult": class_mult},
    ]


def _one_hot(answer_id, n):
    t = np.zeros(n)
    t[answer_id] = 1.0
    return t


def evaluate_vqa(pipeline: CrossmodalPipeline, ds: Dataset, indices, mode="all"):
    correct = 0
    fwd_mode = "gated" if mode == "gated" else "all"
    for idx in indices:
        ann = ds.annotations[int(idx)]
        with no_grad():
            logits = pipeline.answer_logits(ds.images[int(idx)], ann["question_ids"], mode=fwd_mode)
        correct += int(int(np.argmax(logits.data)) == ann["answer_id"])
    return correct / len(indices) if len(indices) else 0.0


def chance_accuracy(ds: Dataset, indices):
    """Majority-answer frequency on the given split."""
    counts = np.zeros(len(ds.answers), dtype=np.int64)
    for idx in indices:
        counts[ds.annotations[int(idx)]["answer_id"]] += 1
    return counts.max() / counts.sum() if counts.sum() else 0.0


def train_vqa(pipeline: CrossmodalPipeline, ds: Dataset, cfg: VqaTrainConfig, mode, out_dir, seed=0):
    """Train the crossmodal model.

    mode "frozen": cached detector features only. mode "e2e"/"gated": a
    cached-feature phase first, then full-graph steps (with confidence
    gating and the boosted class-layer rate in gated mode).
    """
    if mode not in ("frozen", "e2e", "gated"):
        raise ValueError(f"unknown training mode {mode!r}")
    pipeline.gate_threshold = cfg.gate_threshold
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_idx, eval_idx = split_indices(len(ds), cfg.eval_fraction)
    phases = [("frozen", cfg.frozen_steps)]
    if mode in ("e2e", "gated"):
        phases.append((mode, cfg.e2e_steps))
    total_steps = sum(s for _, s in phases)
    schedule = LrSchedule(cfg.base_lr, cfg.warmup_steps, total_steps)
    params = list(pipeline.named_parameters())
    optimizer = AdamW(vqa_param_groups(pipeline, cfg, gated=(mode == "gated")), weight_decay=cfg.weight_decay)
    metrics = MetricsLog(out / "metrics.jsonl")
    samples_per_step = cfg.batch_size * cfg.accumulation_steps

    num_answers = pipeline.fusion_cfg.num_answers
    step = 0
    first_step_class_grad = None
    for phase, steps in phases:
        cache = None
        if phase == "frozen":
            cache = {}
            for idx in train_idx:
                cache[int(idx)] = pipeline.extract_features(ds.images[int(idx)])
        for _ in range(steps):
            step += 1
            lr = schedule.at(step)
            batch = rng.choice(train_idx, size=samples_per_step, replace=True)
            step_loss = 0.0
            for idx in batch:
                ann = ds.annotations[int(idx)]
                if phase == "frozen":
                    feats, boxes = cache[int(idx)]
                    logits = pipeline.answer_from_features(ann["question_ids"], feats, boxes)
                else:
                    fwd = "gated" if phase == "gated" else "all"
                    logits = pipeline.answer_logits(ds.images[int(idx)], ann["question_ids"], mode=fwd)
                loss = bce_answer_loss(logits, _one_hot(ann["answer_id"], num_answers))
                step_loss += loss.item()
                (loss / float(samples_per_step)).backward()
            step_loss /= samples_per_step
            _check_finite(step_loss, step)
            if phase == "gated" and first_step_class_grad is None:
                grads = [
                    float(np.abs(p.grad).max())
                    for name, p in params
                    if name.startswith("detector.class_head") and p.grad is not None
                ]
                first_step_class_grad = max(grads) if grads else 0.0
            clip_gradients(params, cfg.grad_clip)
            optimizer.step(lr)
            pipeline.zero_grad()
            metrics.write({"step": step, "loss": round(step_loss, 10), "lr": round(lr, 12), "phase": phase})
            if cfg.eval_every and step % cfg.eval_every == 0:
                acc = evaluate_vqa(pipeline, ds, eval_idx, mode=mode)
                metrics.write({"step": step, "accuracy": round(acc, 6)})
    metrics.close()
    final_acc = evaluate_vqa(pipeline, ds, eval_idx, mode=mode)
    summary = {
        "mode": mode,
        "seed": seed,
        "steps": total_steps,
        "final_loss": round(step_loss, 10),
        "accuracy": round(final_acc, 6),
        "chance_accuracy": round(chance_accuracy(ds, eval_idx), 6),
        "eval_scenes": int(len(eval_idx)),
    }
    if first_step_class_grad is not None:
        summary["first_gated_step_class_grad_max"] = first_step_class_grad
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary
