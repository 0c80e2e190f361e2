"""Experiment tasks behind the CLI verbs. Every task is a pure function of
(config dict, seed, output directory): identical inputs reproduce identical
artifact bytes."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .data import SceneSpec, generate_dataset, load_dataset, num_classes
from .detector import DetectorConfig, feature_width
from .fusion import FusionConfig
from .losses import CostWeights
from .pipeline import (
    CrossmodalPipeline,
    detector_config_from_dict,
    load_detector,
    save_detector,
)
from .profiler import (
    DESK_PROFILE_INPUT,
    PROFILE_VARIANTS,
    count_flops,
    desk_profile_config,
    region_attribution,
    write_attribution_csv,
)
from .regions import (
    ExtractionConfig,
    calibrate_threshold,
    clamped_count,
    region_histogram,
    write_histogram_csv,
    write_stats_json,
)
from .serialize import load_tensor, save_tensor
from .tensor import no_grad
from .training import (
    DetectorTrainConfig,
    VqaTrainConfig,
    train_detector,
    train_vqa,
)
from .detector import DetectionModel


class ConfigError(ValueError):
    pass


def _build(dc_cls, payload, what):
    payload = dict(payload or {})
    try:
        return dc_cls(**payload)
    except (TypeError, ValueError) as exc:
        valid = ", ".join(f.name for f in dataclasses.fields(dc_cls))
        raise ConfigError(f"invalid {what} config: {exc} (valid fields: {valid})") from exc


def _detector_train_config(payload):
    payload = dict(payload or {})
    cost = payload.pop("cost", None)
    cfg = _build(DetectorTrainConfig, payload, "detector training")
    if cost is not None:
        cfg.cost = _build(CostWeights, cost, "matching cost")
    return cfg


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def task_gen_data(cfg, seed, out_dir):
    spec = _build(SceneSpec, cfg.get("scene_spec"), "scene spec")
    n = int(cfg.get("scenes", 1000))
    ds = generate_dataset(spec, n, seed, out_dir=out_dir)
    summary = {"task": "gen-data", "scenes": len(ds), "seed": seed}
    _write_json(Path(out_dir) / "summary.json", summary)
    return summary


def task_train_detector(cfg, seed, out_dir):
    ds = load_dataset(cfg["dataset"])
    det_payload = dict(cfg.get("detector") or {})
    det_payload.setdefault("num_classes", num_classes())
    det_cfg = _build(DetectorConfig, det_payload, "detector")
    cost_kind = cfg.get("class_loss")
    if cost_kind:
        det_cfg.class_loss = cost_kind
    train_cfg = _detector_train_config(cfg.get("train"))
    train_cfg.cost.class_loss_kind = det_cfg.class_loss
    model = DetectionModel(det_cfg, rng=np.random.default_rng(seed))
    summary = train_detector(model, ds, train_cfg, out_dir, seed=seed)
    save_detector(model, Path(out_dir) / "detector")
    summary = {"task": "train-detector", **summary}
    _write_json(Path(out_dir) / "summary.json", summary)
    return summary


def task_extract(cfg, seed, out_dir):
    ds = load_dataset(cfg["dataset"])
    model = load_detector(cfg["checkpoint"])
    ext = _build(ExtractionConfig, cfg.get("extraction"), "extraction")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(ds)
    q = model.cfg.num_queries
    feats = None
    boxes = np.zeros((n, q, 4))
    confs = np.zeros((n, q))
    counts = np.zeros(n, dtype=np.int64)
    for i in range(n):
        with no_grad():
            det = model.detect(ds.images[i])
        if feats is None:
            feats = np.zeros((n, q, det.features.data.shape[1]))
        feats[i] = det.features.data
        boxes[i] = det.boxes.data
        confs[i] = det.confidence.data
        counts[i] = clamped_count(det.confidence.data, ext)
    save_tensor(out / "features.tnsr", feats)
    save_tensor(out / "boxes.tnsr", boxes)
    save_tensor(out / "confidences.tnsr", confs)
    stats = region_histogram(counts, ext, threshold=ext.threshold)
    write_histogram_csv(stats, out / "histogram.csv")
    write_stats_json(stats, out / "stats.json")
    summary = {"task": "extract", **stats.to_summary(), "feature_width": int(feats.shape[2])}
    _write_json(out / "summary.json", summary)
    return summary


def task_calibrate(cfg, seed, out_dir):
    ext = _build(ExtractionConfig, cfg.get("extraction"), "extraction")
    if "confidences" in cfg:
        confs = load_tensor(cfg["confidences"])
        score_lists = [confs[i] for i in range(confs.shape[0])]
    else:
        ds = load_dataset(cfg["dataset"])
        model = load_detector(cfg["checkpoint"])
        score_lists = []
        for i in range(len(ds)):
            with no_grad():
                det = model.detect(ds.images[i])
            score_lists.append(det.confidence.data.copy())
    target = int(cfg["target_total"])
    threshold, deviation = calibrate_threshold(score_lists, target, ext)
    ext.threshold = threshold
    counts = np.array([clamped_count(s, ext) for s in score_lists], dtype=np.int64)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats = region_histogram(counts, ext, threshold=threshold)
    write_histogram_csv(stats, out / "histogram.csv")
    write_stats_json(stats, out / "stats.json")
    summary = {
        "task": "calibrate",
        "threshold": threshold,
        "deviation": int(deviation),
        "target_total": target,
        **stats.to_summary(),
    }
    _write_json(out / "summary.json", summary)
    return summary


def task_train_vqa(cfg, mode, seed, out_dir):
    ds = load_dataset(cfg["dataset"])
    detector = load_detector(cfg["detector_checkpoint"])
    det_cfg = detector.cfg
    if "context_mode" in cfg:
        det_cfg = dataclasses.replace(det_cfg, context_mode=cfg["context_mode"])
    fusion_payload = dict(cfg.get("fusion") or {})
    fusion_payload.setdefault("visual_dim", feature_width(det_cfg))
    fusion_payload.setdefault("num_answers", len(ds.answers))
    fusion_payload.setdefault("vocab_size", len(ds.vocab))
    fusion_cfg = _build(FusionConfig, fusion_payload, "fusion")
    train_cfg = _build(VqaTrainConfig, cfg.get("train"), "vqa training")
    pipeline = CrossmodalPipeline(det_cfg, fusion_cfg, seed=seed)
    pipeline.detector.load_state_dict(detector.state_dict())
    pipeline.detector.cfg = det_cfg
    summary = train_vqa(pipeline, ds, train_cfg, mode, out_dir, seed=seed)
    pipeline.save(Path(out_dir) / "vqa")
    summary = {"task": f"train-vqa:{mode}", **summary}
    _write_json(Path(out_dir) / "summary.json", summary)
    return summary


def task_profile(cfg, seed, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    input_shape = tuple(cfg.get("input_shape", DESK_PROFILE_INPUT))
    reports = {}
    if "configs" in cfg:
        items = {name: detector_config_from_dict(d) for name, d in cfg["configs"].items()}
    else:
        variants = cfg.get("variants", list(PROFILE_VARIANTS))
        items = {name: desk_profile_config(name) for name in variants}
    for name, det_cfg in items.items():
        report = count_flops(det_cfg, input_shape)
        report.save(out / f"flops_{name}.json")
        reports[name] = report.total_flops
    summary = {"task": "profile", "input_shape": list(input_shape), "total_flops": reports}
    _write_json(out / "summary.json", summary)
    return summary


def task_attribute(cfg, seed, out_dir):
    ds = load_dataset(cfg["dataset"])
    pipeline = CrossmodalPipeline.load(cfg["vqa_checkpoint"])
    index = int(cfg.get("scene_index", 0))
    ann = ds.annotations[index]
    mode = cfg.get("mode", "all")
    if "answer_index" in cfg:
        answer_index = int(cfg["answer_index"])
    else:
        with no_grad():
            logits = pipeline.answer_logits(ds.images[index], ann["question_ids"], mode=mode)
        answer_index = int(np.argmax(logits.data))
    scores, salient = region_attribution(pipeline, ds.images[index], ann["question_ids"], answer_index, mode=mode)
    det = pipeline.detector.detect(ds.images[index])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if mode == "gated":
        from .fusion import threshold_mask_gating

        _, gated_boxes, kept = threshold_mask_gating(det, pipeline.gate_threshold)
        boxes = gated_boxes.data
    else:
        boxes = det.boxes.data
    write_attribution_csv(out / "attribution.csv", boxes, scores, salient)
    summary = {
        "task": "attribute",
        "scene_index": index,
        "question": ann["question"],
        "answer_index": answer_index,
        "answer": ds.answers[answer_index],
        "salient_objects": int(np.asarray(salient).sum()),
    }
    _write_json(out / "summary.json", summary)
    return summary


def run_experiment(task, cfg, seed, out_dir, mode=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if task == "gen-data":
        return task_gen_data(cfg, seed, out)
    if task == "train-detector":
        return task_train_detector(cfg, seed, out)
    if task == "extract":
        return task_extract(cfg, seed, out)
    if task == "calibrate":
        return task_calibrate(cfg, seed, out)
    if task == "train-vqa":
        return task_train_vqa(cfg, mode or "frozen", seed, out)
    if task == "profile":
        return task_profile(cfg, seed, out)
    if task == "attribute":
        return task_attribute(cfg, seed, out)
    raise ConfigError(f"unknown task {task!r}")
