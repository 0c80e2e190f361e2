"""Detector + language model glued into one trainable pipeline."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .detector import DetectionModel, DetectorConfig, feature_width
from .fusion import FusionConfig, TokenSequence, VqaModel, threshold_mask_gating
from .nn import Module
from .serialize import load_tensor_dict, save_tensor_dict
from .tensor import Tensor, no_grad


class CrossmodalPipeline(Module):
    """Detection followed by joint text/object encoding and answer scoring.

    Modes:
      "all"    every detector prediction feeds the language model, full graph;
      "gated"  confidence-gated subset with gradient-carrying gate values;
      "frozen" detector runs without a graph and its outputs are detached.
    """

    def __init__(self, det_cfg: DetectorConfig, fusion_cfg: FusionConfig, seed=0):
        if fusion_cfg.visual_dim != feature_width(det_cfg):
            raise ValueError(
                f"fusion visual_dim {fusion_cfg.visual_dim} != detector feature width "
                f"{feature_width(det_cfg)} (context mode {det_cfg.context_mode.value})"
            )
        rng = np.random.default_rng(seed)
        self.det_cfg = det_cfg
        self.fusion_cfg = fusion_cfg
        self.detector = DetectionModel(det_cfg, rng=rng)
        self.vqa = VqaModel(fusion_cfg, rng=rng)
        self.gate_threshold = 0.5

    def extract_features(self, image):
        """Graph-free detector outputs for cached-feature training."""
        with no_grad():
            det = self.detector.detect(image)
        return det.features.data.copy(), det.boxes.data.copy()

    def answer_logits(self, image, token_ids, mode="all"):
        if mode == "frozen":
            features, boxes = self.extract_features(image)
            return self.answer_from_features(token_ids, features, boxes)
        det = self.detector.detect(image)
        if mode == "gated":
            features, boxes, _ = threshold_mask_gating(det, self.gate_threshold)
        elif mode == "all":
            features, boxes = det.features, det.boxes
        else:
            raise ValueError(f"unknown pipeline mode {mode!r}")
        return self.vqa(TokenSequence(token_ids), features, boxes)

    def answer_from_features(self, token_ids, features, boxes):
        features = features if isinstance(features, Tensor) else Tensor(features)
        boxes = boxes if isinstance(boxes, Tensor) else Tensor(boxes)
        return self.vqa(TokenSequence(token_ids), features, boxes)

    # -- persistence --------------------------------------------------------

    def save(self, path_stem):
        stem = Path(path_stem)
        save_tensor_dict(stem.with_suffix(".tnsr"), self.state_dict())
        cfg = {
            "detector": detector_config_dict(self.det_cfg),
            "fusion": asdict(self.fusion_cfg),
            "gate_threshold": self.gate_threshold,
        }
        stem.with_suffix(".json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path_stem):
        stem = Path(path_stem)
        cfg = json.loads(stem.with_suffix(".json").read_text())
        pipe = cls(
            detector_config_from_dict(cfg["detector"]),
            FusionConfig(**cfg["fusion"]),
        )
        pipe.gate_threshold = cfg.get("gate_threshold", 0.5)
        pipe.load_state_dict(load_tensor_dict(stem.with_suffix(".tnsr")))
        return pipe


def detector_config_dict(cfg: DetectorConfig) -> dict:
    d = asdict(cfg)
    d["context_mode"] = cfg.context_mode.value
    d["scales"] = list(cfg.scales)
    d["backbone_widths"] = list(cfg.backbone_widths)
    return d


def detector_config_from_dict(d: dict) -> DetectorConfig:
    return DetectorConfig(**d)


def save_detector(model: DetectionModel, path_stem):
    stem = Path(path_stem)
    save_tensor_dict(stem.with_suffix(".tnsr"), model.state_dict())
    stem.with_suffix(".json").write_text(
        json.dumps(detector_config_dict(model.cfg), sort_keys=True, indent=2) + "\n"
    )


def load_detector(path_stem) -> DetectionModel:
    stem = Path(path_stem)
    cfg = detector_config_from_dict(json.loads(stem.with_suffix(".json").read_text()))
    model = DetectionModel(cfg)
    model.load_state_dict(load_tensor_dict(stem.with_suffix(".tnsr")))
    return model
