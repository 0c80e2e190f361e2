"""Analytic multiply-accumulate counting for detector variants and
gradient-times-activation attribution of per-object importance.

Counts are derived purely from the configuration and input shape; nothing is
executed. Only multiplies are counted (bias adds, normalizations, and
softmaxes are negligible at these widths); reported FLOPs are 2x MACs.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import QUERY_ALL
from .detector import DetectorConfig
from .pipeline import CrossmodalPipeline, detector_config_dict


@dataclass
class FlopReport:
    components: dict = field(default_factory=dict)  # name -> MACs
    config: dict = field(default_factory=dict)
    input_shape: tuple = ()

    @property
    def total_macs(self):
        return int(sum(self.components.values()))

    @property
    def total_flops(self):
        return 2 * self.total_macs

    def to_dict(self):
        return {
            "components_macs": {k: int(v) for k, v in sorted(self.components.items())},
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "input_shape": list(self.input_shape),
            "config": self.config,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")


def matmul_macs(m, k, n):
    """Multiply-accumulates of an [m,k] x [k,n] product."""
    return m * k * n


def _conv_macs(k, cin, cout, h, w):
    return k * k * cin * cout * h * w


def _tokens(h, w, stride):
    return (h // stride) * (w // stride)


def _deformable_layer_macs(nq, nk, d, heads, scales, points, ffn):
    sample_terms = heads * scales * points
    macs = nk * d * d  # value projection over all key tokens
    macs += nq * d * sample_terms * 3  # offset (2) + weight (1) projections
    macs += nq * sample_terms * (d // heads) * 4  # 4-corner interpolation
    macs += nq * sample_terms * (d // heads)  # weighted mix
    macs += nq * d * d  # output projection
    macs += 2 * nq * d * ffn
    return macs


def _dense_self_attn_layer_macs(n, d, ffn):
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * ffn


def _dense_decoder_layer_macs(q, n, d, ffn):
    self_attn = 4 * q * d * d + 2 * q * q * d
    cross = 2 * q * d * d + 2 * n * d * d + 2 * q * n * d
    return self_attn + cross + 2 * q * d * ffn


def count_flops(cfg: DetectorConfig, input_shape) -> FlopReport:
    """Analytic per-component MAC count for one detector configuration."""
    h, w = input_shape
    if h % 64 or w % 64:
        raise ValueError(f"input shape {input_shape} must be divisible by 64")
    d = cfg.model_dim
    w0, w1, w2, w3 = cfg.backbone_widths
    stage_width = {8: w1, 16: w2, 32: w3}

    backbone = _conv_macs(3, 3, w0, h // 2, w // 2)
    backbone += _conv_macs(3, w0, w0, h // 4, w // 4)
    backbone += _conv_macs(3, w0, w1, h // 8, w // 8)
    backbone += _conv_macs(3, w1, w2, h // 16, w // 16)
    backbone += _conv_macs(3, w2, w3, h // 32, w // 32)
    for s in cfg.scales:
        if s == 64:
            backbone += _conv_macs(3, w3, d, h // 64, w // 64)
        else:
            backbone += _tokens(h, w, s) * stage_width[s] * d

    tokens = {s: _tokens(h, w, s) for s in cfg.scales}
    all_tokens = sum(tokens.values())
    num_scales = len(cfg.scales)
    k = cfg.sampling_points
    heads = cfg.heads
    ffn = cfg.ffn_dim

    encoder = 0
    if cfg.encoder_kind == "dense":
        n = tokens[32]
        for _ in range(cfg.encoder_layers):
            encoder += _dense_self_attn_layer_macs(n, d, ffn)
        memory_tokens, memory_scales = n, 1
    elif cfg.query_stride == QUERY_ALL:
        for _ in range(cfg.encoder_layers):
            encoder += _deformable_layer_macs(all_tokens, all_tokens, d, heads, num_scales, k, ffn)
        memory_tokens, memory_scales = all_tokens, num_scales
    else:
        nq = tokens[cfg.query_stride]
        encoder += _deformable_layer_macs(nq, all_tokens, d, heads, num_scales, k, ffn)
        for _ in range(cfg.encoder_layers - 1):
            encoder += _deformable_layer_macs(nq, nq, d, heads, 1, k, ffn)
        memory_tokens, memory_scales = nq, 1

    q = cfg.num_queries
    decoder = 0
    if cfg.encoder_kind == "dense":
        for _ in range(cfg.decoder_layers):
            decoder += _dense_decoder_layer_macs(q, memory_tokens, d, ffn)
    else:
        for _ in range(cfg.decoder_layers):
            decoder += 4 * q * d * d + 2 * q * q * d  # self-attention
            decoder += _deformable_layer_macs(q, memory_tokens, d, heads, memory_scales, k, ffn)
        decoder += q * d * 4  # reference-point head
        if cfg.box_refinement:
            decoder += cfg.decoder_layers * q * (d * d + d * d + d * 4)

    heads_macs = q * d * cfg.num_class_logits
    heads_macs += q * (d * d + d * d + d * 4)  # box head

    report = FlopReport(
        components={"backbone": backbone, "encoder": encoder, "decoder": decoder, "heads": heads_macs},
        config=detector_config_dict(cfg),
        input_shape=(h, w),
    )
    return report


PROFILE_VARIANTS = ("single_scale", "query_stride_32", "query_stride_16", "query_stride_8", "multi_scale")

DESK_PROFILE_INPUT = (768, 1152)


def desk_profile_config(variant) -> DetectorConfig:
    """Reduced-width configurations used for compute comparisons across the
    encoder variants; the encoder dominates at this input scale."""
    common = dict(
        num_classes=90,
        model_dim=256,
        heads=8,
        ffn_dim=1024,
        sampling_points=4,
        encoder_layers=6,
        decoder_layers=6,
        num_queries=300,
        backbone_widths=(8, 32, 128, 256),
        encoder_kind="deformable",
        box_refinement=True,
    )
    if variant == "single_scale":
        return DetectorConfig(scales=(32,), query_stride=QUERY_ALL, **common)
    if variant == "multi_scale":
        return DetectorConfig(scales=(8, 16, 32, 64), query_stride=QUERY_ALL, **common)
    if variant in ("query_stride_8", "query_stride_16", "query_stride_32"):
        stride = int(variant.rsplit("_", 1)[1])
        return DetectorConfig(scales=(8, 16, 32, 64), query_stride=stride, **common)
    raise ValueError(f"unknown profile variant {variant!r}; choose from {PROFILE_VARIANTS}")


# -- per-region attribution ----------------------------------------------------


SALIENCE_THRESHOLD = 0.9


def scores_from_projection(projection):
    """Positive part of gradient-times-activation per object, max-normalized
    to [0, 1]; scores above 0.9 are flagged salient."""
    grad = projection.grad
    if grad is None:
        warnings.warn("no gradient reached the object projection; attribution is all zeros")
        n = projection.data.shape[0]
        return np.zeros(n), np.zeros(n, dtype=bool)
    raw = np.maximum((grad * projection.data).sum(axis=1), 0.0)
    peak = raw.max()
    if peak == 0.0:
        warnings.warn("zero gradient-times-activation everywhere; attribution is all zeros")
        return raw, np.zeros(raw.size, dtype=bool)
    scores = raw / peak
    return scores, scores > SALIENCE_THRESHOLD


def attribution_scores(vqa_model, token_ids, features, boxes, answer_index):
    """Attribution through the fusion model on explicit object features."""
    from .fusion import TokenSequence

    logits = vqa_model(TokenSequence(token_ids), features, boxes)
    logits[int(answer_index)].backward()
    out = scores_from_projection(vqa_model.objects.last_projection)
    vqa_model.zero_grad()
    return out


def region_attribution(pipeline: CrossmodalPipeline, image, token_ids, answer_index, mode="all"):
    """Importance of each object for one answer logit, through the full
    pipeline forward in the requested mode."""
    logits = pipeline.answer_logits(image, token_ids, mode=mode)
    logits[int(answer_index)].backward()
    out = scores_from_projection(pipeline.vqa.objects.last_projection)
    pipeline.zero_grad()
    return out


def write_attribution_csv(path, boxes, scores, salient):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["object", "cx", "cy", "w", "h", "score", "salient"])
        for i, (box, score, flag) in enumerate(zip(np.asarray(boxes), scores, salient)):
            writer.writerow([i, *[round(float(v), 8) for v in box], round(float(score), 8), int(flag)])
