"""Crossmodal question answering head: object/token embedding, joint
transformer encoding over the concatenated sequence, answer MLP, binary
cross-entropy answer loss, and confidence-gated object selection.

The gate keeps objects whose confidence clears the threshold and multiplies
their features by the (graph-connected) confidence value, so the keep/drop
decision still transmits gradient to the class-prediction layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, TransformerEncoderLayer
from .detector import DetectionSet
from .nn import Embedding, Linear, Module, Norm
from .tensor import Tensor, add, bce_with_logits, clip, concat, mul, relu, reshape, stack


@dataclass
class FusionConfig:
    visual_dim: int  # per-object feature width incl. any appended context
    num_answers: int
    vocab_size: int
    lm_dim: int = 768
    lm_layers: int = 12
    lm_heads: int = 8
    lm_ffn_dim: int = 3072
    max_text_len: int = 32
    num_segments: int = 2

    def __post_init__(self):
        if self.lm_dim % self.lm_heads:
            raise ValueError(f"lm_dim {self.lm_dim} not divisible by lm_heads {self.lm_heads}")


@dataclass
class TokenSequence:
    ids: np.ndarray
    segments: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.segments is None:
            self.segments = np.zeros_like(self.ids)
        else:
            self.segments = np.asarray(self.segments, dtype=np.int64)


@dataclass
class MultimodalSequence:
    embeddings: Tensor  # [T+Q, D_lm], text rows first
    num_text: int
    num_objects: int
    key_mask: np.ndarray | None = None  # True = attend


def position_features(boxes):
    """Seven geometry channels per box: x1, y1, x2, y2, w, h, w*h.

    Corner coordinates are clipped to [0, 1] so every component stays
    normalized.
    """
    cx, cy, w, h = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    x1 = clip(cx - w * 0.5, 0.0, 1.0)
    y1 = clip(cy - h * 0.5, 0.0, 1.0)
    x2 = clip(cx + w * 0.5, 0.0, 1.0)
    y2 = clip(cy + h * 0.5, 0.0, 1.0)
    return stack([x1, y1, x2, y2, w, h, mul(w, h)], axis=1)


class ObjectEmbedder(Module):
    """Feature and box-geometry projections summed, then layer-normalized.

    Keeps a handle on the most recent feature projection so attribution can
    tap its activations and gradients.
    """

    def __init__(self, cfg: FusionConfig, rng):
        self.feature_proj = Linear(cfg.visual_dim, cfg.lm_dim, rng)
        self.position_proj = Linear(7, cfg.lm_dim, rng)
        self.norm = Norm(cfg.lm_dim)
        self.last_projection = None

    def __call__(self, features, boxes):
        if features.data.shape[1] != self.feature_proj.weight.data.shape[0]:
            raise ValueError(
                f"object feature width {features.data.shape[1]} != configured "
                f"{self.feature_proj.weight.data.shape[0]}"
            )
        projected = self.feature_proj(features)
        projected.retain_grad()
        self.last_projection = projected
        return self.norm(add(projected, self.position_proj(position_features(boxes))))


class TokenEmbedder(Module):
    """Sum of word, trained positional, and segment embeddings per token."""

    def __init__(self, cfg: FusionConfig, rng):
        self.word = Embedding(cfg.vocab_size, cfg.lm_dim, rng)
        self.position = Embedding(cfg.max_text_len, cfg.lm_dim, rng)
        self.segment = Embedding(cfg.num_segments, cfg.lm_dim, rng)
        self.max_len = cfg.max_text_len

    def __call__(self, seq: TokenSequence):
        n = seq.ids.size
        if n > self.max_len:
            raise ValueError(f"sequence length {n} exceeds max_text_len {self.max_len}")
        return add(add(self.word(seq.ids), self.position(np.arange(n))), self.segment(seq.segments))


class CrossmodalEncoder(Module):
    def __init__(self, cfg: FusionConfig, rng):
        acfg = AttentionConfig(
            model_dim=cfg.lm_dim, heads=cfg.lm_heads, ffn_dim=cfg.lm_ffn_dim, sampling_points=1, num_scales=1
        )
        self.layers = [TransformerEncoderLayer(acfg, rng) for _ in range(cfg.lm_layers)]

    def __call__(self, x, key_mask=None):
        for layer in self.layers:
            x = layer(x, key_mask=key_mask)
        return x


class AnswerHead(Module):
    """Two-layer MLP over the pooled (first text position) representation."""

    def __init__(self, cfg: FusionConfig, rng):
        self.fc1 = Linear(cfg.lm_dim, cfg.lm_dim, rng)
        self.fc2 = Linear(cfg.lm_dim, cfg.num_answers, rng)

    def __call__(self, encoded):
        pooled = encoded[0:1]
        return self.fc2(relu(self.fc1(pooled)))[0]


def bce_answer_loss(logits, targets):
    """Mean binary cross-entropy with logits over the answer vocabulary."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.min() < 0 or targets.max() > 1:
        raise ValueError("answer targets must lie in [0, 1]")
    return bce_with_logits(logits, Tensor(targets)).mean()


def threshold_mask_gating(det: DetectionSet, threshold=0.5):
    """Confidence-gated object selection.

    Objects with confidence above the threshold are kept and their features
    multiplied by the confidence value so the classifier keeps receiving
    gradient; if nothing clears the threshold the single most confident
    object is kept.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"gating threshold {threshold} outside (0, 1)")
    conf = det.confidence.data
    keep = np.flatnonzero(conf > threshold)
    if keep.size == 0:
        keep = np.array([int(np.argmax(conf))], dtype=np.int64)
    gate = reshape(det.confidence[keep], (keep.size, 1))
    return mul(det.features[keep], gate), det.boxes[keep], keep


class VqaModel(Module):
    """Joint encoder over text and object embeddings with an answer head."""

    def __init__(self, cfg: FusionConfig, rng=None, seed=0):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.cfg = cfg
        self.objects = ObjectEmbedder(cfg, rng)
        self.tokens = TokenEmbedder(cfg, rng)
        self.encoder = CrossmodalEncoder(cfg, rng)
        self.head = AnswerHead(cfg, rng)

    def build_sequence(self, seq: TokenSequence, features, boxes) -> MultimodalSequence:
        text = self.tokens(seq)
        objs = self.objects(features, boxes)
        return MultimodalSequence(
            embeddings=concat([text, objs], axis=0),
            num_text=text.data.shape[0],
            num_objects=objs.data.shape[0],
        )

    def __call__(self, seq: TokenSequence, features, boxes):
        mm = self.build_sequence(seq, features, boxes)
        encoded = self.encoder(mm.embeddings, key_mask=mm.key_mask)
        return self.head(encoded)
