"""Set-prediction detector: convolutional backbone stub, encoder (dense or
scalable deformable), query decoder, class/box heads, iterative box
refinement, and global-context feature augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .attention import (
    QUERY_ALL,
    AttentionConfig,
    DeformableAttention,
    DenseEncoder,
    FeatureMapSet,
    FeedForward,
    MultiHeadAttention,
    ScalableEncoder,
    TransformerDecoderLayer,
    flatten_map,
    sinusoidal_position_encoding,
)
from .nn import MLP, Linear, Module, Norm, parameter
from .tensor import Tensor, add, concat, conv2d, inverse_sigmoid, relu, reshape, sigmoid, softmax, stack

CROSS_ENTROPY = "cross_entropy"
FOCAL = "focal"

BACKBONE_STRIDES = (8, 16, 32, 64)


class ConfigurationError(ValueError):
    pass


class ContextMode(Enum):
    NONE = "none"
    BACKBONE = "backbone"
    PROJECTED_BACKBONE = "projected_backbone"
    ENCODER = "encoder"


@dataclass
class DetectorConfig:
    num_classes: int
    model_dim: int = 256
    heads: int = 8
    ffn_dim: int = 1024
    sampling_points: int = 4
    encoder_kind: str = "deformable"  # "deformable" | "dense"
    query_stride: object = QUERY_ALL  # stride int or QUERY_ALL
    scales: tuple = (8, 16, 32, 64)
    encoder_layers: int = 6
    decoder_layers: int = 6
    num_queries: int = 100
    class_loss: str = CROSS_ENTROPY
    box_refinement: bool = True
    backbone_widths: tuple = (64, 256, 1024, 2048)
    context_mode: ContextMode = ContextMode.NONE

    def __post_init__(self):
        if isinstance(self.context_mode, str):
            self.context_mode = ContextMode(self.context_mode)
        self.scales = tuple(self.scales)
        self.backbone_widths = tuple(self.backbone_widths)
        if any(s not in BACKBONE_STRIDES for s in self.scales):
            raise ConfigurationError(f"scales must be drawn from {BACKBONE_STRIDES}, got {self.scales}")
        if len(self.backbone_widths) != 4:
            raise ConfigurationError("backbone_widths must have 4 entries")
        if self.encoder_kind not in ("deformable", "dense"):
            raise ConfigurationError(f"unknown encoder kind {self.encoder_kind!r}")
        if self.encoder_kind == "dense" and 32 not in self.scales:
            raise ConfigurationError("dense encoder requires stride 32 in scales")
        if self.class_loss not in (CROSS_ENTROPY, FOCAL):
            raise ConfigurationError(f"unknown class loss {self.class_loss!r}")
        if self.encoder_kind == "deformable" and self.query_stride != QUERY_ALL:
            if self.query_stride not in self.scales:
                raise ConfigurationError(
                    f"query_stride {self.query_stride} not in configured scales {self.scales}"
                )

    @property
    def num_class_logits(self):
        # cross-entropy adds an explicit no-object class; focal scores each
        # real class with an independent sigmoid
        return self.num_classes + 1 if self.class_loss == CROSS_ENTROPY else self.num_classes

    @property
    def attention(self):
        return AttentionConfig(
            model_dim=self.model_dim,
            heads=self.heads,
            ffn_dim=self.ffn_dim,
            sampling_points=self.sampling_points,
            num_scales=len(self.scales),
        )


def context_width(cfg: DetectorConfig) -> int:
    mode = cfg.context_mode
    if mode == ContextMode.NONE:
        return 0
    if mode == ContextMode.BACKBONE:
        return cfg.backbone_widths[-1]
    return cfg.model_dim


def feature_width(cfg: DetectorConfig) -> int:
    return cfg.model_dim + context_width(cfg)


@dataclass
class DetectionSet:
    """Fixed-size set of per-query outputs for one image."""

    features: Tensor  # [Q, D (+context)]
    class_logits: Tensor  # [Q, C(+1)]
    boxes: Tensor  # [Q, 4] normalized (cx, cy, w, h)
    confidence: Tensor  # [Q]

    @property
    def num_detections(self):
        return self.features.data.shape[0]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return DetectionSet(
            features=self.features[idx],
            class_logits=self.class_logits[idx],
            boxes=self.boxes[idx],
            confidence=self.confidence[idx],
        )


@dataclass
class ContextSources:
    backbone_map: Tensor | None = None
    projected_map: Tensor | None = None
    encoder_tokens: Tensor | None = None


def confidence_from_logits(class_logits, class_loss_kind):
    """Max real-class probability: softmax sans no-object for cross-entropy
    models, max sigmoid for focal models."""
    if class_loss_kind == CROSS_ENTROPY:
        probs = softmax(class_logits, axis=-1)
        return probs[:, : class_logits.data.shape[1] - 1].max(axis=1)
    return sigmoid(class_logits).max(axis=1)


def append_global_context(det: DetectionSet, sources: ContextSources, mode: ContextMode) -> DetectionSet:
    """Concatenate a spatial average pool of the selected source onto every
    per-object feature vector. NONE is the identity."""
    if mode == ContextMode.NONE:
        return det
    if mode == ContextMode.BACKBONE:
        source = sources.backbone_map
    elif mode == ContextMode.PROJECTED_BACKBONE:
        source = sources.projected_map
    else:
        source = sources.encoder_tokens
    if source is None:
        raise ConfigurationError(f"context mode {mode.value} requires a source map that was not provided")
    tokens = flatten_map(source) if source.data.ndim == 3 else source
    ctx = tokens.mean(axis=0, keepdims=True)
    rows = ctx[np.zeros(det.num_detections, dtype=np.int64)]
    return DetectionSet(
        features=concat([det.features, rows], axis=1),
        class_logits=det.class_logits,
        boxes=det.boxes,
        confidence=det.confidence,
    )


class BackboneStub(Module):
    """Small strided convolutional stack standing in for a deep backbone.

    Produces feature maps at strides 8/16/32 (and 64 through one extra
    stride-2 convolution), each projected to the model width.
    """

    def __init__(self, cfg: DetectorConfig, rng):
        w0, w1, w2, w3 = cfg.backbone_widths
        d = cfg.model_dim
        self.cfg = cfg
        self.conv1_w = parameter(_conv_init(rng, 3, 3, w0))
        self.conv1_b = parameter(np.zeros(w0))
        self.conv2_w = parameter(_conv_init(rng, 3, w0, w0))
        self.conv2_b = parameter(np.zeros(w0))
        self.conv3_w = parameter(_conv_init(rng, 3, w0, w1))
        self.conv3_b = parameter(np.zeros(w1))
        self.conv4_w = parameter(_conv_init(rng, 3, w1, w2))
        self.conv4_b = parameter(np.zeros(w2))
        self.conv5_w = parameter(_conv_init(rng, 3, w2, w3))
        self.conv5_b = parameter(np.zeros(w3))
        stage_width = {8: w1, 16: w2, 32: w3}
        self.projections = [
            Linear(stage_width[s], d, rng) for s in cfg.scales if s != 64
        ]
        self.extra_w = parameter(_conv_init(rng, 3, w3, d)) if 64 in cfg.scales else None
        self.extra_b = parameter(np.zeros(d)) if 64 in cfg.scales else None

    def __call__(self, image) -> FeatureMapSet:
        h, w = image.data.shape[:2]
        if h % 64 or w % 64:
            raise ValueError(f"image extent {h}x{w} must be divisible by 64")
        x = relu(conv2d(image, self.conv1_w, self.conv1_b, stride=2, padding=1))
        x = relu(conv2d(x, self.conv2_w, self.conv2_b, stride=2, padding=1))
        c8 = relu(conv2d(x, self.conv3_w, self.conv3_b, stride=2, padding=1))
        c16 = relu(conv2d(c8, self.conv4_w, self.conv4_b, stride=2, padding=1))
        c32 = relu(conv2d(c16, self.conv5_w, self.conv5_b, stride=2, padding=1))
        stage = {8: c8, 16: c16, 32: c32}
        maps = []
        proj_iter = iter(self.projections)
        for s in self.cfg.scales:
            if s == 64:
                maps.append(relu(conv2d(c32, self.extra_w, self.extra_b, stride=2, padding=1)))
            else:
                src = stage[s]
                mh, mw, mc = src.data.shape
                proj = next(proj_iter)
                maps.append(reshape(proj(reshape(src, (mh * mw, mc))), (mh, mw, self.cfg.model_dim)))
        return FeatureMapSet(maps, list(self.cfg.scales), source_map=c32)


def _conv_init(rng, k, cin, cout):
    fan = k * k * cin
    return rng.normal(0.0, np.sqrt(2.0 / fan), size=(k, k, cin, cout))


class BoxHead(Module):
    """Three affine layers with nonlinearities; final sigmoid keeps the
    (cx, cy, w, h) output normalized."""

    def __init__(self, dim, rng):
        self.mlp = MLP([dim, dim, dim, 4], rng)

    def __call__(self, x):
        return sigmoid(self.mlp(x))


def refine_step(prev_boxes, delta):
    """One refinement update: add a delta in inverse-sigmoid space."""
    return sigmoid(add(inverse_sigmoid(prev_boxes), delta))


def iterative_box_refinement(layer_outputs, delta_heads, initial_boxes):
    """Chain per-layer box deltas; the running estimate is detached between
    layers so gradient reaches each layer only through its own delta."""
    boxes = initial_boxes
    per_layer = []
    for x, head in zip(layer_outputs, delta_heads):
        boxes = refine_step(boxes, head(x))
        per_layer.append(boxes)
        boxes = boxes.detach()
    return per_layer


class DeformableDecoderLayer(Module):
    def __init__(self, cfg: AttentionConfig, num_memory_scales, rng):
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.cross_attn = DeformableAttention(cfg, num_memory_scales, rng)
        self.norm1 = Norm(cfg.model_dim)
        self.norm2 = Norm(cfg.model_dim)
        self.norm3 = Norm(cfg.model_dim)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_dim, rng)

    def __call__(self, x, reference_points, memory_maps):
        y = self.norm1(x)
        x = add(x, self.self_attn(y, y, y))
        y = self.norm2(x)
        normed = [self.norm2(m) for m in memory_maps]
        x = add(x, self.cross_attn(y, reference_points, normed))
        return add(x, self.ffn(self.norm3(x)))


class DeformableDecoder(Module):
    """Query-based decoder sampling the encoded maps around per-query
    reference points, optionally refining boxes layer by layer."""

    def __init__(self, cfg: DetectorConfig, num_memory_scales, rng):
        d = cfg.model_dim
        acfg = cfg.attention
        self.cfg = cfg
        self.query_embed = parameter(rng.normal(0.0, 0.5, size=(cfg.num_queries, d)))
        self.ref_head = Linear(d, 4, rng)
        self.layers = [
            DeformableDecoderLayer(acfg, num_memory_scales, rng) for _ in range(cfg.decoder_layers)
        ]
        self.delta_heads = (
            [MLP([d, d, d, 4], rng, final_init="zeros") for _ in range(cfg.decoder_layers)]
            if cfg.box_refinement
            else None
        )

    def __call__(self, memory: FeatureMapSet):
        x = self.query_embed
        boxes = sigmoid(self.ref_head(self.query_embed))
        outputs = []
        layer_boxes = []
        for i, layer in enumerate(self.layers):
            refs = stack([boxes[:, 1], boxes[:, 0]], axis=1)  # (cy, cx) -> (row, col)
            x = layer(x, refs, memory.maps)
            outputs.append(x)
            if self.delta_heads is not None:
                boxes = refine_step(boxes, self.delta_heads[i](x))
                layer_boxes.append(boxes)
                boxes = boxes.detach()
        return outputs, layer_boxes


class DenseDecoder(Module):
    def __init__(self, cfg: DetectorConfig, rng):
        d = cfg.model_dim
        self.query_embed = parameter(rng.normal(0.0, 0.5, size=(cfg.num_queries, d)))
        self.layers = [TransformerDecoderLayer(cfg.attention, rng) for _ in range(cfg.decoder_layers)]

    def __call__(self, memory: FeatureMapSet):
        m = memory.maps[-1]
        h, w, d = m.data.shape
        pos = Tensor(sinusoidal_position_encoding(h, w, d))
        tokens = flatten_map(m)
        x = self.query_embed
        outputs = []
        for layer in self.layers:
            x = layer(x, tokens, memory_pos=pos)
            outputs.append(x)
        return outputs, []


class DetectionModel(Module):
    def __init__(self, cfg: DetectorConfig, rng=None, seed=0):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.cfg = cfg
        self.backbone = BackboneStub(cfg, rng)
        if cfg.encoder_kind == "deformable":
            self.encoder = ScalableEncoder(cfg.attention, list(cfg.scales), cfg.encoder_layers, cfg.query_stride, rng)
        else:
            self.encoder = DenseEncoder(cfg.attention, cfg.encoder_layers, rng)
        if cfg.encoder_kind == "deformable":
            mem_scales = len(cfg.scales) if cfg.query_stride == QUERY_ALL else 1
            self.decoder = DeformableDecoder(cfg, mem_scales, rng)
        else:
            self.decoder = DenseDecoder(cfg, rng)
        self.class_head = Linear(cfg.model_dim, cfg.num_class_logits, rng)
        self.bbox_head = BoxHead(cfg.model_dim, rng)

    def detect(self, image, context_mode=None) -> DetectionSet:
        """Run the full pipeline; always emits exactly `num_queries`
        detections with no suppression step."""
        mode = self.cfg.context_mode if context_mode is None else context_mode
        if isinstance(mode, str):
            mode = ContextMode(mode)
        image = image if isinstance(image, Tensor) else Tensor(image)
        fm = self.backbone(image)
        encoded = self.encoder(fm)
        outputs, layer_boxes = self.decoder(encoded)
        x = outputs[-1]
        class_logits = self.class_head(x)
        boxes = layer_boxes[-1] if layer_boxes else self.bbox_head(x)
        det = DetectionSet(
            features=x,
            class_logits=class_logits,
            boxes=boxes,
            confidence=confidence_from_logits(class_logits, self.cfg.class_loss),
        )
        sources = ContextSources(
            backbone_map=fm.source_map,
            projected_map=fm.maps[fm.index_of(32)] if 32 in fm.strides else None,
            encoder_tokens=encoded.tokens(),
        )
        return append_global_context(det, sources, mode)

    def detect_with_aux(self, image):
        """Like detect(NONE) but also returns per-decoder-layer heads for
        auxiliary supervision."""
        image = image if isinstance(image, Tensor) else Tensor(image)
        fm = self.backbone(image)
        encoded = self.encoder(fm)
        outputs, layer_boxes = self.decoder(encoded)
        sets = []
        for i, x in enumerate(outputs):
            logits = self.class_head(x)
            boxes = layer_boxes[i] if layer_boxes else self.bbox_head(x)
            sets.append(
                DetectionSet(x, logits, boxes, confidence_from_logits(logits, self.cfg.class_loss))
            )
        return sets
