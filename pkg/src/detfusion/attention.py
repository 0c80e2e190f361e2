"""Attention stack: dense multi-head attention, multi-scale deformable
attention, pre-norm transformer layers, and the scalable encoder that can
query with a single feature-map scale while reading keys from all scales.

Conventions used throughout:
  - reference points are (row, column) fractions of the map extent in [0,1]^2;
  - sampling offsets are expressed in pixels of each target scale's map;
  - a normalized reference maps to pixel coordinates as `frac * size - 0.5`,
    so the center of cell (i, j) lands exactly on pixel (i, j);
  - attention weights of the deformable module are softmax-normalized jointly
    over all (scale, point) pairs of a head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Linear, Module, Norm, parameter
from .tensor import Tensor, add, bilinear_sample, concat, matmul, relu, reshape, softmax

QUERY_ALL = "all"

_MASKED_LOGIT = -1e30


@dataclass
class AttentionConfig:
    model_dim: int = 256
    heads: int = 8
    ffn_dim: int = 1024
    sampling_points: int = 4
    num_scales: int = 4

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.sampling_points < 1 or self.num_scales < 1:
            raise ValueError("sampling_points and num_scales must be >= 1")


@dataclass
class FeatureMapSet:
    """Ordered multi-scale feature maps sharing one channel width.

    `source_map` optionally retains the unprojected final backbone map so
    global-context pooling can reach it later in the pipeline.
    """

    maps: list = field(default_factory=list)
    strides: list = field(default_factory=list)
    source_map: Tensor | None = None

    def __post_init__(self):
        if len(self.maps) != len(self.strides):
            raise ValueError("maps and strides length mismatch")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        widths = {m.data.shape[2] for m in self.maps}
        if len(widths) > 1:
            raise ValueError(f"feature maps disagree on channel width: {sorted(widths)}")

    @property
    def num_scales(self):
        return len(self.maps)

    def index_of(self, stride):
        if stride not in self.strides:
            raise ValueError(f"stride {stride} not in feature map set {self.strides}")
        return self.strides.index(stride)

    def tokens(self):
        """All maps flattened to [sum(H*W), D] in scale order."""
        return concat([flatten_map(m) for m in self.maps], axis=0)


def flatten_map(m):
    h, w, d = m.data.shape
    return reshape(m, (h * w, d))


def unflatten_tokens(tokens, h, w):
    return reshape(tokens, (h, w, tokens.data.shape[1]))


def sinusoidal_position_encoding(h, w, dim, temperature=10000.0):
    """Fixed 2-d sine/cosine embedding, half the channels per axis."""
    if dim % 4:
        raise ValueError(f"positional encoding needs dim divisible by 4, got {dim}")
    half = dim // 2
    freqs = temperature ** (2 * (np.arange(half // 2)) / half)
    ys = (np.arange(h) + 0.5) / h * 2 * np.pi
    xs = (np.arange(w) + 0.5) / w * 2 * np.pi
    out = np.zeros((h, w, dim))
    ang_y = ys[:, None, None] / freqs
    ang_x = xs[None, :, None] / freqs
    out[:, :, 0:half:2] = np.sin(np.broadcast_to(ang_y, (h, w, half // 2)))
    out[:, :, 1:half:2] = np.cos(np.broadcast_to(ang_y, (h, w, half // 2)))
    out[:, :, half + 0 :: 2] = np.sin(np.broadcast_to(ang_x, (h, w, half // 2)))
    out[:, :, half + 1 :: 2] = np.cos(np.broadcast_to(ang_x, (h, w, half // 2)))
    return out.reshape(h * w, dim)


def cell_center_reference_points(h, w):
    """Normalized (row, col) centers of every cell of an h x w map."""
    rows = (np.arange(h) + 0.5) / h
    cols = (np.arange(w) + 0.5) / w
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with head split and output projection."""

    def __init__(self, cfg: AttentionConfig, rng):
        d = cfg.model_dim
        self.heads = cfg.heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def __call__(self, queries, keys, values, mask=None):
        nq = queries.data.shape[0]
        nk = keys.data.shape[0]
        d = queries.data.shape[1]
        dh = d // self.heads
        bias = None
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (nq, nk):
                raise ValueError(f"mask shape {mask.shape} != ({nq}, {nk})")
            dead = ~mask.any(axis=1)
            if dead.any():
                raise ValueError(f"fully masked query rows: {np.flatnonzero(dead).tolist()}")
            bias = np.where(mask, 0.0, _MASKED_LOGIT)
        q = self.q_proj(queries)
        k = self.k_proj(keys)
        v = self.v_proj(values)
        scale = 1.0 / np.sqrt(dh)
        head_outs = []
        for h in range(self.heads):
            sl = slice(h * dh, (h + 1) * dh)
            qa, ka, va = q[:, sl], k[:, sl], v[:, sl]
            logits = matmul(qa, ka.transpose()) * scale
            if bias is not None:
                logits = add(logits, bias)
            attn = softmax(logits, axis=-1)
            head_outs.append(matmul(attn, va))
        return self.out_proj(concat(head_outs, axis=-1))


def ms_deform_attn(value_maps, reference_points, offsets, logits, heads, value_proj=None, output_proj=None):
    """Sample and mix multi-scale map values at offset points per reference.

    value_maps: list of [H,W,D] tensors; reference_points: [Nq,2] normalized
    (row, col); offsets: [Nq, heads, L, K, 2] in pixels of each target map;
    logits: [Nq, heads, L*K], normalized jointly over all (scale, point)
    pairs of a head. Optional value/output projections are applied around the
    sampling, matching the module form.
    """
    num_scales = len(value_maps)
    nq, h, l, k, two = offsets.data.shape
    if l != num_scales or two != 2 or h != heads:
        raise ValueError(f"offsets shape {offsets.data.shape} inconsistent with {heads} heads / {num_scales} scales")
    if logits.data.shape != (nq, heads, num_scales * k):
        raise ValueError(f"logits shape {logits.data.shape} != {(nq, heads, num_scales * k)}")
    d = value_maps[0].data.shape[2]
    dh = d // heads
    if value_proj is not None:
        projected = []
        for m in value_maps:
            mh, mw, _ = m.data.shape
            projected.append(reshape(value_proj(flatten_map(m)), (mh, mw, d)))
        value_maps = projected
    weights = reshape(softmax(logits, axis=-1), (nq, heads, num_scales, k))
    head_outs = []
    for hi in range(heads):
        acc = None
        for li in range(num_scales):
            mh, mw, _ = value_maps[li].data.shape
            base = reference_points * np.array([float(mh), float(mw)]) - 0.5
            pts = reshape(add(reshape(base, (nq, 1, 2)), offsets[:, hi, li]), (nq * k, 2))
            sampled = bilinear_sample(value_maps[li][:, :, hi * dh : (hi + 1) * dh], pts)
            sampled = reshape(sampled, (nq, k, dh))
            wlk = reshape(weights[:, hi, li], (nq, k, 1))
            term = (sampled * wlk).sum(axis=1)
            acc = term if acc is None else add(acc, term)
        head_outs.append(acc)
    out = concat(head_outs, axis=-1)
    return out if output_proj is None else output_proj(out)


class DeformableAttention(Module):
    """Learned-offset sparse attention over one or more feature-map scales."""

    def __init__(self, cfg: AttentionConfig, num_scales, rng):
        d = cfg.model_dim
        self.heads = cfg.heads
        self.points = cfg.sampling_points
        self.num_scales = num_scales
        self.offset_proj = Linear(d, self.heads * num_scales * self.points * 2, rng, init="zeros")
        self.offset_proj.bias.data = self._initial_offset_bias()
        self.logit_proj = Linear(d, self.heads * num_scales * self.points, rng, init="zeros")
        self.value_proj = Linear(d, d, rng)
        self.output_proj = Linear(d, d, rng)

    def _initial_offset_bias(self):
        # spread initial samples on per-head rays so heads break symmetry
        angles = 2 * np.pi * np.arange(self.heads) / self.heads
        ray = np.stack([np.sin(angles), np.cos(angles)], axis=1)
        bias = np.zeros((self.heads, self.num_scales, self.points, 2))
        for k in range(self.points):
            bias[:, :, k, :] = ray[:, None, :] * (k + 1)
        return bias.reshape(-1)

    def __call__(self, queries, reference_points, value_maps):
        nq = queries.data.shape[0]
        offsets = reshape(self.offset_proj(queries), (nq, self.heads, self.num_scales, self.points, 2))
        logits = reshape(self.logit_proj(queries), (nq, self.heads, self.num_scales * self.points))
        return ms_deform_attn(
            value_maps,
            reference_points,
            offsets,
            logits,
            self.heads,
            value_proj=self.value_proj,
            output_proj=self.output_proj,
        )


class FeedForward(Module):
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.fc2(relu(self.fc1(x)))


class TransformerEncoderLayer(Module):
    """Pre-norm self-attention block; zeroed output projections make it an
    exact identity through the residual paths."""

    def __init__(self, cfg: AttentionConfig, rng):
        self.attn = MultiHeadAttention(cfg, rng)
        self.norm1 = Norm(cfg.model_dim)
        self.norm2 = Norm(cfg.model_dim)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_dim, rng)

    def __call__(self, x, pos=None, key_mask=None):
        y = self.norm1(x)
        qk = y if pos is None else add(y, pos)
        mask = None
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool)
            mask = np.broadcast_to(key_mask[None, :], (x.data.shape[0], key_mask.shape[0]))
        x = add(x, self.attn(qk, qk, y, mask=mask))
        return add(x, self.ffn(self.norm2(x)))


class TransformerDecoderLayer(Module):
    """Pre-norm block alternating self-attention and cross-attention."""

    def __init__(self, cfg: AttentionConfig, rng):
        self.self_attn = MultiHeadAttention(cfg, rng)
        self.cross_attn = MultiHeadAttention(cfg, rng)
        self.norm1 = Norm(cfg.model_dim)
        self.norm2 = Norm(cfg.model_dim)
        self.norm3 = Norm(cfg.model_dim)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_dim, rng)

    def __call__(self, x, memory, memory_pos=None):
        y = self.norm1(x)
        x = add(x, self.self_attn(y, y, y))
        y = self.norm2(x)
        mem_k = memory if memory_pos is None else add(memory, memory_pos)
        x = add(x, self.cross_attn(y, mem_k, memory))
        return add(x, self.ffn(self.norm3(x)))


class DeformableEncoderLayer(Module):
    """Pre-norm deformable attention block. Queries may come from a subset of
    the scales whose maps serve as keys (the cross-scale first layer of the
    scalable encoder uses exactly that)."""

    def __init__(self, cfg: AttentionConfig, num_scales, rng):
        self.attn = DeformableAttention(cfg, num_scales, rng)
        self.norm1 = Norm(cfg.model_dim)
        self.norm2 = Norm(cfg.model_dim)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_dim, rng)

    def __call__(self, query_tokens, query_pos, reference_points, key_maps):
        y = self.norm1(query_tokens)
        normed_maps = [self.norm1(m) for m in key_maps]
        q = add(y, query_pos) if query_pos is not None else y
        x = add(query_tokens, self.attn(q, reference_points, normed_maps))
        return add(x, self.ffn(self.norm2(x)))


class ScalableEncoder(Module):
    """Deformable encoder whose first layer can query with one chosen scale.

    With `query_stride=QUERY_ALL` every layer runs full multi-scale
    self-attention. With an integer stride, layer one queries with that
    scale's tokens against keys from every scale, producing a single map that
    already mixes multi-scale information; the remaining layers self-attend
    on that single map.
    """

    def __init__(self, cfg: AttentionConfig, strides, num_layers, query_stride, rng):
        if query_stride != QUERY_ALL and query_stride not in strides:
            raise ValueError(f"query_stride {query_stride!r} not available; feature strides are {strides}")
        self.cfg = cfg
        self.strides = list(strides)
        self.query_stride = query_stride
        self.level_embed = parameter(rng.normal(0.0, 0.02, size=(len(strides), cfg.model_dim)))
        layers = []
        for i in range(num_layers):
            scales = len(strides) if (query_stride == QUERY_ALL or i == 0) else 1
            layers.append(DeformableEncoderLayer(cfg, scales, rng))
        self.layers = layers

    def _pos_for(self, shapes, scale_indices):
        parts = []
        for si, (h, w) in zip(scale_indices, shapes):
            sin = Tensor(sinusoidal_position_encoding(h, w, self.cfg.model_dim))
            parts.append(add(sin, self.level_embed[si]))
        return concat(parts, axis=0) if len(parts) > 1 else parts[0]

    def __call__(self, fm: FeatureMapSet) -> FeatureMapSet:
        shapes = [m.data.shape[:2] for m in fm.maps]
        if self.query_stride == QUERY_ALL:
            maps = list(fm.maps)
            refs = Tensor(np.concatenate([cell_center_reference_points(h, w) for h, w in shapes]))
            pos = self._pos_for(shapes, range(len(maps)))
            for layer in self.layers:
                tokens = concat([flatten_map(m) for m in maps], axis=0) if len(maps) > 1 else flatten_map(maps[0])
                out = layer(tokens, pos, refs, maps)
                maps = _split_tokens(out, shapes)
            return FeatureMapSet(maps, list(fm.strides), source_map=fm.source_map)

        qi = fm.index_of(self.query_stride)
        h, w = shapes[qi]
        refs = Tensor(cell_center_reference_points(h, w))
        pos = self._pos_for([shapes[qi]], [qi])
        tokens = flatten_map(fm.maps[qi])
        current = self.layers[0](tokens, pos, refs, list(fm.maps))
        for layer in self.layers[1:]:
            current = layer(current, pos, refs, [unflatten_tokens(current, h, w)])
        return FeatureMapSet([unflatten_tokens(current, h, w)], [self.query_stride], source_map=fm.source_map)


def _split_tokens(tokens, shapes):
    maps = []
    offset = 0
    for h, w in shapes:
        maps.append(reshape(tokens[offset : offset + h * w], (h, w, tokens.data.shape[1])))
        offset += h * w
    return maps


class DenseEncoder(Module):
    """Plain self-attention encoder over the coarsest feature map."""

    def __init__(self, cfg: AttentionConfig, num_layers, rng):
        self.cfg = cfg
        self.layers = [TransformerEncoderLayer(cfg, rng) for _ in range(num_layers)]

    def __call__(self, fm: FeatureMapSet) -> FeatureMapSet:
        m = fm.maps[-1]
        h, w, d = m.data.shape
        pos = Tensor(sinusoidal_position_encoding(h, w, d))
        tokens = flatten_map(m)
        for layer in self.layers:
            tokens = layer(tokens, pos=pos)
        return FeatureMapSet([unflatten_tokens(tokens, h, w)], [fm.strides[-1]], source_map=fm.source_map)
