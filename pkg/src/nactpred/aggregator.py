"""Slice-to-volume aggregation: positional tagging, attention pooling, mean.

Per-slice CLS descriptors are stacked in axial order, offset by a learnable
slice-axis positional embedding, mixed by one (configurable) pre-norm
self-attention layer over the slice positions, and mean-pooled into a
single volume embedding.  The attention received by each slice, averaged
over heads and query positions, is kept as a per-volume record for
downstream reporting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import (
    EncoderConfig,
    EncoderParams,
    SliceTokens,
    encode_slice,
    encode_slices_batched,
)
from .layers import (
    AdaptedLinear,
    AttentionParams,
    LayerNormParams,
    init_layer_norm,
    init_linear,
    multi_head_attention,
)

__all__ = [
    "AttentionRecord",
    "PoolLayerParams",
    "AggregatorParams",
    "build_aggregator",
    "stack_cls",
    "add_slice_positional",
    "attention_pool",
    "mean_pool",
    "encode_volume",
]


@dataclass
class AttentionRecord:
    """Per-slice attention weights: non-negative, summing to 1."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("attention record must be a non-empty vector")
        if w.min() < -1e-12:
            raise ValueError("attention weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"attention weights sum to {w.sum()}, expected 1")
        self.weights = w


@dataclass
class PoolLayerParams:
    norm: LayerNormParams
    attn: AttentionParams


@dataclass
class AggregatorParams:
    slice_pos: Tensor  # (max_slices, d); rows beyond the current S unused
    layers: list[PoolLayerParams] = field(default_factory=list)


def build_aggregator(embed_dim: int, max_slices: int, n_layers: int,
                     rng: np.random.Generator) -> AggregatorParams:
    """Zero-init positional table (inert until trained) plus pooling layers."""
    if n_layers < 1:
        raise ValueError("need at least one pooling layer")
    layers = []
    for _ in range(n_layers):
        attn = AttentionParams(
            query=AdaptedLinear(init_linear(rng, embed_dim, embed_dim)),
            key=AdaptedLinear(init_linear(rng, embed_dim, embed_dim)),
            value=AdaptedLinear(init_linear(rng, embed_dim, embed_dim)),
            out=AdaptedLinear(init_linear(rng, embed_dim, embed_dim)),
        )
        layers.append(PoolLayerParams(norm=init_layer_norm(embed_dim), attn=attn))
    table = Tensor(np.zeros((max_slices, embed_dim)), requires_grad=True)
    return AggregatorParams(slice_pos=table, layers=layers)


def iter_aggregator_parameters(params: AggregatorParams):
    """Yield (name, tensor) in canonical checkpoint order."""
    yield "slice_pos", params.slice_pos
    for i, layer in enumerate(params.layers):
        prefix = f"pool{i}"
        yield f"{prefix}.norm.gain", layer.norm.gain
        yield f"{prefix}.norm.shift", layer.norm.shift
        for lname, adapted in [("attn.query", layer.attn.query),
                               ("attn.key", layer.attn.key),
                               ("attn.value", layer.attn.value),
                               ("attn.out", layer.attn.out)]:
            yield f"{prefix}.{lname}.weight", adapted.base.weight
            yield f"{prefix}.{lname}.bias", adapted.base.bias


def stack_cls(slices: list[SliceTokens]) -> Tensor:
    """Stack per-slice CLS rows into an S x d matrix, axial order preserved."""
    if not slices:
        raise ValueError("cannot aggregate an empty slice list")
    widths = {s.cls.shape[1] for s in slices}
    if len(widths) != 1:
        raise ad.ShapeError("slice descriptors have mixed widths")
    return ad.concat_rows([s.cls for s in slices])


def add_slice_positional(seq: Tensor, table: Tensor) -> Tensor:
    """Row i of the sequence gets table row i added; S must fit the table."""
    s = seq.shape[0]
    if s > table.shape[0]:
        raise ValueError(
            f"volume has {s} slices but the positional table holds {table.shape[0]}")
    return seq + ad.slice_rows(table, 0, s)


def attention_pool(seq: Tensor, layer: PoolLayerParams,
                   n_heads: int) -> tuple[Tensor, AttentionRecord]:
    """One pre-norm residual self-attention layer over the slice axis.

    The returned record holds, for each slice, the attention it received
    as a key, averaged over heads and query positions.
    """
    normed = ad.layer_norm(seq, layer.norm.gain, layer.norm.shift)
    attn_out, weights = multi_head_attention(normed, layer.attn, n_heads)
    return seq + attn_out, AttentionRecord(weights.mean(axis=(0, 1)))


def mean_pool(seq: Tensor) -> Tensor:
    """Arithmetic mean over slice rows: S x d -> 1 x d."""
    s = seq.shape[0]
    return ad.tensor_sum(seq, axis=0, keepdims=True) * (1.0 / s)


def encode_volume(voxels: np.ndarray, enc_params: EncoderParams,
                  enc_cfg: EncoderConfig, agg_params: AggregatorParams,
                  n_heads: int, batched: bool = True) -> tuple[Tensor, AttentionRecord]:
    """Volume pipeline: encode each slice, tag, pool, average.

    Args:
        voxels: (H, W, S) array; slice index is the last axis.
        batched: encode all slices through one shared graph (fast path);
            ``False`` keeps the straightforward slice-by-slice reference
            path against which the fast path is checked.

    Returns:
        (embedding, record): a 1 x d volume embedding and the attention
        record of the final pooling layer.
    """
    if voxels.ndim != 3:
        raise ad.ShapeError(f"expected an H x W x S volume, got {voxels.shape}")
    if batched:
        cls_stack = encode_slices_batched(voxels, enc_params, enc_cfg)
    else:
        slices = [encode_slice(voxels[:, :, k], enc_params, enc_cfg)
                  for k in range(voxels.shape[2])]
        cls_stack = stack_cls(slices)
    seq = add_slice_positional(cls_stack, agg_params.slice_pos)
    record = None
    for layer in agg_params.layers:
        seq, record = attention_pool(seq, layer, n_heads)
    return mean_pool(seq), record
