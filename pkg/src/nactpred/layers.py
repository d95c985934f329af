"""Shared parameterized layers: linear maps, low-rank adapters, attention.

Parameters are plain dataclasses holding engine tensors.  Construction
helpers take an explicit generator so that initialization is reproducible
from a single seed.  Weight matrices are stored (fan_out, fan_in), matching
:func:`nactpred.autodiff.linear`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "LinearParams",
    "LayerNormParams",
    "LoraParams",
    "AdaptedLinear",
    "AttentionParams",
    "init_linear",
    "init_layer_norm",
    "init_lora",
    "adapted_forward",
    "multi_head_attention",
]


@dataclass
class LinearParams:
    weight: Tensor  # (fan_out, fan_in)
    bias: Tensor    # (fan_out,)


@dataclass
class LayerNormParams:
    gain: Tensor
    shift: Tensor


@dataclass
class LoraParams:
    """Low-rank residual on a frozen linear map.

    ``down`` projects input to rank r, ``up`` projects back out; the
    adapter contribution is scaled by alpha / r.  ``up`` starts at zero so
    an untrained adapter leaves the base map bitwise unchanged.
    """

    down: Tensor  # (r, fan_in)
    up: Tensor    # (fan_out, r)
    scale: float


@dataclass
class AdaptedLinear:
    base: LinearParams
    lora: LoraParams | None = None


@dataclass
class AttentionParams:
    query: AdaptedLinear
    key: AdaptedLinear
    value: AdaptedLinear
    out: AdaptedLinear


def init_linear(rng: np.random.Generator, fan_out: int, fan_in: int) -> LinearParams:
    """Xavier-normal weight, zero bias."""
    std = math.sqrt(2.0 / (fan_in + fan_out))
    weight = Tensor(rng.normal(0.0, std, size=(fan_out, fan_in)), requires_grad=True)
    bias = Tensor(np.zeros(fan_out), requires_grad=True)
    return LinearParams(weight, bias)


def init_layer_norm(dim: int) -> LayerNormParams:
    return LayerNormParams(Tensor(np.ones(dim), requires_grad=True),
                           Tensor(np.zeros(dim), requires_grad=True))


def init_lora(rng: np.random.Generator, fan_out: int, fan_in: int,
              rank: int, alpha: float) -> LoraParams:
    if rank < 1:
        raise ValueError(f"adapter rank must be positive, got {rank}")
    down = Tensor(rng.normal(0.0, 0.02, size=(rank, fan_in)), requires_grad=True)
    up = Tensor(np.zeros((fan_out, rank)), requires_grad=True)
    return LoraParams(down, up, alpha / rank)


def adapted_forward(x: Tensor, layer: AdaptedLinear) -> Tensor:
    """Base affine map plus, when present, the scaled low-rank residual."""
    out = ad.linear(x, layer.base.weight, layer.base.bias)
    if layer.lora is None:
        return out
    low = ad.linear(x, layer.lora.down)
    residual = ad.linear(low, layer.lora.up)
    return out + layer.lora.scale * residual


def multi_head_attention(x: Tensor, params: AttentionParams, n_heads: int,
                         n_blocks: int = 1) -> tuple[Tensor, np.ndarray]:
    """Standard scaled dot-product self-attention over the rows of ``x``.

    With ``n_blocks`` > 1 the rows of ``x`` are treated as that many
    stacked independent sequences of equal length; attention never crosses
    a block boundary, which lets a batch of sequences share one graph.

    Args:
        x: (B*T, d) token matrix (B = n_blocks).
        params: projection weights; any of them may carry an adapter.
        n_heads: number of heads; d must divide evenly.
        n_blocks: independent sequences stacked along the rows.

    Returns:
        (output, weights): output is (B*T, d); weights is a detached
        (n_blocks, n_heads, T, T) array of attention probabilities when
        n_blocks > 1, else (n_heads, T, T); rows sum to 1.
    """
    rows, dim = x.shape
    if dim % n_heads != 0:
        raise ad.ShapeError(f"model width {dim} not divisible by {n_heads} heads")
    if n_blocks < 1 or rows % n_blocks != 0:
        raise ad.ShapeError(f"{rows} rows not divisible into {n_blocks} blocks")
    t_len = rows // n_blocks
    head_dim = dim // n_heads
    scale = 1.0 / math.sqrt(head_dim)

    q = adapted_forward(x, params.query)
    k = adapted_forward(x, params.key)
    v = adapted_forward(x, params.value)

    head_outputs = []
    weights = np.empty((n_blocks, n_heads, t_len, t_len))
    for h in range(n_heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = ad.slice_cols(q, lo, hi)
        kh = ad.slice_cols(k, lo, hi)
        vh = ad.slice_cols(v, lo, hi)
        probs = ad.softmax(scale * ad.block_qk(qh, kh, n_blocks))
        weights[:, h] = probs.data.reshape(n_blocks, t_len, t_len)
        head_outputs.append(ad.block_av(probs, vh, n_blocks))

    merged = head_outputs[0] if n_heads == 1 else ad.concat_cols(head_outputs)
    out = adapted_forward(merged, params.out)
    return out, (weights[0] if n_blocks == 1 else weights)
