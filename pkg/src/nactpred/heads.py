"""Output heads and losses for the volume embedding.

The classification head maps the volume embedding to two logits through
two shrinking hidden layers.  The projection head maps the same embedding
onto a unit hypersphere where a margin-based contrastive loss acts on
volume pairs: same-label pairs pay squared distance, different-label pairs
pay a squared hinge below the margin.  The combined objective is
cross-entropy plus an epoch-ramped multiple of the contrastive term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import LayerNormParams, LinearParams, init_layer_norm, init_linear

__all__ = [
    "ClsHeadParams",
    "ProjHeadParams",
    "LossConfig",
    "DegenerateEmbeddingError",
    "build_cls_head",
    "build_proj_head",
    "cls_head",
    "proj_head",
    "l2_normalize",
    "cross_entropy",
    "contrastive_margin_loss",
    "alpha_schedule",
    "multi_loss",
]


class DegenerateEmbeddingError(ValueError):
    """A projection collapsed to (near) zero norm; normalizing it would be lying."""


@dataclass
class ClsHeadParams:
    fc1: LinearParams
    norm1: LayerNormParams
    fc2: LinearParams
    norm2: LayerNormParams
    out: LinearParams


@dataclass
class ProjHeadParams:
    hidden: LinearParams
    norm: LayerNormParams
    out: LinearParams


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    alpha_max: float = 0.3
    ramp_epochs: int = 30
    hard_mining_start_epoch: int = 20

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.alpha_max < 0:
            raise ValueError("alpha_max must be non-negative")
        if self.ramp_epochs < 1:
            raise ValueError("ramp_epochs must be >= 1")


def build_cls_head(embed_dim: int, rng: np.random.Generator) -> ClsHeadParams:
    """Two shrinking hidden layers (d -> d/2 -> d/8) then two logits."""
    if embed_dim % 8 != 0:
        raise ValueError("embed_dim must be divisible by 8 for the head taper")
    h1, h2 = embed_dim // 2, embed_dim // 8
    return ClsHeadParams(
        fc1=init_linear(rng, h1, embed_dim),
        norm1=init_layer_norm(h1),
        fc2=init_linear(rng, h2, h1),
        norm2=init_layer_norm(h2),
        out=init_linear(rng, 2, h2),
    )


def build_proj_head(embed_dim: int, proj_dim: int,
                    rng: np.random.Generator) -> ProjHeadParams:
    return ProjHeadParams(
        hidden=init_linear(rng, embed_dim, embed_dim),
        norm=init_layer_norm(embed_dim),
        out=init_linear(rng, proj_dim, embed_dim),
    )


def iter_cls_head_parameters(p: ClsHeadParams):
    yield "cls_head.fc1.weight", p.fc1.weight
    yield "cls_head.fc1.bias", p.fc1.bias
    yield "cls_head.norm1.gain", p.norm1.gain
    yield "cls_head.norm1.shift", p.norm1.shift
    yield "cls_head.fc2.weight", p.fc2.weight
    yield "cls_head.fc2.bias", p.fc2.bias
    yield "cls_head.norm2.gain", p.norm2.gain
    yield "cls_head.norm2.shift", p.norm2.shift
    yield "cls_head.out.weight", p.out.weight
    yield "cls_head.out.bias", p.out.bias


def iter_proj_head_parameters(p: ProjHeadParams):
    yield "proj_head.hidden.weight", p.hidden.weight
    yield "proj_head.hidden.bias", p.hidden.bias
    yield "proj_head.norm.gain", p.norm.gain
    yield "proj_head.norm.shift", p.norm.shift
    yield "proj_head.out.weight", p.out.weight
    yield "proj_head.out.bias", p.out.bias


def cls_head(embedding: Tensor, params: ClsHeadParams, *, training: bool = False,
             dropout_rate: float = 0.0,
             rng: np.random.Generator | None = None) -> Tensor:
    """Volume embedding -> two class logits (dropout after each hidden GELU)."""
    x = ad.linear(embedding, params.fc1.weight, params.fc1.bias)
    x = ad.gelu(ad.layer_norm(x, params.norm1.gain, params.norm1.shift))
    x = ad.dropout(x, dropout_rate, training, rng)
    x = ad.linear(x, params.fc2.weight, params.fc2.bias)
    x = ad.gelu(ad.layer_norm(x, params.norm2.gain, params.norm2.shift))
    x = ad.dropout(x, dropout_rate, training, rng)
    return ad.linear(x, params.out.weight, params.out.bias)


def proj_head(embedding: Tensor, params: ProjHeadParams) -> Tensor:
    """Volume embedding -> unnormalized contrastive coordinates."""
    x = ad.linear(embedding, params.hidden.weight, params.hidden.bias)
    x = ad.gelu(ad.layer_norm(x, params.norm.gain, params.norm.shift))
    return ad.linear(x, params.out.weight, params.out.bias)


def l2_normalize(z: Tensor) -> Tensor:
    """Scale to unit Euclidean norm; a near-zero input is a hard error."""
    norm = ad.sqrt(ad.tensor_sum(z * z))
    if float(norm.data) <= 1e-12:
        raise DegenerateEmbeddingError(
            f"projection norm {float(norm.data):.3e} is too small to normalize")
    return z / norm


def _require_unit(z: Tensor, which: str) -> None:
    norm = math.sqrt(float((z.data * z.data).sum()))
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"{which} embedding has norm {norm:.8f}, expected 1")


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log softmax probability of the true class, via log-sum-exp.

    The subtracted max is a constant with respect to the graph, which is
    exact for the gradient because the loss is shift-invariant in logits.
    """
    if logits.shape != (1, 2):
        raise ad.ShapeError(f"expected 1x2 logits, got {logits.shape}")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    peak = float(logits.data.max())
    log_norm = ad.log(ad.tensor_sum(ad.exp(logits - peak))) + peak
    picked = ad.tensor_sum(ad.slice_cols(logits, label, label + 1))
    return log_norm - picked


def contrastive_margin_loss(z1: Tensor, z2: Tensor, same_label: int,
                            margin: float = 1.0) -> Tensor:
    """Margin contrastive loss on two unit embeddings.

    Same-label pairs pay the squared Euclidean distance; different-label
    pairs pay a squared hinge on the shortfall below the margin.  The
    positive branch works on the squared distance directly, avoiding the
    sqrt-at-zero gradient singularity for identical embeddings.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    if same_label not in (0, 1):
        raise ValueError(f"pair label must be 0 or 1, got {same_label!r}")
    _require_unit(z1, "first")
    _require_unit(z2, "second")
    diff = z1 - z2
    squared_distance = ad.tensor_sum(diff * diff)
    if same_label == 1:
        return squared_distance
    if float(squared_distance.data) == 0.0:
        # Exactly coincident negatives: the hinge sits at its maximum m^2,
        # where the distance is non-differentiable; zero is a valid
        # subgradient, so the term is emitted as a constant.
        return Tensor(margin * margin)
    shortfall = ad.relu(margin - ad.sqrt(squared_distance))
    return shortfall * shortfall


def alpha_schedule(epoch: int, cfg: LossConfig) -> float:
    """Contrastive weight: linear ramp from 0 to alpha_max, then flat."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.alpha_max * min(1.0, epoch / cfg.ramp_epochs)


def multi_loss(logits: Tensor, label: int, z1: Tensor, z2: Tensor,
               same_label: int, alpha: float, margin: float = 1.0) -> Tensor:
    """Combined objective: cross-entropy plus alpha times the contrastive term.

    At alpha == 0 this returns the cross-entropy tensor itself, so the two
    are equal bitwise and no contrastive graph is built.
    """
    ce = cross_entropy(logits, label)
    if alpha == 0.0:
        return ce
    return ce + alpha * contrastive_margin_loss(z1, z2, same_label, margin)
