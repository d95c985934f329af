"""Per-slice transformer encoder with a frozen trunk and low-rank adapters.

A slice is a single-channel soft mask.  It is replicated to three channels,
cut into non-overlapping square patches, linearly embedded, tagged with a
learned patch positional embedding, prefixed with a learned CLS token and
passed through a stack of pre-norm transformer blocks.  Only the last
block carries low-rank adapters; every base parameter is frozen after
initialization (``requires_grad=False``), so gradients flow exclusively
through the adapters, matching a frozen-backbone fine-tuning regime.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    AdaptedLinear,
    AttentionParams,
    LayerNormParams,
    LinearParams,
    init_layer_norm,
    init_linear,
    init_lora,
    adapted_forward,
    multi_head_attention,
)

__all__ = [
    "EncoderConfig",
    "BlockParams",
    "EncoderParams",
    "SliceTokens",
    "build_encoder",
    "without_adapters",
    "to_three_channel",
    "flatten_patches",
    "patch_embed",
    "transformer_block",
    "encode_slice",
    "encode_slices_batched",
]


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 16
    embed_dim: int = 32
    n_blocks: int = 2
    n_heads: int = 4
    mlp_ratio: int = 4
    lora_rank: int = 4
    lora_alpha: float = 8.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.lora_rank < 1:
            raise ValueError("lora_rank must be >= 1")
        if self.n_blocks < 1:
            raise ValueError("need at least one transformer block")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_vector_size(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class BlockParams:
    norm_attn: LayerNormParams
    attn: AttentionParams
    norm_mlp: LayerNormParams
    mlp_in: AdaptedLinear
    mlp_out: AdaptedLinear


@dataclass
class EncoderParams:
    patch_embed: LinearParams
    cls_token: Tensor    # (1, d)
    patch_pos: Tensor    # (N, d), added to patch tokens only
    blocks: list[BlockParams] = field(default_factory=list)


@dataclass
class SliceTokens:
    """Token matrix for one slice; row 0 is the CLS descriptor."""

    tokens: Tensor  # (N+1, d)
    cls: Tensor     # (1, d), sliced from row 0 so gradients flow through it

    def __post_init__(self):
        if not np.array_equal(self.cls.data, self.tokens.data[:1]):
            raise ValueError("cls must equal row 0 of tokens")


def _plain(rng: np.random.Generator, fan_out: int, fan_in: int) -> AdaptedLinear:
    return AdaptedLinear(init_linear(rng, fan_out, fan_in))


def _adapted(rng: np.random.Generator, fan_out: int, fan_in: int,
             cfg: EncoderConfig) -> AdaptedLinear:
    base = init_linear(rng, fan_out, fan_in)
    lora = init_lora(rng, fan_out, fan_in, cfg.lora_rank, cfg.lora_alpha)
    return AdaptedLinear(base, lora)


def _build_block(rng: np.random.Generator, cfg: EncoderConfig,
                 adapted: bool) -> BlockParams:
    d = cfg.embed_dim
    hidden = cfg.mlp_ratio * d
    make = (lambda fo, fi: _adapted(rng, fo, fi, cfg)) if adapted else \
           (lambda fo, fi: _plain(rng, fo, fi))
    return BlockParams(
        norm_attn=init_layer_norm(d),
        attn=AttentionParams(query=make(d, d), key=make(d, d),
                             value=make(d, d), out=make(d, d)),
        norm_mlp=init_layer_norm(d),
        mlp_in=make(hidden, d),
        mlp_out=make(d, hidden),
    )


def build_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    """Initialize encoder parameters; adapters only on the final block."""
    params = EncoderParams(
        patch_embed=init_linear(rng, cfg.embed_dim, cfg.patch_vector_size),
        cls_token=Tensor(rng.normal(0.0, 0.02, size=(1, cfg.embed_dim)),
                         requires_grad=True),
        patch_pos=Tensor(rng.normal(0.0, 0.02, size=(cfg.n_patches, cfg.embed_dim)),
                         requires_grad=True),
        blocks=[_build_block(rng, cfg, adapted=(b == cfg.n_blocks - 1))
                for b in range(cfg.n_blocks)],
    )
    _freeze_base(params)
    return params


def _freeze_base(params: EncoderParams) -> None:
    # Everything except adapter factors is frozen; gradient flow stops here.
    for name, tensor in iter_encoder_parameters(params):
        tensor.requires_grad = ".adapter." in name


def iter_encoder_parameters(params: EncoderParams):
    """Yield (name, tensor) in canonical checkpoint order."""
    yield "patch_embed.weight", params.patch_embed.weight
    yield "patch_embed.bias", params.patch_embed.bias
    yield "cls_token", params.cls_token
    yield "patch_pos", params.patch_pos
    for b, block in enumerate(params.blocks):
        prefix = f"block{b}"
        yield f"{prefix}.norm_attn.gain", block.norm_attn.gain
        yield f"{prefix}.norm_attn.shift", block.norm_attn.shift
        named = [("attn.query", block.attn.query), ("attn.key", block.attn.key),
                 ("attn.value", block.attn.value), ("attn.out", block.attn.out),
                 ("mlp_in", block.mlp_in), ("mlp_out", block.mlp_out)]
        for lname, adapted in named:
            yield f"{prefix}.{lname}.weight", adapted.base.weight
            yield f"{prefix}.{lname}.bias", adapted.base.bias
            if adapted.lora is not None:
                yield f"{prefix}.{lname}.adapter.down", adapted.lora.down
                yield f"{prefix}.{lname}.adapter.up", adapted.lora.up
        yield f"{prefix}.norm_mlp.gain", block.norm_mlp.gain
        yield f"{prefix}.norm_mlp.shift", block.norm_mlp.shift


def without_adapters(params: EncoderParams) -> EncoderParams:
    """A view of the encoder with adapters detached (base tensors shared)."""
    blocks = []
    for block in params.blocks:
        blocks.append(BlockParams(
            norm_attn=block.norm_attn,
            attn=AttentionParams(
                query=replace(block.attn.query, lora=None),
                key=replace(block.attn.key, lora=None),
                value=replace(block.attn.value, lora=None),
                out=replace(block.attn.out, lora=None),
            ),
            norm_mlp=block.norm_mlp,
            mlp_in=replace(block.mlp_in, lora=None),
            mlp_out=replace(block.mlp_out, lora=None),
        ))
    return EncoderParams(params.patch_embed, params.cls_token,
                         params.patch_pos, blocks)


def to_three_channel(slice_2d: np.ndarray) -> np.ndarray:
    """Replicate a single-channel H x W slice into three identical channels."""
    arr = np.asarray(slice_2d, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    if arr.ndim != 2:
        raise ad.ShapeError(f"expected a single-channel slice, got shape {arr.shape}")
    return np.repeat(arr[:, :, None], 3, axis=2)


def flatten_patches(slice_3ch: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut into non-overlapping patches, row-major, each flattened to a row."""
    h, w, c = slice_3ch.shape
    if h % patch_size or w % patch_size:
        raise ad.ShapeError(f"slice {h}x{w} not tileable by {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    grid = slice_3ch.reshape(rows, patch_size, cols, patch_size, c)
    return grid.transpose(0, 2, 1, 3, 4).reshape(rows * cols, patch_size * patch_size * c)


def patch_embed(slice_3ch: np.ndarray, params: EncoderParams,
                cfg: EncoderConfig) -> Tensor:
    """Linear embedding of flattened patches: returns an N x d token matrix."""
    if slice_3ch.shape != (cfg.image_size, cfg.image_size, 3):
        raise ad.ShapeError(
            f"slice shape {slice_3ch.shape} does not match config "
            f"({cfg.image_size}, {cfg.image_size}, 3)")
    patches = Tensor(flatten_patches(slice_3ch, cfg.patch_size))
    return ad.linear(patches, params.patch_embed.weight, params.patch_embed.bias)


def transformer_block(tokens: Tensor, block: BlockParams, n_heads: int,
                      n_blocks: int = 1) -> Tensor:
    """Pre-norm block: LN -> self-attention -> residual, LN -> MLP -> residual.

    ``n_blocks`` > 1 treats the rows as stacked independent sequences; the
    per-row ops batch transparently and attention stays within each block.
    """
    normed = ad.layer_norm(tokens, block.norm_attn.gain, block.norm_attn.shift)
    attn_out, _ = multi_head_attention(normed, block.attn, n_heads, n_blocks)
    tokens = tokens + attn_out
    normed = ad.layer_norm(tokens, block.norm_mlp.gain, block.norm_mlp.shift)
    hidden = ad.gelu(adapted_forward(normed, block.mlp_in))
    return tokens + adapted_forward(hidden, block.mlp_out)


def encode_slice(slice_2d: np.ndarray, params: EncoderParams,
                 cfg: EncoderConfig) -> SliceTokens:
    """Full slice pipeline ending in an (N+1) x d token matrix plus its CLS."""
    patches = patch_embed(to_three_channel(slice_2d), params, cfg)
    patches = patches + params.patch_pos
    tokens = ad.concat_rows([params.cls_token, patches])
    for block in params.blocks:
        tokens = transformer_block(tokens, block, cfg.n_heads)
    return SliceTokens(tokens=tokens, cls=ad.slice_rows(tokens, 0, 1))


def encode_slices_batched(voxels: np.ndarray, params: EncoderParams,
                          cfg: EncoderConfig) -> Tensor:
    """Encode every axial slice of one volume through a single shared graph.

    Matches running :func:`encode_slice` per slice and stacking the CLS
    rows (up to float round-off from batched BLAS calls), but attention is
    block-diagonal over slices so the whole volume costs one graph pass.

    Args:
        voxels: (H, W, S) volume; slice k is ``voxels[:, :, k]``.

    Returns:
        (S, d) matrix of CLS descriptors in axial order.
    """
    arr = np.asarray(voxels, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] < 1:
        raise ad.ShapeError(f"expected a non-empty H x W x S volume, got {arr.shape}")
    if arr.shape[:2] != (cfg.image_size, cfg.image_size):
        raise ad.ShapeError(f"slice shape {arr.shape[:2]} does not match config "
                            f"({cfg.image_size}, {cfg.image_size})")
    n_slices = arr.shape[2]
    n = cfg.n_patches

    flat = np.concatenate([
        flatten_patches(to_three_channel(arr[:, :, k]), cfg.patch_size)
        for k in range(n_slices)
    ], axis=0)
    embedded = ad.linear(Tensor(flat), params.patch_embed.weight,
                         params.patch_embed.bias)
    positional = params.patch_pos if n_slices == 1 else \
        ad.concat_rows([params.patch_pos] * n_slices)
    embedded = embedded + positional

    pieces = []
    for k in range(n_slices):
        pieces.append(params.cls_token)
        pieces.append(ad.slice_rows(embedded, k * n, (k + 1) * n))
    tokens = ad.concat_rows(pieces)
    for block in params.blocks:
        tokens = transformer_block(tokens, block, cfg.n_heads, n_blocks=n_slices)
    return ad.gather_rows(tokens, [k * (n + 1) for k in range(n_slices)])
