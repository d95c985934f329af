"""Full response model: encoder + aggregator + heads, with checkpointing.

The model owns every parameter tensor and exposes them through a canonical
manifest (stable name -> tensor order) that the optimizer and checkpoint
format both rely on.  Frozen parameters (the encoder trunk) are created
with ``requires_grad=False`` and are excluded from the trainable view.

Checkpoint format: one JSON header line (format tag, model config, epoch,
metric, parameter manifest) followed by the raw little-endian float64
concatenation of all parameters in manifest order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import aggregator as agg
from . import heads
from .autodiff import Tensor, no_grad
from .encoder import EncoderConfig, build_encoder, iter_encoder_parameters
from .heads import LossConfig

__all__ = [
    "ModelConfig",
    "VolumeOutput",
    "ResponseModel",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "nactpred.ckpt.v1"


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be decoded consistently."""


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    max_slices: int = 32
    pool_heads: int = 4
    pool_layers: int = 1
    proj_dim: int = 16
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.encoder.embed_dim % self.pool_heads != 0:
            raise ValueError("embed_dim must be divisible by pool_heads")
        if self.max_slices < 1 or self.pool_layers < 1 or self.proj_dim < 1:
            raise ValueError("max_slices, pool_layers and proj_dim must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        enc = EncoderConfig(**raw.pop("encoder"))
        return cls(encoder=enc, **raw)


@dataclass
class VolumeOutput:
    logits: Tensor               # (1, 2)
    embedding: Tensor            # (1, d)
    projected: Tensor            # (1, proj_dim), unit norm
    attention: agg.AttentionRecord


class ResponseModel:
    """Assembled network; construction draws every parameter from ``rng``."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        d = config.encoder.embed_dim
        self.encoder = build_encoder(config.encoder, rng)
        self.aggregator = agg.build_aggregator(d, config.max_slices,
                                               config.pool_layers, rng)
        self.cls_head = heads.build_cls_head(d, rng)
        self.proj_head = heads.build_proj_head(d, config.proj_dim, rng)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "ResponseModel":
        return cls(config, np.random.default_rng([seed, 0x5EED]))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Every parameter in canonical manifest order."""
        out = [(f"encoder.{n}", t) for n, t in iter_encoder_parameters(self.encoder)]
        out += [(f"aggregator.{n}", t)
                for n, t in agg.iter_aggregator_parameters(self.aggregator)]
        out += list(heads.iter_cls_head_parameters(self.cls_head))
        out += list(heads.iter_proj_head_parameters(self.proj_head))
        return out

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def frozen_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if not t.requires_grad]

    def forward_volume(self, voxels: np.ndarray, *, training: bool = False,
                       rng: np.random.Generator | None = None) -> VolumeOutput:
        """Run the full pipeline on one (H, W, S) volume."""
        embedding, record = agg.encode_volume(
            np.asarray(voxels, dtype=np.float64), self.encoder,
            self.config.encoder, self.aggregator, self.config.pool_heads)
        logits = heads.cls_head(embedding, self.cls_head, training=training,
                                dropout_rate=self.config.dropout_rate, rng=rng)
        projected = heads.l2_normalize(heads.proj_head(embedding, self.proj_head))
        return VolumeOutput(logits=logits, embedding=embedding,
                            projected=projected, attention=record)

    def predict_proba(self, voxels: np.ndarray) -> tuple[float, agg.AttentionRecord]:
        """Inference-mode probability of class 1, plus the attention record."""
        with no_grad():
            out = self.forward_volume(voxels, training=False)
        z = out.logits.data[0]
        shifted = z - z.max()
        e = np.exp(shifted)
        return float(e[1] / e.sum()), out.attention

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        mine = dict(self.named_parameters())
        missing = set(mine) - set(state)
        extra = set(state) - set(mine)
        if missing or extra:
            raise CheckpointError(
                f"parameter mismatch (missing {sorted(missing)[:3]}, "
                f"unexpected {sorted(extra)[:3]})")
        for name, tensor in mine.items():
            tensor.assign_(state[name])


def save_checkpoint(path: str | Path, model: ResponseModel, *, epoch: int,
                    metric: float, extra: dict | None = None) -> None:
    """Write header line + float64 little-endian parameter blob."""
    named = model.named_parameters()
    header = {
        "format": CHECKPOINT_FORMAT,
        "model": model.config.to_dict(),
        "epoch": int(epoch),
        "metric": float(metric),
        "manifest": [{"name": n, "shape": list(t.shape),
                      "trainable": bool(t.requires_grad)} for n, t in named],
    }
    if extra:
        header["extra"] = extra
    blob = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes()
                    for _, t in named)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[ResponseModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, header)."""
    with open(path, "rb") as fh:
        raw = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unknown checkpoint format {header.get('format')!r}")

    config = ModelConfig.from_dict(header["model"])
    model = ResponseModel.initialize(config, seed=0)
    named = model.named_parameters()
    manifest = header["manifest"]
    if [m["name"] for m in manifest] != [n for n, _ in named]:
        raise CheckpointError("checkpoint manifest does not match model structure")

    expected = sum(int(np.prod(m["shape"])) for m in manifest) * 8
    if len(blob) < expected:
        raise CheckpointError(
            f"checkpoint blob truncated: {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise CheckpointError(
            f"checkpoint blob has {len(blob) - expected} trailing bytes")

    offset = 0
    for entry, (name, tensor) in zip(manifest, named):
        shape = tuple(entry["shape"])
        if shape != tensor.shape:
            raise CheckpointError(f"shape mismatch for {name}: {shape} != {tensor.shape}")
        count = int(np.prod(shape))
        values = np.frombuffer(blob, dtype="<f8", count=count,
                               offset=offset).reshape(shape)
        tensor.assign_(values)
        offset += count * 8
    return model, header
