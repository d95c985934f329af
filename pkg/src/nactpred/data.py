"""Synthetic lesion-mask volumes, file formats, and dataset splitting.

A volume is an H x W x S stack of soft masks holding one to three
ellipsoidal blobs.  Class 1 volumes differ from class 0 by a planted
morphological shift of magnitude ``signal_strength``: each blob's axial
extent is stretched by (1 + delta) and its in-plane cross-section is made
eccentric (area preserved).  At delta = 0 the two classes are drawn from
the identical distribution — every random draw happens the same way for
both labels — which is what makes the null-signal guard meaningful.

Volume files are one JSON header line plus a raw little-endian float32
voxel payload.  Dataset manifests are plain JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "SynthConfig",
    "MaskVolume",
    "PatientRecord",
    "DatasetManifest",
    "VolumeFormatError",
    "HeaderError",
    "TruncatedPayloadError",
    "ShapeMismatchError",
    "write_volume",
    "read_volume",
    "generate_synthetic",
    "split_dataset",
    "load_split",
]

VOLUME_FORMAT = "nactpred.maskvol.v1"
MANIFEST_FORMAT = "nactpred.manifest.v1"
SPLIT_NAMES = ("train", "val", "test")


class VolumeFormatError(ValueError):
    """Base class for volume decode failures."""


class HeaderError(VolumeFormatError):
    """The JSON header line is missing, malformed, or inconsistent."""


class TruncatedPayloadError(VolumeFormatError):
    """The voxel payload ends before the header-declared size."""


class ShapeMismatchError(VolumeFormatError):
    """The payload size exceeds or contradicts the header-declared shape."""


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int
    height: int = 64
    width: int = 64
    slices: int = 16
    class_balance: float = 0.5
    signal_strength: float = 1.5
    noise_level: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 4:
            raise ValueError("need at least 4 patients")
        if not 0.0 < self.class_balance < 1.0:
            raise ValueError("class_balance must be in (0, 1)")
        if self.signal_strength < 0.0:
            raise ValueError("signal_strength must be non-negative")
        if self.noise_level < 0.0:
            raise ValueError("noise_level must be non-negative")
        if min(self.height, self.width, self.slices) < 4:
            raise ValueError("volume dimensions are too small")


@dataclass
class MaskVolume:
    patient_id: str
    label: int
    voxels: np.ndarray  # (H, W, S) float32 in [0, 1]

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be H x W x S, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("voxels must be finite")
        if self.voxels.size and (self.voxels.min() < 0.0 or self.voxels.max() > 1.0):
            raise ValueError("voxels must lie in [0, 1]")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class PatientRecord:
    patient_id: str
    label: int
    file: str
    split: str | None = None


@dataclass
class DatasetManifest:
    height: int
    width: int
    slices: int
    patients: list[PatientRecord]
    generator: dict | None = None
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"format": MANIFEST_FORMAT, "height": self.height,
                "width": self.width, "slices": self.slices,
                "patients": [asdict(p) for p in self.patients],
                "generator": self.generator, "warnings": self.warnings}

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetManifest":
        if raw.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"unknown manifest format {raw.get('format')!r}")
        return cls(height=raw["height"], width=raw["width"], slices=raw["slices"],
                   patients=[PatientRecord(**p) for p in raw["patients"]],
                   generator=raw.get("generator"),
                   warnings=list(raw.get("warnings", [])))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# volume file format


def write_volume(path: str | Path, volume: MaskVolume) -> None:
    h, w, s = volume.voxels.shape
    header = {"format": VOLUME_FORMAT, "patient_id": volume.patient_id,
              "label": int(volume.label), "height": h, "width": w, "slices": s,
              "dtype": "<f4"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())


def read_volume(path: str | Path) -> MaskVolume:
    with open(path, "rb") as fh:
        raw = fh.readline(1 << 16)
        payload = fh.read()
    if not raw.endswith(b"\n"):
        raise HeaderError("volume header line missing or oversized")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"unreadable volume header: {exc}") from exc
    if header.get("format") != VOLUME_FORMAT:
        raise HeaderError(f"unknown volume format {header.get('format')!r}")
    try:
        shape = (int(header["height"]), int(header["width"]), int(header["slices"]))
        patient_id = str(header["patient_id"])
        label = int(header["label"])
        dtype = header["dtype"]
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"volume header missing fields: {exc}") from exc
    if dtype != "<f4":
        raise HeaderError(f"unsupported voxel dtype {dtype!r}")
    if min(shape) < 1:
        raise HeaderError(f"non-positive shape {shape} in header")
    expected = shape[0] * shape[1] * shape[2] * 4
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes, header declares {expected}")
    if len(payload) > expected:
        raise ShapeMismatchError(
            f"payload holds {len(payload) - expected} bytes beyond the "
            f"header-declared shape {shape}")
    voxels = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return MaskVolume(patient_id=patient_id, label=label, voxels=voxels.copy())


# ---------------------------------------------------------------------------
# synthetic generation


def _uniform(rng: np.random.Generator, low: float, high: float) -> float:
    """One draw, mapped to [low, high]; midpoint when the range is empty.

    Always consumes exactly one variate so the draw sequence is identical
    for both classes regardless of label-dependent ranges.
    """
    u = float(rng.random())
    if high <= low:
        return 0.5 * (low + high)
    return low + (high - low) * u


def _blob_field(shape: tuple[int, int, int], center, axes, angle) -> np.ndarray:
    """Soft ellipsoid: logistic falloff around the unit-radius surface."""
    h, w, s = shape
    cy, cx, cz = center
    ay, ax_, az = axes
    yy = np.arange(h, dtype=np.float64)[:, None, None] - cy
    xx = np.arange(w, dtype=np.float64)[None, :, None] - cx
    zz = np.arange(s, dtype=np.float64)[None, None, :] - cz
    cos_t, sin_t = math.cos(angle), math.sin(angle)
    u = xx * cos_t + yy * sin_t
    v = -xx * sin_t + yy * cos_t
    rho = np.sqrt((u / ax_) ** 2 + (v / ay) ** 2 + (zz / az) ** 2)
    return 1.0 / (1.0 + np.exp((rho - 1.0) / 0.08))


def _synth_volume(cfg: SynthConfig, label: int,
                  rng: np.random.Generator) -> np.ndarray:
    """One patient volume.  Label enters only through deterministic
    arithmetic on the shared draws, never through extra randomness."""
    h, w, s = cfg.height, cfg.width, cfg.slices
    delta = cfg.signal_strength if label == 1 else 0.0
    vol = np.zeros((h, w, s), dtype=np.float64)
    n_blobs = int(rng.integers(1, 4))
    for _ in range(n_blobs):
        base_a = _uniform(rng, 0.10, 0.15) * w   # in-plane semi-axes
        base_b = _uniform(rng, 0.10, 0.15) * h
        base_c = _uniform(rng, 0.12, 0.18) * s   # axial semi-axis
        angle = _uniform(rng, 0.0, math.pi)
        stretch = math.sqrt(1.0 + delta)
        ax_ = base_a * stretch          # eccentricity shift, area preserved
        ay = base_b / stretch
        az = base_c * (1.0 + delta)     # axial-extent shift
        margin_xy = max(ax_, ay) + 1.0
        cx = _uniform(rng, margin_xy, w - margin_xy)
        cy = _uniform(rng, margin_xy, h - margin_xy)
        cz = _uniform(rng, az + 0.5, s - az - 0.5)
        vol = np.maximum(vol, _blob_field((h, w, s), (cy, cx, cz),
                                          (ay, ax_, az), angle))
    if cfg.noise_level > 0.0:
        vol = vol + rng.normal(0.0, cfg.noise_level, size=vol.shape)
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def generate_synthetic(cfg: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Write one volume file per patient plus the manifest; returns it.

    Dataset bytes are a pure function of the config: labels come from one
    seeded shuffle, each patient's geometry from a per-patient substream.
    """
    out_dir = Path(out_dir)
    volume_dir = out_dir / "volumes"
    volume_dir.mkdir(parents=True, exist_ok=True)

    n_pos = round(cfg.n_patients * cfg.class_balance)
    if n_pos == 0 or n_pos == cfg.n_patients:
        raise ValueError("class_balance leaves one class empty")
    labels = np.array([1] * n_pos + [0] * (cfg.n_patients - n_pos))
    np.random.default_rng([cfg.seed, 0]).shuffle(labels)

    patients = []
    for i in range(cfg.n_patients):
        pid = f"p{i:04d}"
        label = int(labels[i])
        voxels = _synth_volume(cfg, label, np.random.default_rng([cfg.seed, 1, i]))
        rel = f"volumes/{pid}.vol"
        write_volume(out_dir / rel, MaskVolume(pid, label, voxels))
        patients.append(PatientRecord(patient_id=pid, label=label, file=rel))

    manifest = DatasetManifest(height=cfg.height, width=cfg.width,
                               slices=cfg.slices, patients=patients,
                               generator=asdict(cfg))
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# splitting and loading


def split_dataset(manifest: DatasetManifest, fractions=(0.6, 0.2, 0.2),
                  seed: int = 0) -> DatasetManifest:
    """Assign train/val/test stratified by label (largest-remainder rule).

    Per class, patients are shuffled by a seeded generator and allotted to
    splits in proportion to ``fractions``; remainders go to the splits
    with the largest fractional dues.  Class ratios per split land within
    one patient of the global ratio.
    """
    if len(fractions) != len(SPLIT_NAMES):
        raise ValueError(f"expected {len(SPLIT_NAMES)} fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    if min(fractions) <= 0.0:
        raise ValueError("every split needs a positive fraction")

    assignment: dict[str, str] = {}
    for cls in (0, 1):
        members = [p.patient_id for p in manifest.patients if p.label == cls]
        rng = np.random.default_rng([seed, cls])
        rng.shuffle(members)
        exact = [f * len(members) for f in fractions]
        counts = [int(x) for x in exact]
        remainders = sorted(range(len(fractions)),
                            key=lambda k: (-(exact[k] - counts[k]), k))
        for k in remainders[:len(members) - sum(counts)]:
            counts[k] += 1
        cursor = 0
        for name, count in zip(SPLIT_NAMES, counts):
            for pid in members[cursor:cursor + count]:
                assignment[pid] = name
            cursor += count

    patients = [PatientRecord(p.patient_id, p.label, p.file,
                              assignment[p.patient_id])
                for p in manifest.patients]
    warnings = list(manifest.warnings)
    for name in SPLIT_NAMES:
        labels_here = {p.label for p in patients if p.split == name}
        if labels_here != {0, 1}:
            warnings.append(f"split '{name}' does not contain both classes")
    return DatasetManifest(height=manifest.height, width=manifest.width,
                           slices=manifest.slices, patients=patients,
                           generator=manifest.generator, warnings=warnings)


def load_split(manifest: DatasetManifest, base_dir: str | Path,
               split: str | None = None) -> list[MaskVolume]:
    """Load the volumes of one split (or all patients when split is None)."""
    if split is not None and split not in SPLIT_NAMES:
        raise ValueError(f"unknown split {split!r}")
    base = Path(base_dir)
    out = []
    for p in manifest.patients:
        if split is not None and p.split != split:
            continue
        volume = read_volume(base / p.file)
        if volume.patient_id != p.patient_id or volume.label != p.label:
            raise HeaderError(
                f"manifest entry {p.patient_id} disagrees with file {p.file}")
        if volume.voxels.shape != (manifest.height, manifest.width, manifest.slices):
            raise ShapeMismatchError(
                f"{p.file} shape {volume.voxels.shape} does not match manifest")
        out.append(volume)
    return out
