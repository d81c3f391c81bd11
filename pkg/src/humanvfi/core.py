"""Domain types shared across the toolkit, clip validation and manifest I/O."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image

CLIP_LENGTH = 9
MIN_SYNTHETIC_SIZE = 16
MIN_REAL_RESOLUTION = (1280, 720)  # (width, height)
SPLITS = ("train", "test")


class ManifestError(ValueError):
    """Raised when a manifest line cannot be parsed into a ClipRecord."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class Frame:
    """An RGB image, H x W x 3, float values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("frame contains non-finite values")
        if px.min(initial=0.0) < 0.0 or px.max(initial=0.0) > 1.0:
            raise ValueError("frame values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """Return a 1 x 3 x H x W tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1))).to(dtype)[None]

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "Frame":
        t = t.detach().cpu()
        if t.dim() == 4:
            if t.shape[0] != 1:
                raise ValueError("from_tensor expects a single image")
            t = t[0]
        return cls(t.double().clamp(0.0, 1.0).numpy().transpose(1, 2, 0))

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "Frame":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    def mean_luma(self) -> float:
        """Mean luma on the 0-255 scale (luma = mean of RGB)."""
        return float(self.pixels.mean() * 255.0)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel (dx, dy) displacement in pixels, H x W x 2."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2:
            raise ValueError(f"expected H x W x 2 flow, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("flow contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.vectors[..., 0], self.vectors[..., 1])

    def mean_magnitude(self) -> float:
        return float(self.magnitude().mean())

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.vectors.transpose(2, 0, 1))).to(dtype)[None]

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "FlowField":
        t = t.detach().cpu()
        if t.dim() == 4:
            t = t[0]
        return cls(t.double().numpy().transpose(1, 2, 0))


@dataclass(frozen=True)
class Clip:
    frames: tuple
    clip_id: str = ""
    source_id: str = ""
    category: str = ""

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))

    def __len__(self):
        return len(self.frames)


@dataclass
class LossConfig:
    """Weights and constants of the training objective.

    ``lambda_seg`` and ``lambda_kpt`` have no published values; the
    defaults are placeholders meant to be tuned per model.
    """

    alpha: float = 0.5
    epsilon: float = 1e-6
    lambda_cen: float = 1.0
    lambda_seg: float = 0.01
    lambda_kpt: float = 0.1
    lambda_ce: float = 5.0
    lambda_dice: float = 5.0
    census_patch: int = 7
    dice_smooth: float = 1.0
    person_only: bool = True
    slot_matching: str = "index"  # or "hungarian"
    min_mask_area: float = 0.001  # fraction of the mask area

    def __post_init__(self):
        for name in ("lambda_cen", "lambda_seg", "lambda_kpt", "lambda_ce", "lambda_dice"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.census_patch < 3 or self.census_patch % 2 == 0:
            raise ValueError("census_patch must be an odd integer >= 3")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be positive")
        if self.slot_matching not in ("index", "hungarian"):
            raise ValueError(f"unknown slot_matching {self.slot_matching!r}")


@dataclass
class ClipRecord:
    clip_id: str
    source_id: str
    category: str
    frame_paths: List[str]
    split: str = "train"
    mean_flow_mag: float = 0.0

    def __post_init__(self):
        self.frame_paths = list(self.frame_paths)
        if len(self.frame_paths) != CLIP_LENGTH:
            raise ValueError(f"expected {CLIP_LENGTH} frame paths, got {len(self.frame_paths)}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not (self.mean_flow_mag >= 0 and math.isfinite(self.mean_flow_mag)):
            raise ValueError("mean_flow_mag must be a finite nonnegative number")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClipRecord":
        missing = [k for k in ("clip_id", "source_id", "category", "frame_paths", "split", "mean_flow_mag") if k not in d]
        if missing:
            raise KeyError(f"missing field(s): {', '.join(missing)}")
        return cls(
            clip_id=str(d["clip_id"]),
            source_id=str(d["source_id"]),
            category=str(d["category"]),
            frame_paths=[str(p) for p in d["frame_paths"]],
            split=str(d["split"]),
            mean_flow_mag=float(d["mean_flow_mag"]),
        )


@dataclass
class ValidationResult:
    errors: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def __bool__(self):
        return self.ok


def validate_clip(clip: Clip, require_real_resolution: bool = False) -> ValidationResult:
    """Check the clip invariants; every violation is reported, nothing raises."""
    errors = []
    n = len(clip.frames)
    if n != CLIP_LENGTH:
        errors.append(f"frame count {n} ≠ {CLIP_LENGTH}")
    if n:
        ref = clip.frames[0]
        for k, fr in enumerate(clip.frames):
            if not isinstance(fr, Frame):
                errors.append(f"frame {k} is not a Frame")
                continue
            if fr.shape != ref.shape:
                errors.append(f"dimension mismatch at index {k}: {fr.height}x{fr.width} vs {ref.height}x{ref.width}")
        if isinstance(ref, Frame):
            min_w, min_h = MIN_REAL_RESOLUTION if require_real_resolution else (MIN_SYNTHETIC_SIZE, MIN_SYNTHETIC_SIZE)
            if ref.width < min_w or ref.height < min_h:
                errors.append(f"resolution {ref.width}x{ref.height} below minimum {min_w}x{min_h}")
    return ValidationResult(errors)


def write_manifest(records: Iterable[ClipRecord], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_manifest(path: Union[str, Path]) -> List[ClipRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(ClipRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(lineno, str(exc)) from exc
    return records


def read_frame(path: Union[str, Path]) -> Frame:
    with Image.open(path) as im:
        return Frame.from_uint8(np.asarray(im.convert("RGB")))


def write_frame(frame: Frame, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(frame.to_uint8()).save(path)


def load_clip(record: ClipRecord, root: Union[str, Path]) -> Clip:
    root = Path(root)
    frames = [read_frame(root / p) for p in record.frame_paths]
    return Clip(frames, clip_id=record.clip_id, source_id=record.source_id, category=record.category)


def save_clip(clip: Clip, root: Union[str, Path], split: str = "train", mean_flow_mag: float = 0.0) -> ClipRecord:
    """Write the clip's frames as PNGs under ``root`` and return its record."""
    rel = [f"{clip.source_id}/{clip.clip_id}/im{k + 1}.png" for k in range(len(clip.frames))]
    for fr, p in zip(clip.frames, rel):
        write_frame(fr, Path(root) / p)
    return ClipRecord(clip.clip_id, clip.source_id, clip.category, rel, split, mean_flow_mag)


def frames_to_batch(frames: Sequence[Frame], dtype=torch.float32) -> torch.Tensor:
    return torch.cat([f.to_tensor(dtype) for f in frames], dim=0)


def filter_split(records: Sequence[ClipRecord], split: Optional[str]) -> List[ClipRecord]:
    if split is None:
        return list(records)
    return [r for r in records if r.split == split]
