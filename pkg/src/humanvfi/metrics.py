"""PSNR, SSIM and interpolation error, plus report aggregation."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, Mapping, Sequence, Union

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .core import ClipRecord, Frame

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def as_array(img) -> np.ndarray:
    """H x W x C float64 array in [0, 1] from a Frame, an array or a (1 x) C x H x W tensor."""
    if isinstance(img, Frame):
        return img.pixels
    if isinstance(img, torch.Tensor):
        t = img.detach().cpu().double()
        if t.dim() == 4:
            if t.shape[0] != 1:
                raise ValueError("expected a single image, got a batch")
            t = t[0]
        return t.numpy().transpose(1, 2, 0)
    arr = np.asarray(img, dtype=np.float64)
    return arr[..., None] if arr.ndim == 2 else arr


def _pair(pred, gt):
    a, b = as_array(pred), as_array(gt)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse_255(pred, gt) -> float:
    a, b = _pair(pred, gt)
    return float(np.mean((a * 255.0 - b * 255.0) ** 2))


def psnr(pred, gt) -> float:
    """PSNR in dB on the 0-255 scale, capped at 100 dB."""
    mse = mse_255(pred, gt)
    if mse < 255.0 ** 2 * 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(255.0 ** 2 / mse)


def interpolation_error(pred, gt) -> float:
    """Root-mean-square difference on the 0-255 scale."""
    return math.sqrt(mse_255(pred, gt))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, len(g), axis=1) @ g
    return sliding_window_view(rows, len(g), axis=0) @ g


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM of two 2-D images over every fully contained 11 x 11 window."""
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(pred, gt, grayscale: bool = False) -> float:
    """Mean SSIM (11 x 11 Gaussian window, sigma 1.5), averaged over RGB channels."""
    a, b = _pair(pred, gt)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[0]}x{a.shape[1]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if grayscale:
        a, b = a.mean(axis=2, keepdims=True), b.mean(axis=2, keepdims=True)
    return float(np.mean([ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[2])]))


@dataclass
class FrameResult:
    clip_id: str
    frame_index: int  # 1..7 within the clip
    psnr: float
    ssim: float
    ie: float


def score_frame(clip_id: str, frame_index: int, pred, gt) -> FrameResult:
    return FrameResult(clip_id, frame_index, psnr(pred, gt), ssim(pred, gt), interpolation_error(pred, gt))


@dataclass
class Scores:
    psnr: float
    ssim: float
    ie: float
    frames: int = 0

    @classmethod
    def mean_of(cls, results: Sequence[FrameResult]) -> "Scores":
        return cls(float(np.mean([r.psnr for r in results])), float(np.mean([r.ssim for r in results])),
                   float(np.mean([r.ie for r in results])), len(results))


@dataclass
class MetricsReport:
    method: str
    overall: Scores
    per_clip: Dict[str, Scores] = field(default_factory=dict)
    per_category: Dict[str, Scores] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    def row(self) -> str:
        o = self.overall
        return f"{self.method} | {o.psnr:.2f} | {o.ssim:.3f} | {o.ie:.2f}"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            d["method"], Scores(**d["overall"]),
            {k: Scores(**v) for k, v in d.get("per_clip", {}).items()},
            {k: Scores(**v) for k, v in d.get("per_category", {}).items()},
            dict(d.get("counts", {})),
        )


def format_table(reports: Iterable[MetricsReport]) -> str:
    """Aligned human-readable table, one row per method."""
    rows = [("Method", "PSNR", "SSIM", "IE")]
    for r in reports:
        o = r.overall
        rows.append((r.method, f"{o.psnr:.2f}", f"{o.ssim:.3f}", f"{o.ie:.2f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = [" | ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(row))
             for row in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def aggregate_report(results: Sequence[FrameResult],
                     manifest: Union[Sequence[ClipRecord], Mapping[str, str]],
                     method: str = "model") -> MetricsReport:
    """Means per clip, per category and overall (over frames).

    ``manifest`` is either the clip records or a ``clip_id -> category`` map.
    """
    if isinstance(manifest, Mapping):
        category = dict(manifest)
    else:
        category = {r.clip_id: r.category for r in manifest}
    if not results:
        raise ValueError("no results to aggregate")
    by_clip = defaultdict(list)
    by_cat = defaultdict(list)
    for r in results:
        if r.clip_id not in category:
            raise KeyError(f"result references unknown clip {r.clip_id!r}")
        if not 1 <= r.frame_index <= 7:
            raise ValueError(f"frame index {r.frame_index} outside 1..7")
        by_clip[r.clip_id].append(r)
        by_cat[category[r.clip_id]].append(r)
    return MetricsReport(
        method=method,
        overall=Scores.mean_of(results),
        per_clip={k: Scores.mean_of(v) for k, v in sorted(by_clip.items())},
        per_category={k: Scores.mean_of(v) for k, v in sorted(by_cat.items())},
        counts={"clips": len(by_clip), "frames": len(results)},
    )
