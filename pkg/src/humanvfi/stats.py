"""Flow-magnitude histograms of a clip collection, per pixel and per image."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .core import Clip, ClipRecord, FlowField, Frame, read_frame

log = logging.getLogger(__name__)

DEFAULT_BINS = 60
DEFAULT_WIDTH = 1.0


def bin_index(values: np.ndarray, bins: int = DEFAULT_BINS, width: float = DEFAULT_WIDTH) -> np.ndarray:
    """Bin of each nonnegative value: [k*width, (k+1)*width), with the last bin open-ended."""
    v = np.asarray(values, dtype=np.float64)
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError("magnitudes must be finite and nonnegative")
    return np.minimum(np.floor(v / width).astype(np.int64), bins - 1)


@dataclass
class FlowHistograms:
    bins: int = DEFAULT_BINS
    width: float = DEFAULT_WIDTH
    pixel_counts: np.ndarray = None
    image_counts: np.ndarray = None
    image_means: List[float] = field(default_factory=list)
    category_counts: Dict[str, int] = field(default_factory=dict)
    skipped: int = 0

    def __post_init__(self):
        if self.bins < 1 or self.width <= 0:
            raise ValueError("need at least one bin of positive width")
        if self.pixel_counts is None:
            self.pixel_counts = np.zeros(self.bins, dtype=np.int64)
        if self.image_counts is None:
            self.image_counts = np.zeros(self.bins, dtype=np.int64)

    @property
    def edges(self) -> np.ndarray:
        e = np.arange(self.bins + 1, dtype=np.float64) * self.width
        e[-1] = math.inf
        return e

    def add(self, flow: FlowField, category: str = "unknown"):
        mag = flow.magnitude()
        self.pixel_counts += np.bincount(bin_index(mag.ravel(), self.bins, self.width), minlength=self.bins)
        mean = float(mag.mean())
        self.image_counts[bin_index(mean, self.bins, self.width)] += 1
        self.image_means.append(mean)
        self.category_counts[category] = self.category_counts.get(category, 0) + 1

    def merge(self, other: "FlowHistograms") -> "FlowHistograms":
        if (self.bins, self.width) != (other.bins, other.width):
            raise ValueError("cannot merge histograms with different binning")
        cats = dict(self.category_counts)
        for k, v in other.category_counts.items():
            cats[k] = cats.get(k, 0) + v
        return FlowHistograms(self.bins, self.width, self.pixel_counts + other.pixel_counts,
                              self.image_counts + other.image_counts, self.image_means + other.image_means,
                              cats, self.skipped + other.skipped)

    def fraction_above(self, threshold: float) -> float:
        """Share of images whose mean magnitude exceeds ``threshold``."""
        if not self.image_means:
            return 0.0
        return float(np.mean(np.asarray(self.image_means) > threshold))

    def rows(self) -> List[Tuple[float, float, int, int]]:
        e = self.edges
        return [(e[k], e[k + 1], int(self.pixel_counts[k]), int(self.image_counts[k])) for k in range(self.bins)]

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["bin_lo", "bin_hi", "pixel_count", "image_count"])
            for lo, hi, p, i in self.rows():
                w.writerow([f"{lo:g}", "inf" if math.isinf(hi) else f"{hi:g}", p, i])


FlowFn = Callable[[Frame, Frame], FlowField]


def clip_histograms(clips: Iterable[Clip], flow_fn: FlowFn, bins: int = DEFAULT_BINS,
                    width: float = DEFAULT_WIDTH) -> FlowHistograms:
    """Histograms over the first/last frame pair of each in-memory clip."""
    hist = FlowHistograms(bins, width)
    for clip in clips:
        hist.add(flow_fn(clip.frames[0], clip.frames[-1]), clip.category)
    return hist


def flow_histograms(records: Sequence[ClipRecord], root, flow_fn: FlowFn, bins: int = DEFAULT_BINS,
                    width: float = DEFAULT_WIDTH) -> FlowHistograms:
    """Histograms over the first/last frame pair of each manifest clip; unreadable clips are counted and skipped."""
    root = Path(root)
    hist = FlowHistograms(bins, width)
    for rec in records:
        try:
            first = read_frame(root / rec.frame_paths[0])
            last = read_frame(root / rec.frame_paths[-1])
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", rec.clip_id, exc)
            hist.skipped += 1
            continue
        hist.add(flow_fn(first, last), rec.category)
    return hist
