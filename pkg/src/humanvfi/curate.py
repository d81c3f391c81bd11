"""Semi-automatic clip curation: human filter, flash rejection, motion gate, clip splitting."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch

from .core import CLIP_LENGTH, MIN_REAL_RESOLUTION, ClipRecord, FlowField, Frame, read_frame
from .priors import BoxDetector, detect_boxes

FlowFn = Callable[[Frame, Frame], FlowField]
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class CurationConfig:
    brightness_threshold: float = 30.0  # mean-luma delta on the 0-255 scale
    min_flow: float = 1.0
    max_flow: float = 50.0
    min_humans: int = 1
    clip_len: int = CLIP_LENGTH
    min_resolution: Tuple[int, int] = MIN_REAL_RESOLUTION  # (width, height)

    def __post_init__(self):
        self.min_resolution = tuple(int(v) for v in self.min_resolution)
        if self.brightness_threshold <= 0 or self.min_flow <= 0 or self.max_flow <= 0:
            raise ValueError("thresholds must be positive")
        if self.min_flow > self.max_flow:
            raise ValueError("min_flow exceeds max_flow")
        if self.min_humans < 1:
            raise ValueError("min_humans must be >= 1")
        if self.clip_len != CLIP_LENGTH:
            raise ValueError(f"clip_len must be {CLIP_LENGTH}")
        if len(self.min_resolution) != 2 or min(self.min_resolution) <= 0:
            raise ValueError("min_resolution must be a positive (width, height)")


def human_presence_filter(frames: Sequence[Frame], detector: BoxDetector, cfg: CurationConfig) -> np.ndarray:
    """True where the detector finds at least ``min_humans`` people."""
    return np.array([len(detect_boxes(detector, f)) >= cfg.min_humans for f in frames], dtype=bool)


def detect_flash(frames: Sequence[Frame], cfg: CurationConfig) -> Set[int]:
    """Indices i whose mean luma jumps by more than the threshold from frame i - 1."""
    if len(frames) < 2:
        raise ValueError("flash detection needs at least 2 frames")
    lum = np.array([f.mean_luma() for f in frames])
    return {int(i) + 1 for i in np.nonzero(np.abs(np.diff(lum)) > cfg.brightness_threshold)[0]}


def pair_flow_magnitudes(frames: Sequence[Frame], flow_fn: FlowFn,
                         pairs: Optional[Sequence[int]] = None) -> Dict[int, float]:
    """Mean flow magnitude of each pair (i, i + 1), keyed by i; all pairs unless ``pairs`` is given."""
    if pairs is None:
        pairs = range(len(frames) - 1)
    return {i: flow_fn(frames[i], frames[i + 1]).mean_magnitude() for i in pairs}


def passes_motion(magnitude: float, cfg: CurationConfig) -> bool:
    return cfg.min_flow <= magnitude <= cfg.max_flow


def motion_gate(frames: Sequence[Frame], flow_fn: FlowFn, cfg: CurationConfig) -> np.ndarray:
    mags = pair_flow_magnitudes(frames, flow_fn)
    return np.array([passes_motion(mags[i], cfg) for i in range(len(frames) - 1)], dtype=bool)


def split_into_clips(run: Sequence[int], cfg: CurationConfig) -> List[List[int]]:
    """Greedy non-overlapping groups of ``clip_len`` consecutive indices; the remainder is dropped."""
    run = list(run)
    if any(b != a + 1 for a, b in zip(run, run[1:])):
        raise ValueError("run indices must be contiguous")
    n = cfg.clip_len
    return [run[s:s + n] for s in range(0, len(run) - n + 1, n)]


def maximal_runs(pair_ok: Sequence[bool]) -> List[List[int]]:
    """Maximal frame-index runs whose consecutive pairs all pass; pair i joins frames i and i + 1."""
    runs, start = [], None
    for i, ok in enumerate(pair_ok):
        if ok and start is None:
            start = i
        elif not ok and start is not None:
            runs.append(list(range(start, i + 1)))
            start = None
    if start is not None:
        runs.append(list(range(start, len(pair_ok) + 1)))
    return runs


def _source_rank(seed: int, category: str, source_id: str) -> str:
    return hashlib.sha256(f"{seed}:{category}:{source_id}".encode()).hexdigest()


def assign_split(records: Sequence[ClipRecord], test_fraction: float, seed: int = 0) -> List[ClipRecord]:
    """Assign whole sources to train or test, separately within each category.

    Sources of a category are ordered by a seeded hash and the first
    ``round(test_fraction * n_sources)`` go to test, so the test share is
    within half a source of the target and all clips of a source agree.
    """
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError("test_fraction must lie in [0, 1]")
    by_cat: Dict[str, Set[str]] = {}
    for r in records:
        by_cat.setdefault(r.category, set()).add(r.source_id)
    test_sources = set()
    for cat, sources in by_cat.items():
        ordered = sorted(sources, key=lambda s: (_source_rank(seed, cat, s), s))
        n_test = int(math.floor(test_fraction * len(ordered) + 0.5))
        test_sources.update((cat, s) for s in ordered[:n_test])
    out = []
    for r in records:
        d = r.to_dict()
        d["split"] = "test" if (r.category, r.source_id) in test_sources else "train"
        out.append(ClipRecord.from_dict(d))
    return out


@dataclass
class CurationResult:
    source_id: str
    records: List[ClipRecord]
    clips: List[List[int]]  # frame indices of each emitted clip
    runs: List[List[int]]
    rejections: List[dict] = field(default_factory=list)
    pair_magnitudes: Dict[int, float] = field(default_factory=dict)

    def summary(self) -> dict:
        counts: Dict[str, int] = {}
        for r in self.rejections:
            counts[r["reason"]] = counts.get(r["reason"], 0) + 1
        return {"source_id": self.source_id, "clips": len(self.clips), "rejections": counts}


def run_pipeline(video_frames: Sequence[Frame], detector: BoxDetector, flow_fn: FlowFn, cfg: CurationConfig,
                 source_id: str = "video", category: str = "unknown",
                 frame_names: Optional[Sequence[str]] = None) -> CurationResult:
    """Curate one video into 9-frame clip records.

    Stages: resolution check, human filter, flash rejection, motion gate on
    pairs of surviving frames, maximal valid runs, greedy clip splitting.
    ``frame_names`` supplies the path stored for each frame in the records.
    """
    n = len(video_frames)
    if frame_names is None:
        frame_names = [f"{source_id}/{i:06d}.png" for i in range(n)]
    if len(frame_names) != n:
        raise ValueError("frame_names must name every frame")
    rejections: List[dict] = []
    if n < 2:
        rejections.append({"reason": "too_short", "frames": n})
        return CurationResult(source_id, [], [], [], rejections)

    w, h = video_frames[0].width, video_frames[0].height
    min_w, min_h = cfg.min_resolution
    if w < min_w or h < min_h:
        rejections.append({"reason": "resolution", "size": [w, h], "minimum": [min_w, min_h]})
        return CurationResult(source_id, [], [], [], rejections)

    valid = human_presence_filter(video_frames, detector, cfg)
    rejections += [{"reason": "no_human", "frame": int(i)} for i in np.nonzero(~valid)[0]]
    for i in sorted(detect_flash(video_frames, cfg)):
        rejections.append({"reason": "flash", "frame": i})
        valid[i] = False

    candidates = [i for i in range(n - 1) if valid[i] and valid[i + 1]]
    mags = pair_flow_magnitudes(video_frames, flow_fn, candidates)
    pair_ok = np.zeros(n - 1, dtype=bool)
    for i in candidates:
        pair_ok[i] = passes_motion(mags[i], cfg)
        if not pair_ok[i]:
            rejections.append({"reason": "motion", "pair": [i, i + 1], "magnitude": mags[i]})

    runs = maximal_runs(pair_ok)
    clips = [c for run in runs for c in split_into_clips(run, cfg)]
    if not clips:
        rejections.append({"reason": "no_clips"})
    records = []
    for k, idx in enumerate(clips):
        mean_mag = float(np.mean([mags[i] for i in idx[:-1]]))
        records.append(ClipRecord(f"{source_id}_{k:04d}", source_id, category,
                                  [frame_names[i] for i in idx], "train", mean_mag))
    return CurationResult(source_id, records, clips, runs, rejections, mags)


def curate_videos(videos: Dict[str, Sequence[Frame]], detector: BoxDetector, flow_fn: FlowFn,
                  cfg: CurationConfig, categories: Optional[Dict[str, str]] = None) -> List[CurationResult]:
    """Run the pipeline on each video, ordered by source id."""
    categories = categories or {}
    return [run_pipeline(videos[s], detector, flow_fn, cfg, source_id=s, category=categories.get(s, "unknown"))
            for s in sorted(videos)]


def read_review(path) -> Dict[str, bool]:
    """Parse a review list: one ``<clip_id> accept|reject`` per line, ``#`` starts a comment."""
    verdicts = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("accept", "reject"):
            raise ValueError(f"{path}:{lineno}: expected '<clip_id> accept|reject', got {raw!r}")
        verdicts[parts[0]] = parts[1] == "accept"
    return verdicts


def apply_review(records: Sequence[ClipRecord], path) -> List[ClipRecord]:
    """Drop clips marked ``reject`` by the manual review; unlisted clips are kept."""
    verdicts = read_review(path)
    known = {r.clip_id for r in records}
    unknown = sorted(set(verdicts) - known)
    if unknown:
        raise KeyError(f"review lists unknown clip(s): {', '.join(unknown)}")
    return [r for r in records if verdicts.get(r.clip_id, True)]


def load_video_frames(path) -> Tuple[List[Frame], List[str]]:
    """Frames of a video file or of a directory of images (sorted by name), with their names."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        return [read_frame(p) for p in files], [p.name for p in files]
    import cv2

    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise OSError(f"cannot open video {path}")
    frames = []
    try:
        while True:
            ok, bgr = cap.read()
            if not ok:
                break
            frames.append(Frame.from_uint8(bgr[..., ::-1].copy()))
    finally:
        cap.release()
    return frames, [f"{i:06d}.png" for i in range(len(frames))]


def zero_flow(a: Frame, b: Frame) -> FlowField:
    return FlowField(np.zeros((a.height, a.width, 2)))


def farneback_flow(a: Frame, b: Frame) -> FlowField:
    """Dense Farneback flow from ``a`` to ``b`` on ``a``'s grid."""
    import cv2

    ga = cv2.cvtColor(a.to_uint8(), cv2.COLOR_RGB2GRAY)
    gb = cv2.cvtColor(b.to_uint8(), cv2.COLOR_RGB2GRAY)
    flow = cv2.calcOpticalFlowFarneback(ga, gb, None, 0.5, 3, 15, 3, 5, 1.2, 0)
    return FlowField(flow.astype(np.float64))


def estimator_flow(est) -> FlowFn:
    """Flow function backed by a trained estimator's forward flow F_{0->1}."""
    dtype = next(est.parameters()).dtype

    def flow_fn(a: Frame, b: Frame) -> FlowField:
        with torch.no_grad():
            f01, _ = est(a.to_tensor(dtype), b.to_tensor(dtype))
        return FlowField.from_tensor(f01)

    return flow_fn
