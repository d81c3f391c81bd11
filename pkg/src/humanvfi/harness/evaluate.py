"""The two evaluation protocols: direct arbitrary-t synthesis and recursive midpoints."""

from __future__ import annotations

from typing import List, Sequence

import torch

from ..core import Clip
from ..interp import as_interpolator, interpolate_recursive_midpoints
from ..metrics import FrameResult, aggregate_report, score_frame
from .data import ManifestDataset, categories_of

PROTOCOLS = ("arbitrary_t", "recursive")


def predict_clip(model, clip: Clip, protocol: str, dtype=torch.float32) -> List[torch.Tensor]:
    """Predictions for the 7 intermediate frames at t = k/8."""
    I0 = clip.frames[0].to_tensor(dtype)
    I1 = clip.frames[-1].to_tensor(dtype)
    n = len(clip.frames) - 1
    if protocol == "arbitrary_t":
        interp = as_interpolator(model)
        return [interp(I0, I1, k / n) for k in range(1, n)]
    if protocol == "recursive":
        depth = n.bit_length() - 1
        if 2 ** depth != n:
            raise ValueError(f"recursive protocol needs 2^d + 1 frames, got {len(clip.frames)}")
        return interpolate_recursive_midpoints(model, I0, I1, depth)
    raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")


def evaluate(model, dataset: Sequence[Clip], protocol: str = "arbitrary_t", method: str = "model",
             split: str = "test", dtype=torch.float32, return_frames: bool = False):
    """Score every intermediate frame of every clip and aggregate into a report."""
    if isinstance(dataset, ManifestDataset):
        leaked = [r.clip_id for r in dataset.records if r.split != split]
        if leaked:
            raise ValueError(f"{len(leaked)} clip(s) outside the {split!r} split, e.g. {leaked[0]}")
    if len(dataset) == 0:
        raise ValueError("evaluation set is empty")
    was_training = getattr(model, "training", False)
    if isinstance(model, torch.nn.Module):
        model.eval()
    results: List[FrameResult] = []
    try:
        with torch.no_grad():
            for clip in dataset:
                preds = predict_clip(model, clip, protocol, dtype)
                for k, pred in enumerate(preds, start=1):
                    results.append(score_frame(clip.clip_id, k, pred.clamp(0, 1), clip.frames[k]))
    finally:
        if was_training:
            model.train()
    report = aggregate_report(results, categories_of(dataset), method)
    return (report, results) if return_frames else report
