"""Training loop for the baseline interpolator with optional human-aware terms."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch

from ..core import CLIP_LENGTH, Clip, Frame, LossConfig
from ..interp import EstimatorDescriptor, FlowEstimator, interpolate_at, save_checkpoint
from ..losses import total_loss
from ..priors import Priors

log = logging.getLogger(__name__)

TARGET_MODES = ("arbitrary_t", "middle_triplet")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, components: dict):
        super().__init__(f"non-finite loss at step {step}: {components}")
        self.step = step
        self.components = components


class FrozenPriorError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    crop_size: Optional[int] = None  # square crop side; None trains on full frames
    steps: int = 1000
    lr: float = 1e-4
    lr_schedule: str = "cosine"  # or "constant"
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: EstimatorDescriptor = field(default_factory=EstimatorDescriptor)
    target_sampling: str = "arbitrary_t"
    hflip: bool = True
    reverse: bool = True
    freeze_check_every: int = 100
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.model, dict):
            self.model = EstimatorDescriptor(**self.model)
        if self.target_sampling not in TARGET_MODES:
            raise ValueError(f"target_sampling must be one of {TARGET_MODES}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.crop_size is not None and self.crop_size % self.model.downsample_factor:
            raise ValueError(f"crop_size {self.crop_size} not divisible by {self.model.downsample_factor}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")


class TargetSample(NamedTuple):
    I0: Frame
    I1: Frame
    target: Frame
    t: float
    indices: Tuple[int, int, int]


def middle_triplets(n: int = CLIP_LENGTH) -> List[Tuple[int, int]]:
    """All (start, gap) with start + 2 * gap inside an n-frame clip."""
    return [(i, d) for d in range(1, n) for i in range(n) if i + 2 * d <= n - 1]


def sample_training_target(clip: Clip, mode: str, rng: np.random.Generator) -> TargetSample:
    last = len(clip.frames) - 1
    if mode == "arbitrary_t":
        k = int(rng.integers(1, last))
        idx, t = (0, last, k), k / last
    elif mode == "middle_triplet":
        triplets = middle_triplets(len(clip.frames))
        i, d = triplets[int(rng.integers(len(triplets)))]
        idx, t = (i, i + 2 * d, i + d), 0.5
    else:
        raise ValueError(f"unknown target sampling mode {mode!r}")
    f = clip.frames
    return TargetSample(f[idx[0]], f[idx[1]], f[idx[2]], t, idx)


def make_batch(dataset: Sequence[Clip], cfg: TrainConfig, rng: np.random.Generator):
    """Sample, crop and augment a batch; returns (I0, I1, target, t)."""
    dtype = DTYPES[cfg.dtype]
    triplets, times = [], []
    for _ in range(cfg.batch_size):
        clip = dataset[int(rng.integers(len(dataset)))]
        s = sample_training_target(clip, cfg.target_sampling, rng)
        x = torch.cat([s.I0.to_tensor(dtype), s.I1.to_tensor(dtype), s.target.to_tensor(dtype)])
        t = s.t
        if cfg.crop_size is not None:
            h, w = x.shape[-2:]
            c = cfg.crop_size
            if c > h or c > w:
                raise ValueError(f"crop {c} larger than frame {h}x{w}")
            top = int(rng.integers(0, h - c + 1))
            left = int(rng.integers(0, w - c + 1))
            x = x[..., top:top + c, left:left + c]
        if cfg.hflip and rng.random() < 0.5:
            x = x.flip(-1)
        if cfg.reverse and rng.random() < 0.5:
            x = x[[1, 0, 2]]
            t = 1.0 - t
        triplets.append(x)
        times.append(t)
    batch = torch.stack(triplets)
    return batch[:, 0], batch[:, 1], batch[:, 2], torch.tensor(times, dtype=dtype)


@dataclass
class TrainResult:
    estimator: FlowEstimator
    log: List[dict]
    prior_digests: List[str] = field(default_factory=list)


def _learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "constant" or cfg.steps <= 1:
        return cfg.lr
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * step / cfg.steps))


def train(est: FlowEstimator, dataset: Sequence[Clip], cfg: TrainConfig, priors: Optional[Priors] = None,
          log_path=None, checkpoint_path=None) -> TrainResult:
    """Optimise ``est`` in place on ``dataset`` and return it with the per-step log."""
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    priors = priors or Priors()
    dtype = DTYPES[cfg.dtype]
    est.to(dtype)
    priors.to(dtype)
    digests = priors.digests()
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    records = []
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        if cfg.steps > 0:
            est.train()
            opt = torch.optim.Adam(est.parameters(), lr=cfg.lr)
            for step in range(cfg.steps):
                lr = _learning_rate(cfg, step)
                for group in opt.param_groups:
                    group["lr"] = lr
                I0, I1, target, t = make_batch(dataset, cfg, rng)
                pred = interpolate_at(est, I0, I1, t)
                parts = total_loss(pred, target, cfg.loss, priors)
                entry = {"step": step, **parts.as_log(), "lr": lr}
                if not torch.isfinite(parts.total):
                    raise NonFiniteLossError(step, entry)
                opt.zero_grad(set_to_none=True)
                parts.total.backward()
                opt.step()
                records.append(entry)
                if sink:
                    sink.write(json.dumps(entry) + "\n")
                if cfg.freeze_check_every and (step + 1) % cfg.freeze_check_every == 0:
                    _check_frozen(priors, digests, step)
                if step % 100 == 0:
                    log.info("step %d  L_total %.5f  L_basic %.5f", step, entry["L_total"], entry["L_basic"])
            est.eval()
            _check_frozen(priors, digests, cfg.steps)
    finally:
        if sink:
            sink.close()
    if checkpoint_path:
        save_checkpoint(est, checkpoint_path, extra={"steps": cfg.steps, "seed": cfg.seed})
    return TrainResult(est, records, digests)


def _check_frozen(priors: Priors, digests: List[str], step: int):
    if priors.digests() != digests:
        raise FrozenPriorError(f"prior backend parameters changed by step {step}")


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        raise ValueError(f"need at least {window} values")
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window
