"""Baseline flow-based frame interpolator.

Bidirectional flow from a skip-connected U-Net, linear-motion
approximation of the intermediate flows, backward warping of both inputs
and a visibility-weighted blend of the two warped candidates.

All tensors are N x C x H x W; flows carry (dx, dy) in pixels on channel 0/1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "humanvfi.checkpoint"
CHECKPOINT_VERSION = 1
FUSION_DELTA = 1e-8


@dataclass(frozen=True)
class EstimatorDescriptor:
    base_channels: int = 24
    levels: int = 4
    head_channels: int = 16
    negative_slope: float = 0.1

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.levels


def _conv_block(cin, cout, slope):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.LeakyReLU(slope),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.LeakyReLU(slope),
    )


class UNet(nn.Module):
    def __init__(self, cin, cout, base=24, levels=4, slope=0.1):
        super().__init__()
        widths = [base * 2 ** min(i, 3) for i in range(levels + 1)]
        self.levels = levels
        self.encoders = nn.ModuleList()
        prev = cin
        for w in widths:
            self.encoders.append(_conv_block(prev, w, slope))
            prev = w
        self.decoders = nn.ModuleList()
        for i in reversed(range(levels)):
            self.decoders.append(_conv_block(prev + widths[i], widths[i], slope))
            prev = widths[i]
        self.out = nn.Conv2d(prev, cout, 3, padding=1)

    def forward(self, x):
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < self.levels:
                skips.append(x)
                x = F.avg_pool2d(x, 2)
        for dec in self.decoders:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = dec(torch.cat([x, skip], dim=1))
        return self.out(x)


class VisibilityHead(nn.Module):
    """Predicts the visibility of time-t pixels in I0; I1 gets the complement."""

    def __init__(self, channels=16, slope=0.1):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(10, channels, 3, padding=1),
            nn.LeakyReLU(slope),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.LeakyReLU(slope),
            nn.Conv2d(channels, 1, 3, padding=1),
        )

    def forward(self, warped0, warped1, flow_t0, flow_t1):
        v0 = torch.sigmoid(self.net(torch.cat([warped0, warped1, flow_t0, flow_t1], dim=1)))
        return v0, 1.0 - v0


class FlowEstimator(nn.Module):
    """Trainable (I0, I1) -> (F_0->1, F_1->0) plus the visibility head used at synthesis."""

    def __init__(self, descriptor: EstimatorDescriptor = EstimatorDescriptor()):
        super().__init__()
        self.descriptor = descriptor
        self.flow_net = UNet(6, 4, descriptor.base_channels, descriptor.levels, descriptor.negative_slope)
        self.visibility_head = VisibilityHead(descriptor.head_channels, descriptor.negative_slope)

    def check_inputs(self, I0, I1):
        if I0.shape != I1.shape:
            raise ValueError(f"frame shapes differ: {tuple(I0.shape)} vs {tuple(I1.shape)}")
        k = self.descriptor.downsample_factor
        h, w = I0.shape[-2:]
        if h % k or w % k:
            raise ValueError(f"frame size {h}x{w} not divisible by {k}")

    def forward(self, I0, I1):
        self.check_inputs(I0, I1)
        flows = self.flow_net(torch.cat([I0 - 0.5, I1 - 0.5], dim=1))
        return flows[:, :2], flows[:, 2:]

    def interpolate(self, I0, I1, t):
        return interpolate_at(self, I0, I1, t)


def estimate_bidirectional_flow(est: FlowEstimator, I0, I1):
    return est(I0, I1)


def _time_tensor(t, ref: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=ref.dtype, device=ref.device)
    if t.dim() == 0:
        t = t.expand(ref.shape[0])
    return t.view(-1, 1, 1, 1)


def approximate_intermediate_flow(F01, F10, t):
    """Flows from time t back to each input under linear motion.

    F_t0 = -(1-t) t F01 + t^2 F10 ;  F_t1 = (1-t)^2 F01 - t (1-t) F10
    """
    t_vals = torch.as_tensor(t, dtype=torch.float64)
    if torch.any(t_vals < 0) or torch.any(t_vals > 1):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    t = _time_tensor(t, F01)
    F_t0 = -(1 - t) * t * F01 + t * t * F10
    F_t1 = (1 - t) * (1 - t) * F01 - t * (1 - t) * F10
    return F_t0, F_t1


def bilinear_sample(img: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample ``img`` (N x C x H x W) at pixel coordinates ``x``, ``y`` (N x H' x W').

    Coordinates are clamped to the image, i.e. out-of-bounds reads return the
    border pixel.
    """
    n, c, h, w = img.shape
    x = x.clamp(0, w - 1)
    y = y.clamp(0, h - 1)
    x0 = x.detach().floor()
    y0 = y.detach().floor()
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    out_hw = x.shape[-2:]
    m = out_hw[0] * out_hw[1]
    flat = img.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(n, 1, m).expand(n, c, m)
        return flat.gather(2, idx).view(n, c, *out_hw)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def pixel_grid(h: int, w: int, dtype=torch.float32, device=None):
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    return xs, ys


def backward_warp(img: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Render ``out(x, y) = img(x + dx, y + dy)`` with bilinear sampling.

    Coordinates are in pixel units, so integer flows reproduce exact shifts;
    samples falling outside the image take the border value.
    """
    if img.shape[0] != flow.shape[0] or img.shape[-2:] != flow.shape[-2:]:
        raise ValueError(f"image {tuple(img.shape)} and flow {tuple(flow.shape)} differ in size")
    xs, ys = pixel_grid(*img.shape[-2:], dtype=flow.dtype, device=flow.device)
    return bilinear_sample(img, xs + flow[:, 0], ys + flow[:, 1])


def fuse_candidates(warped0, warped1, vis0, vis1, t, delta: float = FUSION_DELTA):
    """Visibility-weighted blend of the two warped candidates."""
    t = _time_tensor(t, warped0)
    w0 = (1 - t) * vis0
    w1 = t * vis1
    return (w0 * warped0 + w1 * warped1) / (w0 + w1 + delta)


def interpolate_at(est: FlowEstimator, I0, I1, t, return_aux: bool = False):
    """Synthesize the frame at time ``t`` in (0, 1) between ``I0`` and ``I1``."""
    t_vals = torch.as_tensor(t, dtype=torch.float64)
    if torch.any(t_vals <= 0) or torch.any(t_vals >= 1):
        raise ValueError(f"t must lie in (0, 1), got {t}")
    F01, F10 = est(I0, I1)
    F_t0, F_t1 = approximate_intermediate_flow(F01, F10, t)
    warped0 = backward_warp(I0, F_t0)
    warped1 = backward_warp(I1, F_t1)
    vis0, vis1 = est.visibility_head(warped0, warped1, F_t0, F_t1)
    out = fuse_candidates(warped0, warped1, vis0, vis1, t).clamp(0.0, 1.0)
    if return_aux:
        return out, {"F01": F01, "F10": F10, "F_t0": F_t0, "F_t1": F_t1, "vis0": vis0,
                     "warped0": warped0, "warped1": warped1}
    return out


Interpolator = Union[FlowEstimator, Callable]


def as_interpolator(model) -> Callable:
    """Anything with ``interpolate(I0, I1, t)``, or a plain callable with that signature."""
    return model.interpolate if hasattr(model, "interpolate") else model


def interpolate_recursive_midpoints(est, I0, I1, depth: int) -> List[torch.Tensor]:
    """Frames at k / 2**depth, k = 1 .. 2**depth - 1, by repeated t = 0.5 synthesis."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    interp = as_interpolator(est)
    n = 2 ** depth
    known = {0: I0, n: I1}
    step = n
    while step > 1:
        half = step // 2
        for k in range(half, n, step):
            known[k] = interp(known[k - half], known[k + half], 0.5)
        step = half
    return [known[k] for k in range(1, n)]


def save_checkpoint(est: FlowEstimator, path, extra: dict = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "descriptor": asdict(est.descriptor),
            "state_dict": est.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path, expected: EstimatorDescriptor = None) -> FlowEstimator:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if ckpt.get("format") != CHECKPOINT_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    desc = EstimatorDescriptor(**ckpt["descriptor"])
    if expected is not None and desc != expected:
        raise ValueError(f"{path}: descriptor {desc} does not match expected {expected}")
    est = FlowEstimator(desc)
    est.load_state_dict(ckpt["state_dict"])
    return est.eval()
