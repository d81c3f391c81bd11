"""Frozen human-prior backends: panoptic-style segmentation, person boxes, pose heatmaps.

Three tiers share one contract:

* ``pretrained`` - externally supplied TorchScript models loaded through
  :func:`load_backend` (e.g. exports of a panoptic segmenter or a top-down
  pose network). Never exercised with real weights in the test suite.
* ``toy`` - small convolutional backends initialised from a seed, with frozen
  batch norm, for integration tests.
* ``analytic`` - closed-form differentiable backends keyed on bright
  sprites, used as oracles.

Backends are frozen: evaluation mode always, no parameter requires grad,
normalization uses stored statistics.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .interp import bilinear_sample, pixel_grid

MODEL_FILE_FORMAT = "humanvfi.prior"
MODEL_FILE_VERSION = 1
HEADER_NAME = "humanvfi_header.json"

COCO_JOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)


def luma(img: torch.Tensor) -> torch.Tensor:
    """Mean of RGB, N x 1 x H x W."""
    return img.mean(dim=1, keepdim=True)


class FrozenBatchNorm2d(nn.Module):
    """Batch norm with fixed statistics and affine parameters, held as buffers."""

    def __init__(self, num_features: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.register_buffer("weight", torch.ones(num_features))
        self.register_buffer("bias", torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x):
        scale = self.weight * (self.running_var + self.eps).rsqrt()
        shift = self.bias - self.running_mean * scale
        return x * scale.view(1, -1, 1, 1) + shift.view(1, -1, 1, 1)

    @classmethod
    def from_batchnorm(cls, bn: nn.BatchNorm2d) -> "FrozenBatchNorm2d":
        frozen = cls(bn.num_features, bn.eps)
        with torch.no_grad():
            if bn.affine:
                frozen.weight.copy_(bn.weight)
                frozen.bias.copy_(bn.bias)
            if bn.track_running_stats:
                frozen.running_mean.copy_(bn.running_mean)
                frozen.running_var.copy_(bn.running_var)
        return frozen.to(bn.running_mean.dtype if bn.running_mean is not None else torch.float32)


def freeze_batchnorm(module: nn.Module) -> nn.Module:
    """Replace every ``BatchNorm2d`` inside ``module`` by a frozen copy, in place."""
    for name, child in module.named_children():
        if isinstance(child, nn.BatchNorm2d):
            setattr(module, name, FrozenBatchNorm2d.from_batchnorm(child))
        else:
            freeze_batchnorm(child)
    return module


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer (name, dtype, shape, bytes)."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        t = tensor.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()


def freeze_check(backend: nn.Module, train_step_fn: Callable[[], object]) -> bool:
    """True iff running ``train_step_fn`` leaves the backend's digest unchanged."""
    before = parameter_digest(backend)
    train_step_fn()
    return parameter_digest(backend) == before


class PriorBackend(nn.Module):
    """Base class; ``train()`` is a no-op so a frozen backend stays in eval mode."""

    tier = "toy"
    kind = ""

    def freeze(self):
        self.requires_grad_(False)
        return super().train(False)

    def train(self, mode: bool = True):
        return super().train(False)

    def header(self) -> dict:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError


# ---------------------------------------------------------------- segmentation

@dataclass
class MaskSlotSet:
    masks: torch.Tensor  # N x K x H' x W' in [0, 1]
    categories: Tuple[str, ...]
    is_person: Tuple[bool, ...]

    @property
    def num_slots(self) -> int:
        return self.masks.shape[1]


class SegBackend(PriorBackend):
    kind = "segmentation"
    categories: Tuple[str, ...] = ()
    is_person: Tuple[bool, ...] = ()
    stride: int = 1

    @property
    def num_slots(self) -> int:
        return len(self.categories)

    def header(self) -> dict:
        return {"tier": self.tier, "kind": self.kind, "num_slots": self.num_slots,
                "categories": list(self.categories), "is_person": list(self.is_person),
                "stride": self.stride}


class AnalyticSegBackend(SegBackend):
    """One ``person`` slot: a steep sigmoid of (optionally smoothed) brightness.

    Bright sprites saturate towards 1 and the darker background towards 0, so
    binarizing the output of an unaltered frame barely changes it.
    """

    tier = "analytic"

    def __init__(self, threshold: float = 0.75, steepness: float = 100.0, smooth_sigma: float = 0.0):
        super().__init__()
        self.categories = ("person",)
        self.is_person = (True,)
        self.smooth_sigma = float(smooth_sigma)
        self.register_buffer("threshold", torch.tensor(float(threshold), dtype=torch.float64))
        self.register_buffer("steepness", torch.tensor(float(steepness), dtype=torch.float64))
        self.freeze()

    def config(self):
        return {"threshold": float(self.threshold), "steepness": float(self.steepness),
                "smooth_sigma": self.smooth_sigma}

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        y = luma(frames)
        if self.smooth_sigma > 0:
            y = gaussian_blur(y, self.smooth_sigma)
        k = self.steepness.to(y.dtype)
        return torch.sigmoid(k * (y - self.threshold.to(y.dtype)))


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    r = max(1, int(round(3 * sigma)))
    g = torch.exp(-torch.arange(-r, r + 1, dtype=x.dtype, device=x.device) ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    c = x.shape[1]
    x = F.pad(x, (r, r, r, r), mode="replicate")
    x = F.conv2d(x, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    return F.conv2d(x, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def _seeded_init(module: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) / fan_in ** 0.5)
                if m.bias is not None:
                    m.bias.copy_(0.1 * torch.randn(m.bias.shape, generator=gen))
            elif isinstance(m, (FrozenBatchNorm2d, nn.BatchNorm2d)):
                nf = m.running_mean.shape[0]
                m.running_mean.copy_(0.2 * torch.randn(nf, generator=gen))
                m.running_var.copy_(0.5 + torch.rand(nf, generator=gen))
                m.weight.copy_(1.0 + 0.1 * torch.randn(nf, generator=gen))
                m.bias.copy_(0.1 * torch.randn(nf, generator=gen))


def _toy_trunk(width: int, frozen_bn: bool):
    norm = FrozenBatchNorm2d if frozen_bn else nn.BatchNorm2d
    return nn.Sequential(
        nn.Conv2d(3, width, 3, padding=1, bias=False), norm(width), nn.SiLU(),
        nn.Conv2d(width, width, 3, padding=1, bias=False), norm(width), nn.SiLU(),
    )


class ToySegBackend(SegBackend):
    """Small seeded conv net producing ``num_slots`` sigmoid masks."""

    def __init__(self, num_slots: int = 3, person_slots: Sequence[int] = (0,), width: int = 8,
                 seed: int = 0, frozen_bn: bool = True):
        super().__init__()
        self.categories = tuple("person" if k in person_slots else f"stuff{k}" for k in range(num_slots))
        self.is_person = tuple(k in person_slots for k in range(num_slots))
        self._cfg = {"num_slots": num_slots, "person_slots": list(person_slots), "width": width,
                     "seed": seed, "frozen_bn": frozen_bn}
        self.trunk = _toy_trunk(width, frozen_bn)
        self.head = nn.Conv2d(width, num_slots, 1)
        _seeded_init(self, seed)
        self.freeze()

    def config(self):
        return dict(self._cfg)

    def forward(self, frames):
        return torch.sigmoid(self.head(self.trunk(frames - 0.5)) * 4.0)


def segment(backend: SegBackend, frame: torch.Tensor) -> MaskSlotSet:
    masks = backend(frame)
    return MaskSlotSet(masks, tuple(backend.categories), tuple(backend.is_person))


# ------------------------------------------------------------------- detection

class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float
    score: float

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height


class BoxDetector:
    """Callable ``frame (1 x 3 x H x W) -> list[Box]``; boxes use pixel-edge coordinates."""

    tier = "toy"
    kind = "detector"

    def detect(self, frame: torch.Tensor) -> List[Box]:
        raise NotImplementedError

    def __call__(self, frame):
        return self.detect(frame)


class AnalyticBoxDetector(BoxDetector):
    """Connected components of bright pixels, padded by ``margin`` pixels."""

    tier = "analytic"

    def __init__(self, threshold: float = 0.75, steepness: float = 100.0, min_area: int = 4, margin: int = 1):
        self.threshold = threshold
        self.steepness = steepness
        self.min_area = min_area
        self.margin = margin

    def config(self):
        return {"threshold": self.threshold, "steepness": self.steepness,
                "min_area": self.min_area, "margin": self.margin}

    def header(self):
        return {"tier": self.tier, "kind": self.kind}

    def detect(self, frame):
        if isinstance(frame, torch.Tensor):
            y = frame.detach().double().mean(dim=-3).reshape(frame.shape[-2:]).cpu().numpy()
        else:
            y = np.asarray(frame.pixels).mean(axis=2)
        h, w = y.shape
        labels, n = ndimage.label(y > self.threshold, structure=np.ones((3, 3)))
        conf = 1.0 / (1.0 + np.exp(-self.steepness * (y - self.threshold)))
        boxes = []
        for k, sl in enumerate(ndimage.find_objects(labels), start=1):
            comp = labels[sl] == k
            if comp.sum() < self.min_area:
                continue
            ys, xs = sl
            boxes.append(Box(
                float(max(xs.start - self.margin, 0)), float(max(ys.start - self.margin, 0)),
                float(min(xs.stop + self.margin, w)), float(min(ys.stop + self.margin, h)),
                float(conf[sl][comp].mean()),
            ))
        boxes.sort(key=lambda b: (-b.score, b.y1, b.x1))
        return boxes


def detect_boxes(det: BoxDetector, frame) -> List[Box]:
    boxes = list(det(frame))
    boxes.sort(key=lambda b: (-b.score, b.y1, b.x1))
    return boxes


# ------------------------------------------------------------------------ pose

@dataclass
class KeypointHeatmaps:
    maps: torch.Tensor  # N x J x h x w
    joint_names: Tuple[str, ...] = COCO_JOINTS

    @property
    def num_joints(self) -> int:
        return self.maps.shape[1]


class PoseBackend(PriorBackend):
    kind = "pose"
    input_size: Tuple[int, int] = (64, 48)  # (height, width)
    stride: int = 4
    joint_names: Tuple[str, ...] = COCO_JOINTS

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def heatmap_size(self) -> Tuple[int, int]:
        return self.input_size[0] // self.stride, self.input_size[1] // self.stride

    def header(self) -> dict:
        return {"tier": self.tier, "kind": self.kind, "num_joints": self.num_joints,
                "input_size": list(self.input_size), "stride": self.stride}


class AnalyticPoseBackend(PoseBackend):
    """Gaussian bump at the brightness-weighted centroid of the crop, on every joint."""

    tier = "analytic"

    def __init__(self, input_size=(64, 48), stride: int = 4, sigma: float = 1.5, threshold: float = 0.75,
                 steepness: float = 100.0, num_joints: int = 17):
        super().__init__()
        self.input_size = tuple(input_size)
        self.stride = stride
        self.joint_names = COCO_JOINTS if num_joints == 17 else tuple(f"joint{j}" for j in range(num_joints))
        self.register_buffer("sigma", torch.tensor(float(sigma), dtype=torch.float64))
        self.register_buffer("threshold", torch.tensor(float(threshold), dtype=torch.float64))
        self.register_buffer("steepness", torch.tensor(float(steepness), dtype=torch.float64))
        self.freeze()

    def config(self):
        return {"input_size": list(self.input_size), "stride": self.stride, "sigma": float(self.sigma),
                "threshold": float(self.threshold), "steepness": float(self.steepness),
                "num_joints": self.num_joints}

    def forward(self, crops):
        dt = crops.dtype
        weight = torch.sigmoid(self.steepness.to(dt) * (luma(crops) - self.threshold.to(dt)))[:, 0]
        xs, ys = pixel_grid(*crops.shape[-2:], dtype=dt, device=crops.device)
        total = weight.sum(dim=(-2, -1)) + 1e-6
        cx = (weight * xs).sum(dim=(-2, -1)) / total
        cy = (weight * ys).sum(dim=(-2, -1)) / total
        # input pixel u sits at heatmap coordinate (u - (stride - 1) / 2) / stride
        off = (self.stride - 1) / 2.0
        hx, hy = pixel_grid(*self.heatmap_size, dtype=dt, device=crops.device)
        dx = hx[None] - ((cx - off) / self.stride)[:, None, None]
        dy = hy[None] - ((cy - off) / self.stride)[:, None, None]
        bump = torch.exp(-(dx ** 2 + dy ** 2) / (2 * self.sigma.to(dt) ** 2))
        return bump[:, None].expand(-1, self.num_joints, -1, -1)


class ToyPoseBackend(PoseBackend):
    def __init__(self, input_size=(32, 24), stride: int = 4, width: int = 8, num_joints: int = 17,
                 seed: int = 0, frozen_bn: bool = True):
        super().__init__()
        self.input_size = tuple(input_size)
        self.stride = stride
        self.joint_names = COCO_JOINTS if num_joints == 17 else tuple(f"joint{j}" for j in range(num_joints))
        self._cfg = {"input_size": list(input_size), "stride": stride, "width": width,
                     "num_joints": num_joints, "seed": seed, "frozen_bn": frozen_bn}
        self.trunk = _toy_trunk(width, frozen_bn)
        self.head = nn.Conv2d(width, num_joints, 1)
        _seeded_init(self, seed)
        self.freeze()

    def config(self):
        return dict(self._cfg)

    def forward(self, crops):
        return self.head(F.avg_pool2d(self.trunk(crops - 0.5), self.stride))


def crop_to_input(frame: torch.Tensor, box: Box, out_size: Tuple[int, int]) -> torch.Tensor:
    """Differentiable crop of ``box`` resized to ``out_size`` with aspect-preserving zero padding."""
    if box.width * box.height < 4:
        raise ValueError(f"degenerate box {tuple(box)[:4]}: area below 4 px^2")
    oh, ow = out_size
    s, off_x, off_y = _crop_geometry(box, out_size)
    n = frame.shape[0]
    u, v = pixel_grid(oh, ow, dtype=frame.dtype, device=frame.device)
    # output pixel centre -> input pixel centre
    x = box.x1 + (u + 0.5 - off_x) / s - 0.5
    y = box.y1 + (v + 0.5 - off_y) / s - 0.5
    inside = ((u + 0.5 >= off_x) & (u + 0.5 <= ow - off_x) & (v + 0.5 >= off_y) & (v + 0.5 <= oh - off_y))
    out = bilinear_sample(frame, x.expand(n, -1, -1), y.expand(n, -1, -1))
    return out * inside.to(frame.dtype)


def _crop_geometry(box: Box, out_size):
    oh, ow = out_size
    s = min(ow / box.width, oh / box.height)
    return s, (ow - box.width * s) / 2.0, (oh - box.height * s) / 2.0


def heatmap_to_frame(backend: PoseBackend, box: Box, hx: float, hy: float) -> Tuple[float, float]:
    """Map heatmap cell (hx, hy) back to frame pixel-centre coordinates."""
    s, off_x, off_y = _crop_geometry(box, backend.input_size)
    off = (backend.stride - 1) / 2.0
    u = hx * backend.stride + off
    v = hy * backend.stride + off
    return box.x1 + (u + 0.5 - off_x) / s - 0.5, box.y1 + (v + 0.5 - off_y) / s - 0.5


def pose_heatmaps(backend: PoseBackend, frame: torch.Tensor, box: Box) -> KeypointHeatmaps:
    h, w = frame.shape[-2:]
    if box.x1 < 0 or box.y1 < 0 or box.x2 > w or box.y2 > h:
        raise ValueError(f"box {tuple(box)[:4]} outside the {w}x{h} frame")
    crop = crop_to_input(frame, box, backend.input_size)
    return KeypointHeatmaps(backend(crop), tuple(backend.joint_names))


# --------------------------------------------------------------------- bundle

@dataclass
class Priors:
    segmenter: Optional[SegBackend] = None
    detector: Optional[BoxDetector] = None
    pose: Optional[PoseBackend] = None

    def modules(self) -> List[nn.Module]:
        return [m for m in (self.segmenter, self.detector, self.pose) if isinstance(m, nn.Module)]

    def digests(self) -> List[str]:
        return [parameter_digest(m) for m in self.modules()]

    def to(self, dtype):
        for m in self.modules():
            m.to(dtype)
        return self


def analytic_priors(threshold: float = 0.75, steepness: float = 100.0) -> Priors:
    return Priors(
        AnalyticSegBackend(threshold, steepness),
        AnalyticBoxDetector(threshold, steepness),
        AnalyticPoseBackend(threshold=threshold, steepness=steepness),
    )


# ---------------------------------------------------------- model-file interface

class ScriptedSegBackend(SegBackend):
    """Wraps a TorchScript segmenter ``frames -> N x K x H' x W'`` in [0, 1]."""

    tier = "pretrained"

    def __init__(self, module, header: dict):
        super().__init__()
        self.module = module
        self.categories = tuple(header["categories"])
        self.is_person = tuple(bool(p) for p in header["is_person"])
        self.stride = int(header.get("stride", 1))
        self.freeze()

    def forward(self, frames):
        masks = self.module(frames)
        if masks.dim() != 4 or masks.shape[1] != self.num_slots:
            raise RuntimeError(f"segmenter returned {tuple(masks.shape)}, expected {self.num_slots} slots")
        return masks


class ScriptedPoseBackend(PoseBackend):
    tier = "pretrained"

    def __init__(self, module, header: dict):
        super().__init__()
        self.module = module
        self.input_size = tuple(header["input_size"])
        self.stride = int(header["stride"])
        n = int(header["num_joints"])
        self.joint_names = COCO_JOINTS if n == 17 else tuple(f"joint{j}" for j in range(n))
        self.freeze()

    def forward(self, crops):
        maps = self.module(crops)
        if tuple(maps.shape[1:]) != (self.num_joints, *self.heatmap_size):
            raise RuntimeError(f"pose model returned {tuple(maps.shape)}")
        return maps


class ScriptedBoxDetector(BoxDetector):
    """Wraps a TorchScript detector ``frame -> M x 5`` rows (x1, y1, x2, y2, score)."""

    tier = "pretrained"

    def __init__(self, module, header: dict):
        self.module = module.eval()
        self.min_score = float(header.get("min_score", 0.5))

    def detect(self, frame):
        with torch.no_grad():
            rows = self.module(frame).detach().double().cpu().numpy().reshape(-1, 5)
        h, w = frame.shape[-2:]
        boxes = []
        for x1, y1, x2, y2, sc in rows:
            x1, x2 = max(0.0, x1), min(float(w), x2)
            y1, y2 = max(0.0, y1), min(float(h), y2)
            if sc >= self.min_score and x2 > x1 and y2 > y1:
                boxes.append(Box(float(x1), float(y1), float(x2), float(y2), float(min(max(sc, 0.0), 1.0))))
        boxes.sort(key=lambda b: (-b.score, b.y1, b.x1))
        return boxes


_LOCAL_CLASSES = {
    ("analytic", "segmentation"): AnalyticSegBackend,
    ("toy", "segmentation"): ToySegBackend,
    ("analytic", "pose"): AnalyticPoseBackend,
    ("toy", "pose"): ToyPoseBackend,
    ("analytic", "detector"): AnalyticBoxDetector,
}
_SCRIPTED_CLASSES = {
    "segmentation": ScriptedSegBackend,
    "pose": ScriptedPoseBackend,
    "detector": ScriptedBoxDetector,
}


def save_backend(backend, path) -> None:
    """Write a toy or analytic backend to a versioned model file."""
    header = {"format": MODEL_FILE_FORMAT, "version": MODEL_FILE_VERSION, **backend.header()}
    payload = {"header": header, "config": backend.config(),
               "state_dict": backend.state_dict() if isinstance(backend, nn.Module) else {}}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def export_scripted_backend(module: nn.Module, header: dict, path) -> None:
    """Package a TorchScript-able model as a ``pretrained`` tier model file."""
    header = {"format": MODEL_FILE_FORMAT, "version": MODEL_FILE_VERSION, "tier": "pretrained", **header}
    scripted = torch.jit.script(module.eval())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.jit.save(scripted, str(path), _extra_files={HEADER_NAME: json.dumps(header)})


def _is_torchscript(path) -> bool:
    try:
        with zipfile.ZipFile(path) as zf:
            return any(n.endswith("/" + HEADER_NAME) or n.endswith("constants.pkl") for n in zf.namelist())
    except zipfile.BadZipFile:
        return False


def _check_header(header: dict, path, expect: dict):
    if header.get("format") != MODEL_FILE_FORMAT or header.get("version") != MODEL_FILE_VERSION:
        raise ValueError(f"{path}: unsupported model file (format={header.get('format')!r}, "
                         f"version={header.get('version')!r})")
    for key, want in (expect or {}).items():
        got = header.get(key)
        if isinstance(want, tuple):
            want = list(want)
        if got != want:
            raise ValueError(f"{path}: header {key}={got!r} does not match expected {want!r}")


def load_backend(path, **expect):
    """Load a backend from a model file, refusing headers that disagree with ``expect``.

    ``expect`` keys are header fields, e.g. ``kind="pose", num_joints=17``.
    """
    path = Path(path)
    if _is_torchscript(path):
        extra = {HEADER_NAME: ""}
        module = torch.jit.load(str(path), map_location="cpu", _extra_files=extra)
        header = json.loads(extra[HEADER_NAME] or "{}")
        _check_header(header, path, expect)
        return _SCRIPTED_CLASSES[header["kind"]](module, header)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    header = payload["header"]
    _check_header(header, path, expect)
    cls = _LOCAL_CLASSES[(header["tier"], header["kind"])]
    backend = cls(**payload["config"])
    if isinstance(backend, nn.Module):
        backend.load_state_dict(payload["state_dict"])
        backend.freeze()
    return backend
