"""Textured-background sprites under linear motion, with exact ground truth.

Everything is rendered from closed-form functions of continuous position:
the background is a sum of sinusoids that may pan, each sprite is a
hard-edged bright rectangle or ellipse carrying its own texture. Flow,
masks, boxes and keypoints therefore follow analytically from the motion
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..core import CLIP_LENGTH, Clip, FlowField, Frame

SPRITE_MIN_LUMA = 0.86
BACKGROUND_MAX_LUMA = 0.6


@dataclass
class SyntheticSpec:
    height: int = 64
    width: int = 64
    n_sprites: int = 2
    sprite_size: Tuple[int, int] = (10, 16)  # side length range, inclusive
    shapes: Tuple[str, ...] = ("rect", "ellipse")
    max_speed: float = 1.5  # px/frame per axis for random sprite velocities
    sprite_velocities: Optional[List[Tuple[float, float]]] = None
    max_pan: float = 0.0  # px/frame per axis for random background pan
    background_velocity: Optional[Tuple[float, float]] = None
    sprites_follow_background: bool = False  # sprite velocity = background velocity + own motion
    texture_seed: Optional[int] = None  # None: drawn per clip
    category: str = "sprites"

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError("canvas must be at least 16x16")
        lo, hi = self.sprite_size
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid sprite_size {self.sprite_size}")
        if self.sprite_velocities is not None and len(self.sprite_velocities) != self.n_sprites:
            raise ValueError("sprite_velocities must give one velocity per sprite")
        unknown = set(self.shapes) - {"rect", "ellipse"}
        if unknown:
            raise ValueError(f"unknown sprite shapes {sorted(unknown)}")


@dataclass
class Sprite:
    shape: str
    size: Tuple[int, int]  # (w, h)
    origin: Tuple[float, float]  # top-left at frame 0, continuous pixel-edge coords
    velocity: Tuple[float, float]
    color: Tuple[float, float, float]
    phase: Tuple[float, float]

    def position(self, k: float):
        return self.origin[0] + k * self.velocity[0], self.origin[1] + k * self.velocity[1]

    def coverage(self, xs, ys, k):
        """Pixel centres (xs, ys) inside the sprite at frame k; also returns local coords."""
        px, py = self.position(k)
        u = xs + 0.5 - px
        v = ys + 0.5 - py
        w, h = self.size
        if self.shape == "rect":
            inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        else:
            inside = ((u - w / 2) / (w / 2)) ** 2 + ((v - h / 2) / (h / 2)) ** 2 < 1.0
        return inside, u, v


@dataclass
class Texture:
    freqs: np.ndarray  # S x 2 (radians per px)
    phases: np.ndarray  # S
    amps: np.ndarray  # S
    tint: np.ndarray  # 3

    def __call__(self, x, y):
        s = sum(a * np.sin(f[0] * x + f[1] * y + p) for f, p, a in zip(self.freqs, self.phases, self.amps))
        base = 0.32 + 0.2 * s / self.amps.sum()
        return np.clip(base[..., None] * self.tint, 0.02, BACKGROUND_MAX_LUMA)


@dataclass
class SyntheticTruth:
    """Motion parameters of one rendered sequence and the ground truth derived from them."""

    height: int
    width: int
    sprites: List[Sprite]
    background_velocity: Tuple[float, float]
    n_frames: int

    def _grid(self):
        return np.meshgrid(np.arange(self.width, dtype=np.float64), np.arange(self.height, dtype=np.float64))

    def owner(self, k) -> np.ndarray:
        """Index of the topmost sprite at every pixel of frame k, -1 for background."""
        xs, ys = self._grid()
        own = np.full((self.height, self.width), -1, dtype=int)
        for j, sp in enumerate(self.sprites):
            own[sp.coverage(xs, ys, k)[0]] = j
        return own

    def masks(self, k) -> np.ndarray:
        """n_sprites x H x W visible-region masks of frame k."""
        own = self.owner(k)
        return np.stack([own == j for j in range(len(self.sprites))])

    def flow(self, a, b) -> FlowField:
        """F_{a->b} on frame a's grid: I_a(x) = I_b(x + F(x)) wherever x stays visible."""
        own = self.owner(a)
        vel = np.empty((self.height, self.width, 2))
        vel[...] = self.background_velocity
        for j, sp in enumerate(self.sprites):
            vel[own == j] = sp.velocity
        return FlowField((b - a) * vel)

    def keypoints(self, k) -> np.ndarray:
        """Sprite centres (x, y) in pixel-centre coordinates, n_sprites x 2."""
        out = []
        for sp in self.sprites:
            px, py = sp.position(k)
            out.append((px + sp.size[0] / 2 - 0.5, py + sp.size[1] / 2 - 0.5))
        return np.array(out)

    def boxes(self, k) -> List[Tuple[float, float, float, float]]:
        """Tight pixel-edge bounding boxes of each sprite's visible region."""
        out = []
        for m in self.masks(k):
            ys, xs = np.nonzero(m)
            if len(xs) == 0:
                out.append(None)
            else:
                out.append((float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)))
        return out


def _random_texture(rng: np.random.Generator, n: int = 6) -> Texture:
    periods = rng.uniform(6.0, 24.0, size=n)
    angles = rng.uniform(0, np.pi, size=n)
    freqs = np.stack([np.cos(angles), np.sin(angles)], axis=1) * (2 * np.pi / periods)[:, None]
    return Texture(freqs, rng.uniform(0, 2 * np.pi, size=n), rng.uniform(0.5, 1.0, size=n),
                   rng.uniform(0.75, 1.0, size=3))


def _place(spec: SyntheticSpec, rng, size, vel, n_frames):
    lo_hi = []
    span = n_frames - 1
    for extent, v, canvas in ((size[0], vel[0], spec.width), (size[1], vel[1], spec.height)):
        lo = max(0.0, -span * v)
        hi = min(canvas - extent, canvas - extent - span * v)
        if lo > hi:
            return None
        lo_hi.append((lo, hi))
    return tuple(float(np.floor(rng.uniform(lo, hi + 1e-9))) if v == int(v) else float(rng.uniform(lo, hi))
                 for (lo, hi), v in zip(lo_hi, vel))


def _make_sprites(spec: SyntheticSpec, rng, n_frames, bg_vel=(0.0, 0.0)) -> List[Sprite]:
    sprites = []
    for j in range(spec.n_sprites):
        for _ in range(100):
            size = tuple(int(s) for s in rng.integers(spec.sprite_size[0], spec.sprite_size[1] + 1, size=2))
            if spec.sprite_velocities is not None:
                vel = tuple(float(v) for v in spec.sprite_velocities[j])
            else:
                vel = tuple(float(v) for v in rng.uniform(-spec.max_speed, spec.max_speed, size=2))
            if spec.sprites_follow_background:
                vel = (vel[0] + bg_vel[0], vel[1] + bg_vel[1])
            origin = _place(spec, rng, size, vel, n_frames)
            if origin is not None:
                break
        else:
            raise ValueError(f"sprite {j} cannot stay inside the {spec.width}x{spec.height} canvas "
                             f"for {n_frames} frames")
        color = tuple(float(c) for c in rng.uniform(0.9, 1.0, size=3))
        sprites.append(Sprite(str(rng.choice(spec.shapes)), size, origin, vel, color,
                              tuple(float(p) for p in rng.uniform(0, 2 * np.pi, size=2))))
    return sprites


def render_frame(truth: SyntheticTruth, texture: Texture, k: float) -> Frame:
    xs, ys = truth._grid()
    bvx, bvy = truth.background_velocity
    img = texture(xs - k * bvx, ys - k * bvy)
    for sp in truth.sprites:
        inside, u, v = sp.coverage(xs, ys, k)
        pattern = 0.04 * np.sin(0.9 * u + sp.phase[0]) * np.cos(0.7 * v + sp.phase[1])
        sprite_px = np.clip(np.asarray(sp.color) - 0.05 + pattern[..., None], 0.0, 1.0)
        img = np.where(inside[..., None], sprite_px, img)
    return Frame(img)


def render_sequence(spec: SyntheticSpec, n_frames: int, seed: int = 0):
    """Render ``n_frames`` consecutive frames; returns (frames, truth)."""
    rng = np.random.default_rng(seed)
    tex_rng = np.random.default_rng(spec.texture_seed) if spec.texture_seed is not None else rng
    texture = _random_texture(tex_rng)
    if spec.background_velocity is not None:
        bg_vel = tuple(float(v) for v in spec.background_velocity)
    else:
        bg_vel = tuple(float(v) for v in rng.uniform(-spec.max_pan, spec.max_pan, size=2))
    sprites = _make_sprites(spec, rng, n_frames, bg_vel)
    truth = SyntheticTruth(spec.height, spec.width, sprites, bg_vel, n_frames)
    frames = [render_frame(truth, texture, k) for k in range(n_frames)]
    return frames, truth


def generate_synthetic(spec: SyntheticSpec, n_clips: int, seed: int = 0):
    """Render ``n_clips`` 9-frame clips; returns (clips, truths), deterministic per seed."""
    seeds = np.random.SeedSequence(seed).generate_state(n_clips)
    clips, truths = [], []
    for i, s in enumerate(seeds):
        frames, truth = render_sequence(spec, CLIP_LENGTH, int(s))
        clip_id = f"synth{seed}_{i:04d}"
        clips.append(Clip(frames, clip_id=clip_id, source_id=clip_id, category=spec.category))
        truths.append(truth)
    return clips, truths


class TruthFlow:
    """A ``flow_fn(frame_a, frame_b)`` answering from ground truth for frames of one sequence."""

    def __init__(self, frames: Sequence[Frame], truth: SyntheticTruth):
        self.frames = list(frames)
        self.truth = truth

    def _index(self, frame) -> int:
        for k, f in enumerate(self.frames):
            if f is frame:
                return k
        for k, f in enumerate(self.frames):
            if f == frame:
                return k
        raise KeyError("frame does not belong to this sequence")

    def __call__(self, a: Frame, b: Frame) -> FlowField:
        return self.truth.flow(self._index(a), self._index(b))
