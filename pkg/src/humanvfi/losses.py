"""Training objective: reconstruction terms plus the human-aware auxiliary terms.

Every function takes N x C x H x W tensors and reduces by mean. The frozen
prior backends see the prediction with gradients enabled and the ground
truth without, so gradients only reach the interpolator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .core import LossConfig
from .priors import BoxDetector, PoseBackend, Priors, SegBackend, crop_to_input, luma

BCE_CLAMP = 1e-7
# soft-sign scale and robust aggregation constants of the census term
CENSUS_SOFTSIGN = 0.81
CENSUS_HAMMING_THRESH = 0.1
CENSUS_ALPHA = 0.45
CENSUS_EPS = 1e-3


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def charbonnier_loss(pred, gt, alpha: float = 0.5, epsilon: float = 1e-6):
    _same_shape(pred, gt)
    return ((pred - gt) ** 2 + epsilon ** 2).pow(alpha).mean()


def census_transform(img: torch.Tensor, patch: int = 7) -> torch.Tensor:
    """Soft census signature of every valid (unpadded) pixel, N x patch^2 x H' x W'."""
    h, w = img.shape[-2:]
    if h < patch or w < patch:
        raise ValueError(f"image {h}x{w} smaller than census patch {patch}")
    intensity = luma(img) * 255.0
    r = patch // 2
    neighbours = F.unfold(intensity, patch).view(img.shape[0], patch * patch, h - 2 * r, w - 2 * r)
    centre = intensity[:, :, r:h - r, r:w - r]
    diff = neighbours - centre
    return diff / torch.sqrt(CENSUS_SOFTSIGN + diff * diff)


def census_loss(pred, gt, patch: int = 7):
    """Robust soft-Hamming distance between census signatures, averaged over valid pixels."""
    _same_shape(pred, gt)
    if patch < 3 or patch % 2 == 0:
        raise ValueError("patch must be an odd integer >= 3")
    sq = (census_transform(pred, patch) - census_transform(gt, patch)) ** 2
    hamming = (sq / (CENSUS_HAMMING_THRESH + sq)).sum(dim=1)
    eps2 = torch.full_like(hamming, CENSUS_EPS ** 2)
    # offset so identical images score exactly zero
    robust = (hamming * hamming + eps2).pow(CENSUS_ALPHA) - eps2.pow(CENSUS_ALPHA)
    return robust.mean()


def basic_loss(pred, gt, cfg: LossConfig):
    loss = charbonnier_loss(pred, gt, cfg.alpha, cfg.epsilon)
    if cfg.lambda_cen:
        loss = loss + cfg.lambda_cen * census_loss(pred, gt, cfg.census_patch)
    return loss


def dice_loss(pred_mask, gt_mask, smooth: float = 1.0):
    """1 - (2 sum(p g) + s) / (sum p + sum g + s), per mask over the last two dims, then averaged."""
    _same_shape(pred_mask, gt_mask)
    inter = (pred_mask * gt_mask).sum(dim=(-2, -1))
    denom = pred_mask.sum(dim=(-2, -1)) + gt_mask.sum(dim=(-2, -1))
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def bce_mask_loss(pred_mask, gt_mask, clamp: float = BCE_CLAMP):
    _same_shape(pred_mask, gt_mask)
    p = pred_mask.clamp(clamp, 1.0 - clamp)
    return -(gt_mask * torch.log(p) + (1.0 - gt_mask) * torch.log1p(-p)).mean()


@dataclass
class AuxLoss:
    """An auxiliary loss value; ``skipped`` when no sample had anything to compare."""

    value: torch.Tensor
    skipped: bool
    terms: int = 0

    def __float__(self):
        return float(self.value)


def _match_slots(pred_masks, gt_bin, slots, method):
    if method == "index":
        return [(k, k) for k in slots]
    cost = np.zeros((pred_masks.shape[0], len(slots)))
    with torch.no_grad():
        for j, k in enumerate(slots):
            g = gt_bin[k]
            inter = (pred_masks * g).sum(dim=(-2, -1))
            denom = pred_masks.sum(dim=(-2, -1)) + g.sum()
            cost[:, j] = (1.0 - (2 * inter + 1.0) / (denom + 1.0)).cpu().numpy()
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), slots[c]) for r, c in zip(rows, cols)]


def segmentation_loss(pred_frame, gt_frame, backend: SegBackend, cfg: LossConfig) -> AuxLoss:
    """Mask consistency between the frozen segmenter's views of prediction and ground truth.

    Ground-truth masks are binarized at 0.5, predicted masks stay soft. Each
    selected slot contributes ``lambda_ce * BCE + lambda_dice * dice``; the
    slot average is taken per sample, and samples without any slot above
    the area threshold contribute zero.
    """
    _same_shape(pred_frame, gt_frame)
    with torch.no_grad():
        gt_bin = (backend(gt_frame) > 0.5).to(pred_frame.dtype)
    pred_masks = backend(pred_frame)
    n, k, h, w = gt_bin.shape
    candidates = [s for s in range(k) if backend.is_person[s] or not cfg.person_only]
    min_area = cfg.min_mask_area * h * w
    per_sample = []
    terms = 0
    for i in range(n):
        slots = [s for s in candidates if float(gt_bin[i, s].sum()) >= min_area]
        if not slots:
            per_sample.append(pred_masks.new_zeros(()))
            continue
        pairs = _match_slots(pred_masks[i], gt_bin[i], slots, cfg.slot_matching)
        vals = [cfg.lambda_ce * bce_mask_loss(pred_masks[i, p], gt_bin[i, g])
                + cfg.lambda_dice * dice_loss(pred_masks[i, p], gt_bin[i, g], cfg.dice_smooth)
                for p, g in pairs]
        per_sample.append(torch.stack(vals).mean())
        terms += len(vals)
    return AuxLoss(torch.stack(per_sample).mean(), skipped=terms == 0, terms=terms)


def keypoint_loss(pred_frame, gt_frame, detector: BoxDetector, pose_backend: PoseBackend) -> AuxLoss:
    """Heatmap MSE inside person boxes detected on the ground-truth frame only."""
    _same_shape(pred_frame, gt_frame)
    per_sample = []
    terms = 0
    for i in range(pred_frame.shape[0]):
        gt_i = gt_frame[i:i + 1]
        boxes = [b for b in detector(gt_i.detach()) if b.area >= 4]
        if not boxes:
            per_sample.append(pred_frame.new_zeros(()))
            continue
        pred_crops = torch.cat([crop_to_input(pred_frame[i:i + 1], b, pose_backend.input_size) for b in boxes])
        with torch.no_grad():
            gt_crops = torch.cat([crop_to_input(gt_i, b, pose_backend.input_size) for b in boxes])
            target = pose_backend(gt_crops)
        heat = pose_backend(pred_crops)
        per_sample.append(((heat - target) ** 2).mean(dim=(1, 2, 3)).mean())
        terms += len(boxes)
    return AuxLoss(torch.stack(per_sample).mean(), skipped=terms == 0, terms=terms)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    basic: torch.Tensor
    seg: torch.Tensor
    kpt: torch.Tensor
    seg_skipped: bool = True
    kpt_skipped: bool = True

    def as_log(self) -> dict:
        val = lambda x: float(x.detach())
        return {"L_basic": val(self.basic), "L_seg": val(self.seg), "L_kpt": val(self.kpt),
                "L_total": val(self.total), "seg_skipped": self.seg_skipped, "kpt_skipped": self.kpt_skipped}


def total_loss(pred, gt, cfg: LossConfig, priors: Optional[Priors] = None) -> LossBreakdown:
    """``L_basic + lambda_seg * L_seg + lambda_kpt * L_kpt``; a zero weight skips its term entirely."""
    priors = priors or Priors()
    basic = basic_loss(pred, gt, cfg)
    total = basic
    zero = pred.new_zeros(())
    seg, seg_skipped = zero, True
    kpt, kpt_skipped = zero, True
    if cfg.lambda_seg:
        if priors.segmenter is None:
            raise ValueError("lambda_seg > 0 requires a segmentation backend")
        aux = segmentation_loss(pred, gt, priors.segmenter, cfg)
        seg, seg_skipped = aux.value, aux.skipped
        total = total + cfg.lambda_seg * seg
    if cfg.lambda_kpt:
        if priors.detector is None or priors.pose is None:
            raise ValueError("lambda_kpt > 0 requires a detector and a pose backend")
        aux = keypoint_loss(pred, gt, priors.detector, priors.pose)
        kpt, kpt_skipped = aux.value, aux.skipped
        total = total + cfg.lambda_kpt * kpt
    return LossBreakdown(total, basic, seg, kpt, seg_skipped, kpt_skipped)
