import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import humanvfi.losses as losses
from humanvfi.core import LossConfig
from humanvfi.harness.synth import SyntheticSpec, render_sequence
from humanvfi.losses import (AuxLoss, basic_loss, bce_mask_loss, census_loss, charbonnier_loss, dice_loss,
                             keypoint_loss, segmentation_loss, total_loss)
from humanvfi.priors import (AnalyticBoxDetector, AnalyticPoseBackend, AnalyticSegBackend, Priors,
                             ToyPoseBackend, ToySegBackend, analytic_priors)


def brute_census_loss(a, b, patch=7):
    """Loop-level census distance on H x W x 3 arrays, independent of the tensor implementation."""
    ya, yb = a.mean(axis=2) * 255.0, b.mean(axis=2) * 255.0
    r = patch // 2
    h, w = ya.shape
    vals = []
    for i in range(r, h - r):
        for j in range(r, w - r):
            ham = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    da = ya[i + di, j + dj] - ya[i, j]
                    db = yb[i + di, j + dj] - yb[i, j]
                    sa = da / math.sqrt(0.81 + da * da)
                    sb = db / math.sqrt(0.81 + db * db)
                    sq = (sa - sb) ** 2
                    ham += sq / (0.1 + sq)
            vals.append((ham * ham + 1e-6) ** 0.45 - (1e-6) ** 0.45)
    return float(np.mean(vals))


def t(arr):
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def textured8(seed=0):
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:8, 0:8]
    base = 0.45 + 0.2 * np.sin(x * 1.3 + y * 0.7)
    return np.clip(base[..., None] + 0.05 * rng.standard_normal((8, 8, 3)), 0.05, 0.85)


def sprite_frame(seed=0, size=(10, 12)):
    spec = SyntheticSpec(n_sprites=1, sprite_size=size, max_speed=0.0, shapes=("rect",))
    frames, truth = render_sequence(spec, 1, seed)
    return frames[0].to_tensor(torch.float64), truth


# ---------------------------------------------------------------- charbonnier

def test_charbonnier_identity_and_plug_ins():
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    assert charbonnier_loss(x, x).item() == pytest.approx(1e-6, rel=1e-12)
    assert charbonnier_loss(x + 0.3, x).item() == pytest.approx(0.3, abs=1e-9)
    pred = torch.tensor([[[[3.0, 4.0]]]], dtype=torch.float64)
    assert charbonnier_loss(pred, torch.zeros_like(pred)).item() == pytest.approx(3.5, abs=1e-9)


def test_charbonnier_shape_mismatch():
    with pytest.raises(ValueError):
        charbonnier_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


# --------------------------------------------------------------------- census

def test_census_identity_zero():
    x = t(textured8())
    assert census_loss(x, x).item() == 0.0


def test_census_matches_brute_force():
    a = textured8(0)
    b = np.clip(a + 0.1 * np.random.default_rng(1).standard_normal(a.shape), 0, 1)
    assert abs(census_loss(t(a), t(b)).item() - brute_census_loss(a, b)) < 1e-10


def test_census_offset_invariance_brute_force():
    gt = textured8()
    shifted = gt + 0.1
    assert brute_census_loss(shifted, gt) < 1e-6
    assert census_loss(t(shifted), t(gt)).item() < 1e-6


def test_census_detects_shuffled_pixels():
    gt = textured8()
    perm = np.random.default_rng(7).permutation(64)
    shuffled = gt.reshape(64, 3)[perm].reshape(8, 8, 3)
    assert brute_census_loss(shuffled, gt) > 0.05
    assert census_loss(t(shuffled), t(gt)).item() > 0.05


def test_census_errors():
    with pytest.raises(ValueError):
        census_loss(torch.zeros(1, 3, 6, 6), torch.zeros(1, 3, 6, 6))
    with pytest.raises(ValueError):
        census_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8), patch=4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-0.1, 0.1))
def test_census_symmetric_and_offset_invariant(seed, c):
    g = torch.Generator().manual_seed(seed)
    a = 0.15 + 0.7 * torch.rand(1, 3, 10, 10, generator=g, dtype=torch.float64)
    b = 0.15 + 0.7 * torch.rand(1, 3, 10, 10, generator=g, dtype=torch.float64)
    ab = census_loss(a, b).item()
    assert abs(ab - census_loss(b, a).item()) < 1e-12
    assert abs(census_loss(a + c, b + c).item() - ab) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative_and_symmetric(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.rand(2, 3, 9, 9, generator=g, dtype=torch.float64).unbind(0)
    a, b = a[None], b[None]
    assert charbonnier_loss(a, b).item() >= 0 and census_loss(a, b).item() >= 0
    assert abs(charbonnier_loss(a, b).item() - charbonnier_loss(b, a).item()) < 1e-12


def test_reduction_order_invariance():
    g = torch.Generator().manual_seed(0)
    a = torch.rand(1, 3, 12, 12, generator=g, dtype=torch.float64)
    b = torch.rand(1, 3, 12, 12, generator=g, dtype=torch.float64)
    perm = torch.randperm(144, generator=g)
    pa = a.flatten(2)[..., perm].view_as(a)
    pb = b.flatten(2)[..., perm].view_as(b)
    assert abs(charbonnier_loss(a, b).item() - charbonnier_loss(pa, pb).item()) < 1e-12
    # census pixels are reduced by mean, so reordering the batch leaves it unchanged
    ab = torch.cat([a, b])
    ba = torch.cat([b, a])
    assert abs(census_loss(ab, ba).item() - census_loss(ba, ab).item()) < 1e-12


# ---------------------------------------------------------------------- basic

def test_basic_loss_reductions(monkeypatch):
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    y = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    assert basic_loss(x, y, LossConfig(lambda_cen=0)).item() == charbonnier_loss(x, y).item()
    assert basic_loss(x, x, LossConfig()).item() == pytest.approx(1e-6, rel=1e-12)
    monkeypatch.setattr(losses, "charbonnier_loss", lambda *a, **k: torch.tensor(0.25, dtype=torch.float64))
    monkeypatch.setattr(losses, "census_loss", lambda *a, **k: torch.tensor(1.5, dtype=torch.float64))
    assert basic_loss(x, y, LossConfig(lambda_cen=1)).item() == 1.75


# ------------------------------------------------------------------- dice/bce

def test_dice_closed_forms():
    g = torch.zeros(8, 8, dtype=torch.float64)
    g[:, :4] = 1
    assert dice_loss(g, g).item() == 0.0
    disjoint = 1 - g
    assert dice_loss(disjoint, g).item() == pytest.approx(64 / 65, abs=1e-12)
    half = torch.zeros_like(g)
    half[:, :2] = 1
    half[:, 4:6] = 1
    assert dice_loss(half, g, smooth=1e-12).item() == pytest.approx(0.5, abs=1e-9)


def test_bce_closed_forms():
    ones = torch.ones(4, 4, dtype=torch.float64)
    assert bce_mask_loss(ones, ones).item() <= -math.log(1 - 1e-7) + 1e-15
    assert bce_mask_loss(0.5 * ones, ones).item() == pytest.approx(math.log(2), abs=1e-12)
    assert bce_mask_loss(0.9 * ones, ones).item() == pytest.approx(0.1054, abs=1e-4)


# --------------------------------------------------------------- segmentation

def test_segmentation_identity_with_analytic_backend():
    frame, _ = sprite_frame()
    aux = segmentation_loss(frame, frame, AnalyticSegBackend(), LossConfig())
    assert not aux.skipped and aux.value.item() <= 1e-2


def test_segmentation_disjoint_masks_brute_force():
    img = np.full((8, 8, 3), 0.3)
    pred, gt = img.copy(), img.copy()
    pred[1:3, 1:3] = 0.95
    gt[5:7, 5:7] = 0.95
    cfg = LossConfig()
    aux = segmentation_loss(t(pred), t(gt), AnalyticSegBackend(), cfg)
    p = 1 / (1 + np.exp(-100 * (pred.mean(axis=2) - 0.75)))
    g = (1 / (1 + np.exp(-100 * (gt.mean(axis=2) - 0.75))) > 0.5).astype(float)
    pc = np.clip(p, 1e-7, 1 - 1e-7)
    bce = -np.mean(g * np.log(pc) + (1 - g) * np.log(1 - pc))
    dice = 1 - (2 * (p * g).sum() + 1) / (p.sum() + g.sum() + 1)
    assert dice == pytest.approx(1.0, abs=0.15)
    assert aux.value.item() == pytest.approx(5 * bce + 5 * dice, rel=1e-9)


def test_segmentation_skips_empty_frames():
    dark = torch.full((1, 3, 16, 16), 0.2, dtype=torch.float64)
    aux = segmentation_loss(dark, dark, AnalyticSegBackend(), LossConfig())
    assert aux.skipped and aux.value.item() == 0.0


def test_segmentation_hungarian_matches_permuted_slots():
    class Swapped(ToySegBackend):
        def forward(self, frames):
            return super().forward(frames).flip(1)

    torch.manual_seed(0)
    x = torch.rand(1, 3, 12, 12, dtype=torch.float64)
    y = torch.rand(1, 3, 12, 12, dtype=torch.float64)
    cfg_idx = LossConfig(person_only=False)
    cfg_hun = LossConfig(person_only=False, slot_matching="hungarian")
    base = ToySegBackend(num_slots=2, person_slots=(0, 1)).double()
    swapped = Swapped(num_slots=2, person_slots=(0, 1)).double()
    # identical backends: Hungarian matching never does worse than the index pairing
    assert segmentation_loss(x, y, base, cfg_hun).value.item() <= segmentation_loss(x, y, base, cfg_idx).value.item() + 1e-12
    assert segmentation_loss(x, y, swapped, cfg_hun).value.item() == pytest.approx(
        segmentation_loss(x, y, base, cfg_hun).value.item(), abs=1e-12)


def test_segmentation_gradient_reaches_prediction_only():
    frame, _ = sprite_frame()
    pred = (frame * 0.98).requires_grad_(True)
    gt = frame.clone().requires_grad_(True)
    backend = AnalyticSegBackend(steepness=10.0).double()
    segmentation_loss(pred, gt, backend, LossConfig()).value.backward()
    assert pred.grad is not None and pred.grad.abs().sum() > 0
    assert gt.grad is None


# ------------------------------------------------------------------- keypoints

def test_keypoint_identity_exact():
    frame, _ = sprite_frame()
    aux = keypoint_loss(frame, frame, AnalyticBoxDetector(), AnalyticPoseBackend())
    assert not aux.skipped and aux.value.item() == 0.0


def test_keypoint_uniform_offset_mse():
    class Shifted(AnalyticPoseBackend):
        def forward(self, crops):
            out = super().forward(crops)
            return out + 0.1 if crops.requires_grad else out  # only the prediction side carries grad

    frame, _ = sprite_frame()
    pred = frame.clone().requires_grad_(True)
    aux = keypoint_loss(pred, frame, AnalyticBoxDetector(), Shifted())
    assert aux.value.item() == pytest.approx(0.01, abs=1e-12)


def test_keypoint_skips_without_people():
    dark = torch.full((1, 3, 16, 16), 0.2, dtype=torch.float64)
    aux = keypoint_loss(dark, dark, AnalyticBoxDetector(), AnalyticPoseBackend())
    assert aux.skipped and aux.value.item() == 0.0


def test_keypoint_boxes_come_from_ground_truth():
    frame, _ = sprite_frame()
    blank = torch.full_like(frame, 0.2)
    # nothing bright in the ground truth: no boxes, even though the prediction has a sprite
    assert keypoint_loss(frame, blank, AnalyticBoxDetector(), AnalyticPoseBackend()).skipped
    assert not keypoint_loss(blank, frame, AnalyticBoxDetector(), AnalyticPoseBackend()).skipped


# ----------------------------------------------------------------------- total

def test_total_reduces_to_basic():
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    y = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    cfg = LossConfig(lambda_seg=0, lambda_kpt=0)
    out = total_loss(x, y, cfg)
    assert out.total.item() == basic_loss(x, y, cfg).item()
    assert out.seg_skipped and out.kpt_skipped


def test_total_linearity_with_stubs(monkeypatch):
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    b, s, k = 0.7, 0.3, 0.05
    monkeypatch.setattr(losses, "basic_loss", lambda *a: torch.tensor(b, dtype=torch.float64))
    monkeypatch.setattr(losses, "segmentation_loss", lambda *a: AuxLoss(torch.tensor(s, dtype=torch.float64), False, 1))
    monkeypatch.setattr(losses, "keypoint_loss", lambda *a: AuxLoss(torch.tensor(k, dtype=torch.float64), False, 1))
    out = total_loss(x, x, LossConfig(lambda_seg=0.5, lambda_kpt=2.0), analytic_priors())
    assert out.total.item() == b + 0.5 * s + 2.0 * k
    log = out.as_log()
    assert (log["L_basic"], log["L_seg"], log["L_kpt"]) == (b, s, k)


def test_total_identity_with_analytic_priors():
    frame, _ = sprite_frame()
    out = total_loss(frame, frame, LossConfig(), analytic_priors())
    assert out.total.item() <= 1e-2
    assert out.kpt.item() == 0.0


def test_zero_weight_neutrality():
    frame, _ = sprite_frame()
    pred = frame * 0.9
    a = Priors(AnalyticSegBackend(), AnalyticBoxDetector(), AnalyticPoseBackend())
    b = Priors(ToySegBackend().double(), AnalyticBoxDetector(threshold=0.5), ToyPoseBackend().double())
    cfg_seg0 = LossConfig(lambda_seg=0)
    cfg_kpt0 = LossConfig(lambda_kpt=0)
    swap_seg = lambda p: Priors(b.segmenter, p.detector, p.pose)
    swap_kpt = lambda p: Priors(p.segmenter, b.detector, b.pose)
    assert total_loss(pred, frame, cfg_seg0, a).total.item() == total_loss(pred, frame, cfg_seg0, swap_seg(a)).total.item()
    assert total_loss(pred, frame, cfg_kpt0, a).total.item() == total_loss(pred, frame, cfg_kpt0, swap_kpt(a)).total.item()
    cfg_none = LossConfig(lambda_seg=0, lambda_kpt=0)
    assert total_loss(pred, frame, cfg_none, a).total.item() == total_loss(pred, frame, cfg_none, None).total.item()


def test_total_requires_backends_for_enabled_terms():
    x = torch.rand(1, 3, 8, 8)
    with pytest.raises(ValueError):
        total_loss(x, x, LossConfig(lambda_seg=0.01, lambda_kpt=0))
    with pytest.raises(ValueError):
        total_loss(x, x, LossConfig(lambda_seg=0, lambda_kpt=0.1), Priors(segmenter=AnalyticSegBackend()))
