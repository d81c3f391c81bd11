import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from humanvfi.interp import (EstimatorDescriptor, FlowEstimator, approximate_intermediate_flow, backward_warp,
                             estimate_bidirectional_flow, fuse_candidates, interpolate_at,
                             interpolate_recursive_midpoints, load_checkpoint, save_checkpoint)

SMALL = EstimatorDescriptor(base_channels=4, levels=2, head_channels=4)


def grid_sample_warp(img, flow):
    """Reference warp through torch's grid_sample with border padding."""
    n, _, h, w = img.shape
    ys, xs = torch.meshgrid(torch.arange(h, dtype=img.dtype), torch.arange(w, dtype=img.dtype), indexing="ij")
    gx = 2 * (xs + flow[:, 0]) / (w - 1) - 1
    gy = 2 * (ys + flow[:, 1]) / (h - 1) - 1
    return F.grid_sample(img, torch.stack([gx, gy], dim=-1), mode="bilinear", padding_mode="border",
                         align_corners=True)


def const_flow(dx, dy, n=1, h=8, w=8, dtype=torch.float64):
    f = torch.zeros(n, 2, h, w, dtype=dtype)
    f[:, 0], f[:, 1] = dx, dy
    return f


def test_flow_endpoints_exact():
    g = torch.Generator().manual_seed(0)
    F01 = torch.randn(2, 2, 6, 6, generator=g, dtype=torch.float64)
    F10 = torch.randn(2, 2, 6, 6, generator=g, dtype=torch.float64)
    Ft0, Ft1 = approximate_intermediate_flow(F01, F10, 0.0)
    assert torch.equal(Ft0, torch.zeros_like(F01)) and torch.equal(Ft1, F01)
    Ft0, Ft1 = approximate_intermediate_flow(F01, F10, 1.0)
    assert torch.equal(Ft0, F10) and torch.equal(Ft1, torch.zeros_like(F01))


def test_flow_midpoint_constant_case():
    Ft0, Ft1 = approximate_intermediate_flow(const_flow(8, 0), const_flow(-8, 0), 0.5)
    assert torch.equal(Ft0, const_flow(-4, 0)) and torch.equal(Ft1, const_flow(4, 0))


def test_flow_rejects_t_outside_unit_interval():
    with pytest.raises(ValueError):
        approximate_intermediate_flow(const_flow(1, 0), const_flow(1, 0), 1.5)


def test_warp_zero_flow_identity():
    img = torch.rand(1, 3, 9, 7, dtype=torch.float64)
    assert torch.equal(backward_warp(img, const_flow(0, 0, h=9, w=7)), img)


def test_warp_integer_shift_column():
    img = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    out = backward_warp(img, const_flow(1, 0))
    assert torch.equal(out[..., :-1], img[..., 1:])
    assert torch.equal(out[..., -1], img[..., -1])  # border clamp


def test_warp_half_pixel_ramp():
    ramp = (torch.arange(4, dtype=torch.float64) / 3).view(1, 1, 1, 4)
    out = backward_warp(ramp, const_flow(0.5, 0, h=1, w=4))
    expected = (ramp[..., :-1] + ramp[..., 1:]) / 2
    assert torch.allclose(out[..., :-1], expected, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3), st.integers(0, 1000))
def test_integer_warp_equals_clamped_shift(dx, dy, seed):
    img = torch.rand(1, 2, 7, 9, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    out = backward_warp(img, const_flow(dx, dy, h=7, w=9))
    yi = np.clip(np.arange(7) + dy, 0, 6)
    xi = np.clip(np.arange(9) + dx, 0, 8)
    assert torch.equal(out, img[:, :, yi][:, :, :, xi])


def test_warp_matches_grid_sample_reference():
    g = torch.Generator().manual_seed(3)
    img = torch.rand(2, 3, 12, 10, generator=g, dtype=torch.float64)
    flow = 6 * torch.randn(2, 2, 12, 10, generator=g, dtype=torch.float64)
    assert torch.allclose(backward_warp(img, flow), grid_sample_warp(img, flow), atol=1e-12)


def test_fuse_symmetric_average():
    w0, w1 = torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4)
    ones = torch.ones(1, 1, 4, 4)
    assert torch.allclose(fuse_candidates(w0, w1, ones, ones, 0.5), (w0 + w1) / 2, atol=1e-7)


def test_fuse_full_occlusion_uses_other_candidate():
    w0, w1 = torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4)
    zeros, ones = torch.zeros(1, 1, 4, 4), torch.ones(1, 1, 4, 4)
    assert torch.allclose(fuse_candidates(w0, w1, zeros, ones, 0.3), w1, atol=1e-7)


def test_fuse_scalar_case():
    one = lambda v: torch.full((1, 1, 1, 1), v, dtype=torch.float64)
    out = fuse_candidates(one(0.2), one(0.8), one(1.0), one(0.5), 0.25)
    assert float(out) == pytest.approx((0.75 * 0.2 + 0.25 * 0.5 * 0.8) / (0.75 + 0.125), abs=1e-7)
    assert float(out) == pytest.approx(0.2857, abs=1e-4)


def test_fuse_scale_invariance_in_visibility():
    g = torch.Generator().manual_seed(1)
    w0, w1 = torch.rand(1, 3, 5, 5, generator=g), torch.rand(1, 3, 5, 5, generator=g)
    v0 = torch.rand(1, 1, 5, 5, generator=g) * 0.9 + 0.1
    v1 = 1 - v0 + 0.05
    a = fuse_candidates(w0, w1, v0, v1, 0.4)
    b = fuse_candidates(w0, w1, 3.0 * v0, 3.0 * v1, 0.4)
    assert torch.allclose(a, b, atol=1e-6)


def test_estimator_shapes_and_finiteness():
    torch.manual_seed(0)
    est = FlowEstimator(EstimatorDescriptor(base_channels=4)).eval()
    I0, I1 = torch.rand(1, 3, 256, 256), torch.rand(1, 3, 256, 256)
    with torch.no_grad():
        F01, F10 = estimate_bidirectional_flow(est, I0, I1)
    assert F01.shape == F10.shape == (1, 2, 256, 256)
    assert torch.isfinite(F01).all() and torch.isfinite(F10).all()


def test_estimator_input_checks():
    est = FlowEstimator(SMALL)
    with pytest.raises(ValueError):
        est(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 12))
    with pytest.raises(ValueError):
        est(torch.rand(1, 3, 10, 8), torch.rand(1, 3, 10, 8))


def test_estimator_deterministic_in_eval_mode():
    torch.manual_seed(0)
    est = FlowEstimator(SMALL).eval()
    I0, I1 = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    assert all(torch.equal(a, b) for a, b in zip(est(I0, I1), est(I0, I1)))


@settings(max_examples=10, deadline=None)
@given(st.floats(0.01, 0.99), st.integers(0, 100), st.floats(0.1, 50))
def test_interpolate_at_output_is_valid_frame(t, seed, scale):
    torch.manual_seed(seed)
    est = FlowEstimator(SMALL)
    with torch.no_grad():
        for p in est.flow_net.out.parameters():
            p.mul_(scale)
        I0, I1 = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
        out = interpolate_at(est, I0, I1, t)
    assert out.shape == I0.shape
    assert torch.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def test_interpolate_at_rejects_endpoints():
    est = FlowEstimator(SMALL)
    I = torch.rand(1, 3, 8, 8)
    for t in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            interpolate_at(est, I, I, t)


def test_interpolate_at_per_sample_times():
    torch.manual_seed(0)
    est = FlowEstimator(SMALL).double().eval()
    I0, I1 = torch.rand(2, 3, 8, 8, dtype=torch.float64), torch.rand(2, 3, 8, 8, dtype=torch.float64)
    both = interpolate_at(est, I0, I1, torch.tensor([0.25, 0.75]))
    assert torch.allclose(both[:1], interpolate_at(est, I0[:1], I1[:1], 0.25), atol=1e-12)
    assert torch.allclose(both[1:], interpolate_at(est, I0[1:], I1[1:], 0.75), atol=1e-12)


def test_recursive_midpoints_positions():
    I0 = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
    I1 = torch.ones(1, 1, 2, 2, dtype=torch.float64)
    mid = lambda a, b, t: (a + b) / 2
    assert len(interpolate_recursive_midpoints(mid, I0, I1, 1)) == 1
    outs = interpolate_recursive_midpoints(mid, I0, I1, 3)
    assert [float(o.mean()) for o in outs] == [k / 8 for k in range(1, 8)]


def test_recursive_midpoints_copy_estimator():
    I0, I1 = torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4)
    outs = interpolate_recursive_midpoints(lambda a, b, t: a, I0, I1, 3)
    assert len(outs) == 7 and all(torch.equal(o, I0) for o in outs)


def test_recursive_midpoints_requires_positive_depth():
    with pytest.raises(ValueError):
        interpolate_recursive_midpoints(lambda a, b, t: a, torch.zeros(1), torch.zeros(1), 0)


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    est = FlowEstimator(SMALL)
    path = tmp_path / "ck.pt"
    save_checkpoint(est, path, extra={"steps": 3})
    loaded = load_checkpoint(path, SMALL)
    for (k, a), (_, b) in zip(est.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k


def test_checkpoint_rejects_mismatch(tmp_path):
    path = tmp_path / "ck.pt"
    save_checkpoint(FlowEstimator(SMALL), path)
    with pytest.raises(ValueError):
        load_checkpoint(path, EstimatorDescriptor(base_channels=8, levels=2, head_channels=4))
    torch.save({"format": "other", "version": 1}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.pt")


def test_default_estimator_size_in_toy_range():
    n = sum(p.numel() for p in FlowEstimator().parameters())
    assert 1e6 <= n <= 5e6


# ------------------------------------------------------- trained toy model

def test_trained_flow_matches_constant_shift(toy_training):
    est = toy_training.basic.estimator.eval()
    errors = []
    for clip, truth in zip(toy_training.test_clips, toy_training.test_truths):
        true = truth.flow(0, 8).to_tensor()
        assert torch.all(true[:, 0] == 4.0) and torch.all(true[:, 1] == 0.0)
        with torch.no_grad():
            F01, _ = est(clip.frames[0].to_tensor(), clip.frames[8].to_tensor())
        errors.append(float((F01 - true).norm(dim=1).mean()))
    assert np.mean(errors) < 1.0


def test_trained_model_keeps_a_static_scene(toy_training):
    est = toy_training.basic.estimator.eval()
    for clip in toy_training.test_clips:
        I0 = clip.frames[0].to_tensor()
        with torch.no_grad():
            out = interpolate_at(est, I0, I0, 0.5)
        mse = float(((out - I0) ** 2).mean())
        assert 10 * np.log10(1.0 / max(mse, 1e-10)) > 35.0
