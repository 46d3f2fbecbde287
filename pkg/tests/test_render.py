import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from artisplat.geom import RigidTransform
from artisplat.render import (GaussianTensors, LossWeights, UnlabeledViewWarning, accumulation_target, project_gaussian,
                              rasterize, render_tensors, ssim, total_loss)
from artisplat.render.rasterizer import DILATION
from artisplat.splat import UNLABELED, Camera, Gaussian, SemanticSplat

from fdcheck import max_fd_error


def cam16(f=20.0, size=16):
    # looking down +y from y = -3
    return Camera.look_at([0, -3, 0], [0, 0, 0], f, size, size)


def splat_of(means, log_scale=-2.5, opacity_logit=0.0, colors=None, logits=None, num_parts=2):
    means = np.atleast_2d(np.asarray(means, dtype=float))
    n = len(means)
    colors = np.full((n, 3), 0.5) if colors is None else np.atleast_2d(colors)
    logits = np.zeros((n, num_parts + 1)) if logits is None else np.atleast_2d(logits)
    return SemanticSplat(means, np.full((n, 3), log_scale), np.tile([1.0, 0, 0, 0], (n, 1)),
                         np.full(n, opacity_logit), colors, logits, num_parts)


def render_splat(s, cam):
    return rasterize([(s, RigidTransform.identity())], cam)


def g_at(mean, s=0.1):
    return Gaussian(np.asarray(mean, float), np.full(3, math.log(s)), np.array([1.0, 0, 0, 0]), 0.0, np.zeros(3),
                    np.zeros(3))


def test_project_on_axis():
    cam = cam16()
    mean, cov, depth = project_gaussian(g_at([0, 0, 0]), cam)
    np.testing.assert_allclose(mean, [cam.cx, cam.cy], atol=1e-12)
    assert depth == pytest.approx(3.0)


def test_project_isotropic_covariance():
    cam, sigma = cam16(f=40.0), 0.05
    _, cov, d = project_gaussian(g_at([0, 0, 0], sigma), cam)
    expected = (cam.fx * sigma / d) ** 2
    np.testing.assert_allclose(cov - DILATION * np.eye(2), expected * np.eye(2), rtol=1e-9, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_project_behind_camera_culled():
    cam = cam16()
    assert project_gaussian(g_at([0, -4, 0]), cam) is None
    out = render_splat(splat_of([[0, 0, 0], [0, -4, 0]]), cam)
    assert out.n_culled == 1


def test_empty_splat_renders_black():
    out = render_splat(SemanticSplat.empty(2), cam16())
    rgb, acc, seg = out.numpy()
    assert not rgb.any() and not acc.any()


def test_single_opaque_gaussian_covers_frame():
    color = [0.2, 0.7, 0.4]
    out = render_splat(splat_of([[0, 0, 0]], log_scale=math.log(2.0), opacity_logit=20.0, colors=[color]), cam16(size=17))
    rgb, acc, _ = out.numpy()
    np.testing.assert_allclose(rgb[8, 8], color, atol=1e-3)
    assert acc[8, 8] == pytest.approx(1.0, abs=1e-3)


def test_occlusion():
    near = splat_of([[0, -1, 0]], log_scale=math.log(1.0), opacity_logit=40.0, colors=[[1, 0, 0]])
    both = SemanticSplat.concatenate([near, splat_of([[0, 1, 0]], log_scale=math.log(1.0), opacity_logit=40.0,
                                                     colors=[[0, 0, 1]])])
    # odd size puts pixel (8, 8) on the optical axis, so the near weight is exactly alpha
    rgb, _, _ = render_splat(both, cam16(size=17)).numpy()
    assert rgb[8, 8, 2] < 1e-4


def random_splat(seed, n=15, num_parts=2):
    rng = np.random.default_rng(seed)
    return SemanticSplat(rng.uniform(-0.5, 0.5, (n, 3)), np.log(rng.uniform(0.05, 0.2, (n, 3))), rng.normal(size=(n, 4)),
                         rng.normal(size=n), rng.uniform(size=(n, 3)), rng.normal(size=(n, num_parts + 1)), num_parts)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_segmentation_sums_to_accumulation(seed):
    rgb, acc, seg = render_splat(random_splat(seed), cam16()).numpy()
    assert acc.min() >= 0 and acc.max() <= 1
    np.testing.assert_allclose(seg.sum(-1), acc, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_accumulation_monotone_when_adding(seed):
    s = random_splat(seed)
    extra = random_splat(seed + 1, n=1)
    _, acc0, _ = render_splat(s, cam16()).numpy()
    _, acc1, _ = render_splat(SemanticSplat.concatenate([s, extra]), cam16()).numpy()
    assert np.all(acc1 >= acc0 - 1e-12)


def test_render_bit_identical_across_runs_and_threads():
    s = random_splat(3, n=40)
    a = render_splat(s, cam16()).numpy()
    prev = torch.get_num_threads()
    try:
        torch.set_num_threads(1)
        b = render_splat(s, cam16()).numpy()
    finally:
        torch.set_num_threads(prev)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_depth_ties_by_index():
    s = splat_of([[0, 0, 0], [0, 0, 0]], log_scale=math.log(0.5), colors=[[1, 0, 0], [0, 1, 0]])
    out = render_splat(s, cam16())
    assert out.order.tolist() == [0, 1]


def sk_ssim(a, b):
    return structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0,
                                 channel_axis=-1 if a.ndim == 3 else None)


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(20, 20, 3)), rng.uniform(size=(20, 20, 3))
    assert float(ssim(a, a)) == pytest.approx(1.0, abs=1e-12)
    assert float(ssim(a, b)) == pytest.approx(float(ssim(b, a)), abs=1e-12)


def test_ssim_constant_offset_matches_reference():
    a = np.full((32, 32), 0.25)
    b = a + 0.5
    assert float(ssim(a, b)) == pytest.approx(sk_ssim(a, b), abs=1e-6)


def test_ssim_negative_noise():
    a = np.random.default_rng(1).uniform(size=(32, 32))
    val = float(ssim(a, 1 - a))
    assert val < 0.2
    assert val == pytest.approx(sk_ssim(a, 1 - a), abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_matches_reference_random(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(24, 24, 3))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    assert float(ssim(a, b)) == pytest.approx(sk_ssim(a, b), abs=1e-6)


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16)), np.zeros((16, 15)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 0, 0)


def rendered(seed=0):
    g = GaussianTensors.from_splat(random_splat(seed))
    return render_tensors(g, cam16())


def test_total_loss_zero_at_ground_truth():
    out = rendered()
    rgb, acc, _ = out.numpy()
    loss = total_loss(out, rgb, acc, None, LossWeights(1, 1, 1, 0))
    assert abs(float(loss)) < 1e-6


def test_total_loss_constant_accumulation_offset():
    out = rendered()
    _, acc, _ = out.numpy()
    loss = total_loss(out, np.zeros((16, 16, 3)), np.clip(acc + 0.1, None, None), None, LossWeights(1, 0, 0, 0))
    assert float(loss) == pytest.approx(0.1, abs=1e-6)


def test_total_loss_unlabeled_warns_and_skips_ce():
    out = rendered()
    rgb, acc, _ = out.numpy()
    labels = np.full((16, 16), UNLABELED, dtype=np.uint8)
    with pytest.warns(UnlabeledViewWarning):
        loss = total_loss(out, rgb, acc, labels, LossWeights(0, 1, 0, 1))
    assert abs(float(loss)) < 1e-9


def test_cross_entropy_masks_sentinel():
    out = rendered()
    labels = np.full((16, 16), UNLABELED, dtype=np.uint8)
    labels[4:8, 4:8] = 1
    terms = {}
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        total_loss(out, np.zeros((16, 16, 3)), None, labels, LossWeights(0, 0, 0, 1), terms=terms)
    assert math.isfinite(terms["seg"]) and terms["seg"] > 0


def test_accumulation_target():
    labels = np.array([[0, 1], [2, UNLABELED]], dtype=np.uint8)
    target, mask = accumulation_target(labels)
    np.testing.assert_array_equal(target, [[0, 1], [1, 0]])
    np.testing.assert_array_equal(mask, [[True, True], [True, False]])


def test_gradients_finite_and_match_finite_differences():
    worst, retried, total = max_fd_error(seed=101, n_gaussians=20)
    assert worst < 1e-3
    assert retried <= 0.02 * total


def test_pose_gradients_flow():
    from artisplat.geom import euler_to_matrix_t
    from artisplat.render import render_parts
    g = GaussianTensors.from_splat(random_splat(5))
    trans = torch.zeros((1, 3), dtype=torch.float64, requires_grad=True)
    angles = torch.zeros((1, 3), dtype=torch.float64, requires_grad=True)
    out = render_parts([g], euler_to_matrix_t(angles), trans, cam16())
    out.rgb.sum().backward()
    assert torch.isfinite(trans.grad).all() and trans.grad.abs().sum() > 0
    assert torch.isfinite(angles.grad).all() and angles.grad.abs().sum() > 0
