import numpy as np
import pytest

from microfield.metrics import (MetricBundle, epsnr, mae_normals, psnr,
                                resample_bilinear, ssim)


def test_psnr_identical_images_capped():
    img = np.random.default_rng(0).random((16, 16, 3))
    assert psnr(img, img) == 99.0


def test_psnr_uniform_difference():
    gt = np.full((32, 32, 3), 0.5)
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0, abs=1e-9)


def test_psnr_checkerboard_half_wrong():
    gt = np.zeros((16, 16))
    pred = gt.copy()
    pred[::2, ::2] = 1.0
    pred[1::2, 1::2] = 1.0
    expected = 10 * np.log10(1 / 0.5)
    assert psnr(pred, gt) == pytest.approx(expected, abs=1e-9)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((5, 4)))


def test_psnr_symmetric_and_decreasing_in_noise():
    rng = np.random.default_rng(1)
    gt = rng.random((24, 24, 3))
    prev = np.inf
    for amp in (0.01, 0.05, 0.1, 0.3):
        pred = np.clip(gt + amp * rng.standard_normal(gt.shape), 0, 1)
        value = psnr(pred, gt)
        assert value == psnr(gt, pred)
        assert value < prev
        prev = value


def test_ssim_identical_is_one():
    img = np.random.default_rng(2).random((24, 24, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)


def test_ssim_inverted_binary_is_negative():
    rng = np.random.default_rng(3)
    gt = (rng.random((32, 32)) > 0.5).astype(float)
    assert ssim(1.0 - gt, gt) < 0.0


def test_ssim_constant_images_reduce_to_luminance_term():
    a_val, b_val = 0.3, 0.6
    a = np.full((16, 16), a_val)
    b = np.full((16, 16), b_val)
    c1 = 0.01 ** 2
    expected = (2 * a_val * b_val + c1) / (a_val ** 2 + b_val ** 2 + c1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-9)


def test_ssim_rejects_tiny_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_symmetric():
    rng = np.random.default_rng(4)
    a, b = rng.random((20, 20)), rng.random((20, 20))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def rotation(axis, deg):
    axis = np.asarray(axis) / np.linalg.norm(axis)
    a = np.radians(deg)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(a) * k + (1 - np.cos(a)) * (k @ k)


def random_normals(shape, seed):
    v = np.random.default_rng(seed).standard_normal(shape + (3,))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_mae_identical_fields_zero():
    n = random_normals((8, 8), 0)
    value, count = mae_normals(n, n, np.ones((8, 8), bool))
    assert value == pytest.approx(0.0, abs=1e-5)
    assert count == 64


def test_mae_uniform_rotation():
    # tilt every normal 30 degrees about an axis perpendicular to it
    n = random_normals((16, 16), 1).reshape(-1, 3)
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]],
                      [[1.0, 0.0, 0.0]])
    axis = np.cross(n, helper)
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    pred = np.stack([rotation(a, 30.0) @ v for a, v in zip(axis, n)])
    value, _ = mae_normals(pred, n, np.ones(len(n), bool))
    assert value == pytest.approx(30.0, abs=1e-2)


def test_mae_mixed_angles_average():
    n = np.tile([0.0, 0.0, 1.0], (10, 1))
    pred = n.copy()
    pred[5:] = [1.0, 0.0, 0.0]  # 90 degrees off
    value, _ = mae_normals(pred, n, np.ones(10, bool))
    assert value == pytest.approx(45.0, abs=1e-6)


def test_mae_respects_mask_and_rejects_empty():
    n = random_normals((4, 4), 2)
    pred = n.copy()
    pred[0, 0] = [1.0, 0.0, 0.0]
    mask = np.ones((4, 4), bool)
    mask[0, 0] = False
    value, count = mae_normals(pred, n, mask)
    assert value == pytest.approx(0.0, abs=1e-5)
    assert count == 15
    with pytest.raises(ValueError):
        mae_normals(pred, n, np.zeros((4, 4), bool))


def test_mae_invariant_under_joint_rotation():
    n = random_normals((12, 12), 3)
    pred = random_normals((12, 12), 4)
    base, _ = mae_normals(pred, n, np.ones((12, 12), bool))
    rot = rotation([1.0, 2.0, 3.0], 72.0)
    joint, _ = mae_normals(pred @ rot.T, n @ rot.T, np.ones((12, 12), bool))
    assert joint == pytest.approx(base, abs=1e-9)


def test_epsnr_identical_capped_and_offset():
    env = np.random.default_rng(5).random((8, 16, 3))
    assert epsnr(env, env) == 99.0
    shifted = np.clip(env, 0, 0.9)
    assert epsnr(shifted + 0.1, shifted) == pytest.approx(20.0, abs=1e-9)


def test_epsnr_resamples_prediction_to_gt_resolution():
    # smooth map: upsampling then comparing against the original is benign
    v = np.linspace(0, 1, 8)[:, None, None]
    u = np.sin(np.linspace(0, 2 * np.pi, 16, endpoint=False))[None, :, None]
    gt = 0.5 + 0.3 * v * np.ones((1, 16, 3)) + 0.1 * u
    up = resample_bilinear(gt, 32, 64)
    assert up.shape == (32, 64, 3)
    assert epsnr(up, gt) > 30.0


def test_blur_lowers_epsnr_on_structured_maps():
    from microfield.perturb import blur_envmap
    env = np.random.default_rng(7).random((16, 32, 3))
    assert epsnr(blur_envmap(env, 9, 4.0), env) < epsnr(env, env)


def test_bundle_serialization():
    b = MetricBundle(psnr=30.0, ssim=0.9, mae=5.0, epsnr=None, pixel_count=7)
    d = b.as_dict()
    assert d["psnr"] == 30.0 and d["epsnr"] is None and d["pixel_count"] == 7
