import numpy as np
import pytest

from microfield import autodiff as ad
from microfield.autodiff import backward, finite_diff_check
from microfield.fields import (MATERIAL_HEADS, VMGrid, build_model,
                               dense_reconstruction, encoding_width,
                               positional_encoding, vm_query,
                               vm_spatial_grad)
from microfield.rng import stream

from conftest import tiny_config


def random_grid(seed=0, res=(5, 6, 7), rank=2, channels=3, scale=0.5):
    g = VMGrid(res, rank=rank, channels=channels, aabb=(-1.0, 1.0))
    g.randomize(stream(seed, "grid"), scale)
    return g


def trilinear(dense, p, aabb=(-1.0, 1.0)):
    res = dense.shape[1:]
    u = [(p[k] - aabb[0]) / (aabb[1] - aabb[0]) * (res[k] - 1)
         for k in range(3)]
    i = [min(int(np.floor(u[k])), res[k] - 2) for k in range(3)]
    f = [u[k] - i[k] for k in range(3)]
    out = np.zeros(dense.shape[0])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1])
                     * (f[2] if dz else 1 - f[2]))
                out += w * dense[:, i[0] + dx, i[1] + dy, i[2] + dz]
    return out


def test_zero_grid_queries_to_zero():
    g = VMGrid((4, 4, 4), rank=2, channels=3, aabb=(-1.0, 1.0))
    pts = np.random.default_rng(0).uniform(-1, 1, (10, 3))
    assert np.all(vm_query(g, pts).data == 0.0)


def test_rank1_separable_product_exact_at_nodes():
    # factors chosen so the stored volume is f(x,y,z) = x*y*z
    g = VMGrid((3, 3, 3), rank=1, channels=1, aabb=(-1.0, 1.0))
    axis = np.linspace(-1, 1, 3)
    g.planes[0].data = np.outer(axis, axis).reshape(1, 1, 3, 3).astype(np.float32)
    g.lines[0].data = axis.reshape(1, 1, 3).astype(np.float32)
    for i in (0, 1, 2):
        for j in (0, 1, 2):
            for k in (0, 1, 2):
                q = vm_query(g, np.array([[axis[i], axis[j], axis[k]]]))
                assert q.data[0, 0] == pytest.approx(
                    axis[i] * axis[j] * axis[k], abs=1e-7)


def test_query_matches_dense_reconstruction():
    g = random_grid(seed=3, res=(6, 5, 4), rank=2, channels=3)
    dense = dense_reconstruction(g)
    pts = np.random.default_rng(1).uniform(-0.99, 0.99, (50, 3))
    q = vm_query(g, pts).data
    ref = np.stack([trilinear(dense, p) for p in pts])
    assert np.abs(q - ref).max() < 1e-5


def test_outside_box_is_zero_feature():
    g = random_grid()
    pts = np.array([[1.5, 0.0, 0.0], [0.0, -2.0, 0.3], [0.0, 0.0, 1.0001]])
    assert np.all(vm_query(g, pts).data == 0.0)


def test_vm_query_gradients_match_fd():
    g = random_grid(seed=5)
    pts = np.random.default_rng(2).uniform(-0.95, 0.95, (7, 3))
    wl = np.random.default_rng(3).standard_normal((7, 3))

    def f():
        return ad.tsum(ad.mul(vm_query(g, pts), wl))

    assert finite_diff_check(f, g.tensors(), step=1e-3) < 1e-4


def test_spatial_grad_matches_numeric_difference():
    g = random_grid(seed=8, channels=1, rank=2, res=(5, 5, 5))
    p0 = np.array([[0.21, -0.33, 0.55]])
    sg = vm_spatial_grad(g, p0).data[0]
    h = 1e-5
    for k in range(3):
        pp, pm = p0.copy(), p0.copy()
        pp[0, k] += h
        pm[0, k] -= h
        num = (vm_query(g, pp).data[0, 0] - vm_query(g, pm).data[0, 0]) / (2 * h)
        assert sg[k] == pytest.approx(num, abs=1e-5)


def test_spatial_grad_vjp_matches_fd():
    g = random_grid(seed=9, channels=1, rank=2, res=(5, 4, 6))
    pts = np.random.default_rng(4).uniform(-0.9, 0.9, (6, 3))
    wl = np.random.default_rng(5).standard_normal((6, 3))

    def f():
        return ad.tsum(ad.mul(vm_spatial_grad(g, pts), wl))

    assert finite_diff_check(f, g.tensors(), step=1e-3) < 1e-4


def test_positional_encoding_width():
    assert encoding_width(6, True) == 39
    assert encoding_width(4, False) == 24
    x = np.zeros((5, 3))
    assert positional_encoding(x, 6, True).shape == (5, 39)


def test_density_softplus_floor_and_monotonicity():
    cfg = tiny_config()
    model = build_model(cfg, seed=0)
    for t in model.density_grid.tensors():
        t.data = np.zeros_like(t.data)
    pts = np.random.default_rng(0).uniform(-1.2, 1.2, (20, 3))
    sigma = model.density(pts).data
    assert np.allclose(sigma, np.log1p(np.exp(-10.0)), atol=1e-7)
    # raw + shift = 0 gives ln 2
    model.density_shift.data = np.asarray(np.float32(0.0))
    assert np.allclose(model.density(pts).data, np.log(2.0), atol=1e-6)
    # monotone in the raw value
    model.density_shift.data = np.asarray(np.float32(2.0))
    assert np.all(model.density(pts).data > np.log(2.0))


def test_normal_of_linear_field_is_constant():
    cfg = tiny_config()
    model = build_model(cfg, seed=0)
    for t in model.density_grid.tensors():
        t.data = np.zeros_like(t.data)
    # raw field = x via the (x,z)-plane factor times a constant line
    res = model.density_grid.resolution
    axis = np.linspace(-1, 1, res[0], dtype=np.float32)
    plane = np.broadcast_to(axis[:, None], (res[0], res[2])).copy()
    model.density_grid.planes[1].data = plane.reshape(1, 1, *plane.shape)
    model.density_grid.lines[1].data = np.ones((1, 1, res[1]), np.float32)
    pts = np.random.default_rng(1).uniform(-1.0, 1.0, (30, 3))
    n_hat, valid, _ = model.normal(pts)
    assert valid.all()
    assert np.allclose(n_hat.data, [-1.0, 0.0, 0.0], atol=1e-6)


def test_normal_against_density_finite_differences():
    cfg = tiny_config(density_res=(8, 8, 8), density_rank=2)
    model = build_model(cfg, seed=3)
    gen = stream(1, "bump")
    for t in model.density_grid.tensors():
        t.data = (0.6 * gen.standard_normal(t.data.shape)).astype(np.float32)
    model.density_shift.data = np.asarray(np.float32(0.0))
    pts = np.random.default_rng(2).uniform(-1.0, 1.0, (40, 3))
    n_hat, valid, _ = model.normal(pts)
    h = 2e-5
    num = np.zeros((len(pts), 3))
    for k in range(3):
        pp, pm = pts.copy(), pts.copy()
        pp[:, k] += h
        pm[:, k] -= h
        num[:, k] = (model.density(pp).data - model.density(pm).data) / (2 * h)
    # skip points whose fd stencil straddles a cell boundary
    cell = (pts - cfg.aabb[0]) / (cfg.aabb[1] - cfg.aabb[0]) * 7
    interior = np.all(np.abs(cell - np.round(cell)) * (2.4 / 7) > h * 4,
                      axis=1) & valid
    ref = -num[interior] / np.linalg.norm(num[interior], axis=1,
                                          keepdims=True)
    dots = np.clip((n_hat.data[interior] * ref).sum(axis=1), -1, 1)
    assert np.degrees(np.arccos(dots)).max() < 1.0


def test_constant_density_flags_degenerate_gradient():
    cfg = tiny_config()
    model = build_model(cfg, seed=0)
    for t in model.density_grid.tensors():
        t.data = np.zeros_like(t.data)
    _, valid, mag = model.normal(np.array([[0.1, 0.2, 0.3]]))
    assert not valid.any()
    assert np.all(mag < cfg.normal_eps)


def test_normals_unit_length_where_defined(tiny_model):
    pts = np.random.default_rng(3).uniform(-1.4, 1.4, (50, 3))
    n_hat, valid, _ = tiny_model.normal(pts)
    norms = np.linalg.norm(n_hat.data[valid], axis=1)
    assert np.allclose(norms, 1.0, atol=1e-5)


def test_material_outputs_in_open_unit_interval(tiny_model):
    pts = np.random.default_rng(4).uniform(-1.2, 1.2, (40, 3))
    mats = tiny_model.material(pts)
    for head in MATERIAL_HEADS:
        vals = mats[head].data
        assert vals.shape[1] == (1 if head == "roughness" else 3)
        assert np.all(vals > 0.0) and np.all(vals < 1.0)


def test_zeroed_decoders_output_half(tiny_model):
    for head in MATERIAL_HEADS:
        tiny_model.decoders[head].zero()
    pts = np.random.default_rng(5).uniform(-1.0, 1.0, (10, 3))
    mats = tiny_model.material(pts)
    for head in MATERIAL_HEADS:
        assert np.allclose(mats[head].data, 0.5)


def test_structural_disentanglement_of_heads(tiny_model):
    pts = np.random.default_rng(6).uniform(-1.0, 1.0, (1000, 3))
    before = {h: tiny_model.material(pts)[h].data.copy()
              for h in MATERIAL_HEADS}
    for t in tiny_model.app_grids["roughness"].tensors():
        t.data = np.zeros_like(t.data)
    after = tiny_model.material(pts)
    assert not np.array_equal(after["roughness"].data, before["roughness"])
    assert np.array_equal(after["albedo"].data, before["albedo"])
    assert np.array_equal(after["f0"].data, before["f0"])


def test_cross_branch_gradients_are_exactly_zero(tiny_model):
    pts = np.random.default_rng(7).uniform(-1.0, 1.0, (20, 3))
    tiny_model.zero_grad()
    mats = tiny_model.material(pts)
    backward(ad.tsum(mats["roughness"]))
    rough_grads = [p.tensor.grad for p in tiny_model.group("roughness").params]
    assert any(g is not None and np.any(g != 0) for g in rough_grads)
    for other in ("albedo", "f0"):
        for p in tiny_model.group(other).params:
            assert p.tensor.grad is None


def test_multiplier_hook_applies_after_sigmoid(tiny_model):
    pts = np.random.default_rng(8).uniform(-1.0, 1.0, (10, 3))
    base = tiny_model.material(pts)["albedo"].data.copy()
    tiny_model.multipliers["albedo"] = 2.0
    scaled = tiny_model.material(pts)["albedo"].data
    assert np.allclose(scaled, np.clip(base * 2.0, 0, 1), atol=1e-7)


def test_exactly_six_parameter_groups(tiny_model):
    assert [g.name for g in tiny_model.groups] == [
        "density", "albedo", "roughness", "f0", "envmap", "specular_mlp"]


def test_clone_is_deep_and_bit_identical(tiny_model):
    clone = tiny_model.clone()
    for g0, g1 in zip(tiny_model.groups, clone.groups):
        for p0, p1 in zip(g0.params, g1.params):
            assert p0.tensor is not p1.tensor
            assert np.array_equal(p0.tensor.data, p1.tensor.data)
    clone.density_shift.data = clone.density_shift.data + 1.0
    assert not np.array_equal(clone.density_shift.data,
                              tiny_model.density_shift.data)
