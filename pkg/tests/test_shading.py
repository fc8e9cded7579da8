import numpy as np
import pytest

from microfield import autodiff as ad
from microfield import shading as sh
from microfield.autodiff import Tensor, finite_diff_check
from microfield.rng import stream


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# analytic fixtures
# ---------------------------------------------------------------------------

def test_fresnel_endpoints_and_midpoint():
    assert sh.fresnel(np.array(0.04), np.array(1.0)).data == pytest.approx(0.04)
    assert sh.fresnel(np.array(0.04), np.array(0.0)).data == pytest.approx(1.0)
    assert sh.fresnel(np.array(0.5), np.array(0.5)).data == pytest.approx(
        0.515625, abs=1e-9)


def test_fresnel_monotone_nonincreasing_in_cosine():
    cos = np.linspace(0, 1, 200)
    for f0 in (0.02, 0.3, 0.9):
        vals = sh.fresnel(np.full_like(cos, f0), cos).data
        assert np.all(np.diff(vals) <= 1e-12)
        assert vals[0] == pytest.approx(1.0)
        assert vals[-1] == pytest.approx(f0)


def test_ndf_constant_at_unit_roughness():
    for nh in (0.1, 0.5, 0.99):
        assert sh.ndf(np.array(1.0), np.array(nh)).data == pytest.approx(
            1.0 / np.pi, rel=1e-6)


def test_ndf_zero_below_horizon():
    assert sh.ndf(np.array(0.5), np.array(-0.3)).data == 0.0
    assert sh.ndf(np.array(0.5), np.array(0.0)).data == 0.0


def test_ndf_peak_value():
    assert sh.ndf(np.array(0.5), np.array(1.0)).data == pytest.approx(
        1.0 / (np.pi * 0.25), rel=1e-6)


def test_smith_g1_fixtures():
    assert sh.smith_g1(np.array(1.0), np.array(0.7)).data == pytest.approx(1.0)
    assert sh.smith_g1(np.array(0.5), np.array(1.0)).data == pytest.approx(
        2.0 / 3.0, rel=1e-6)
    # smooth-surface limit (alpha at its clamp floor)
    assert sh.smith_g1(np.array(0.3), np.array(0.0)).data == pytest.approx(
        1.0, abs=1e-5)


def test_specular_head_on_fixture():
    one = np.array(1.0)
    val = sh.specular_term(one, one, one, one, one).data
    assert val == pytest.approx(1.0 / (4.0 * np.pi), rel=1e-6)


def test_specular_zero_below_horizon():
    one = np.array(1.0)
    assert sh.specular_term(one, one, one, np.array(-0.2), one).data == 0.0


def test_brdf_lambertian_reduction():
    # Fr == 0 (f0 = 0 at normal incidence) leaves albedo / pi
    albedo = np.array([0.2, 0.4, 0.6])
    out = sh.brdf(albedo, np.zeros(3), np.array(1.0), np.array(1.0),
                  np.array(1.0), np.array(1.0), np.array(1.0),
                  np.array(0.0)).data
    assert np.allclose(out, albedo / np.pi, rtol=1e-6)


def test_brdf_grazing_kills_diffuse():
    albedo = np.array([0.9, 0.9, 0.9])
    out = sh.brdf(albedo, np.full(3, 0.5), np.array(1.0), np.array(0.5),
                  np.array(0.5), np.array(0.5), np.array(0.0),
                  np.array(1.0)).data
    fr = 1.0  # cos_ho = 0
    fs = sh.specular_term(np.array(1.0), np.array(0.5), np.array(0.5),
                          np.array(0.5), np.array(1.0)).data
    assert np.allclose(out, fr * fs, rtol=1e-6)


def test_brdf_mix_hand_value():
    albedo = np.array([0.2, 0.4, 0.6])
    # choose cos_ho so Fr = 0.5 exactly with f0 chosen accordingly
    cos_ho = 0.5
    f0 = (0.5 - (1 - cos_ho) ** 5) / (1 - (1 - cos_ho) ** 5)
    g = np.array(1.0)
    fs = sh.specular_term(np.array(1.0), np.array(1.0), np.array(1.0),
                          np.array(1.0), g).data
    out = sh.brdf(albedo, np.full(3, f0), np.array(1.0), np.array(1.0),
                  np.array(1.0), np.array(1.0), np.array(cos_ho), g).data
    assert np.allclose(out, albedo / np.pi * 0.5 + 0.5 * fs, rtol=1e-5)
    assert np.all(out >= 0.0)


# ---------------------------------------------------------------------------
# NDF normalization and sampling
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("alpha", [0.1, 0.5, 1.0])
def test_ndf_normalization_quadrature(alpha):
    # stratified Monte Carlo of D(h) (n.h) over the hemisphere, 1e5 samples
    gen = stream(123, "ndf-norm", str(alpha))
    u = sh.stratified_uniforms(gen, 1, 100_000)[0]
    cos_t = u[:, 0]
    d = sh.ndf(np.full_like(cos_t, alpha), cos_t).data
    estimate = float(np.mean(d * cos_t) * 2.0 * np.pi)
    assert 0.98 < estimate < 1.02


def test_sample_specular_mirror_limit():
    n = unit([[0.0, 0.0, 1.0]])
    wo = unit([[0.3, -0.1, 0.9]])
    gen = stream(5, "mirror")
    wi, pdf, valid = sh.sample_specular(n, wo, sh.ALPHA_MIN, gen)
    mirror = 2.0 * (wo @ n.T) * n - wo
    angle = np.degrees(np.arccos(np.clip((unit(wi) * mirror).sum(), -1, 1)))
    assert valid.all()
    assert angle < 1.0


def test_sample_specular_fixed_seed_reproducible():
    n = unit(np.random.default_rng(0).standard_normal((20, 3)))
    n[:, 2] = np.abs(n[:, 2]) + 0.5
    n = unit(n)
    wo = np.tile(unit([[0.0, 0.0, 1.0]]), (20, 1))
    a = sh.sample_specular(n, wo, 0.4, stream(9, "rep"))
    b = sh.sample_specular(n, wo, 0.4, stream(9, "rep"))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@pytest.mark.parametrize("alpha", [0.2, 0.6])
def test_sampler_consistent_with_quadrature(alpha):
    """MC estimate of the cosine-weighted specular integral vs quadrature."""
    n = np.array([0.0, 0.0, 1.0])
    wo = unit([0.2, 0.1, 0.97])

    def integrand(wi):
        h = unit(wi + wo)
        cos_nh = h[..., 2]
        cos_ni = wi[..., 2]
        cos_no = wo[2]
        fs = sh.specular_term(np.full_like(cos_nh, alpha), cos_nh,
                              np.full_like(cos_nh, cos_no), cos_ni,
                              np.array(1.0)).data
        return fs * np.maximum(cos_ni, 0.0)

    # dense spherical quadrature over the hemisphere
    nt, np_ = 400, 800
    theta = (np.arange(nt) + 0.5) / nt * (np.pi / 2)
    phi = (np.arange(np_) + 0.5) / np_ * (2 * np.pi)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    wi_q = np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp),
                     np.cos(tt)], axis=-1).reshape(-1, 3)
    omega = (np.sin(tt) * (np.pi / 2 / nt) * (2 * np.pi / np_)).reshape(-1)
    ref = float((integrand(wi_q) * omega).sum())

    count = 60_000
    gen = stream(17, "consistency", str(alpha))
    wi, pdf, valid = sh.sample_specular(np.tile(n, (count, 1)),
                                        np.tile(wo, (count, 1)), alpha, gen)
    contrib = np.where(valid, integrand(wi) / np.maximum(pdf, 1e-12), 0.0)
    mc = contrib.mean()
    sem = contrib.std() / np.sqrt(count)
    assert abs(mc - ref) < 3.0 * sem + 1e-4


# ---------------------------------------------------------------------------
# environment map
# ---------------------------------------------------------------------------

def test_env_lookup_constant_map():
    env = sh.EnvironmentMap.from_radiance(np.full((8, 16, 3), 0.7))
    dirs = unit(np.random.default_rng(0).standard_normal((30, 3)))
    out = sh.env_lookup(env, dirs).data
    assert np.allclose(out, 0.7, atol=1e-6)


def test_env_lookup_pole_hits_top_row():
    rad = np.zeros((4, 8, 3))
    rad[0] = 5.0
    out = sh.env_sample(rad, np.array([[0.0, 1.0, 0.0]])).data
    assert np.allclose(out, 5.0)


def test_env_lookup_midway_between_texels():
    rng = np.random.default_rng(1)
    rad = rng.random((4, 8, 3))
    h, w = 4, 8
    v_c = 1.5 / h           # row-1 center
    u_mid = 2.0 / w         # halfway between columns 1 and 2
    theta, phi = v_c * np.pi, (u_mid - 0.5) * 2 * np.pi
    d = np.array([[np.sin(theta) * np.sin(phi), np.cos(theta),
                   -np.sin(theta) * np.cos(phi)]])
    out = sh.env_sample(rad, d).data[0]
    assert np.allclose(out, 0.5 * (rad[1, 1] + rad[1, 2]), atol=1e-12)


def test_env_lookup_periodic_in_longitude():
    rad = np.random.default_rng(2).random((6, 12, 3))
    dirs = unit(np.random.default_rng(3).standard_normal((20, 3)))
    base = sh.env_sample(rad, dirs).data
    for turns in (1, 2, 5):
        ang = 2 * np.pi * turns
        rot = np.array([[np.cos(ang), 0, np.sin(ang)], [0, 1, 0],
                        [-np.sin(ang), 0, np.cos(ang)]])
        out = sh.env_sample(rad, dirs @ rot.T).data
        assert np.allclose(out, base, atol=1e-9)


def test_env_radiance_nonnegative():
    raw = Tensor(np.random.default_rng(4).standard_normal((5, 10, 3)) * 3,
                 requires_grad=True)
    env = sh.EnvironmentMap(raw)
    assert np.all(env.radiance_values() > 0.0)


def test_env_sample_gradients_both_inputs():
    rng = np.random.default_rng(5)
    raw = Tensor(rng.standard_normal((6, 12, 3)) * 0.3, requires_grad=True)
    dirs = Tensor(unit(rng.standard_normal((8, 3))), requires_grad=True)
    wl = rng.standard_normal((8, 3))

    def f():
        return ad.tsum(ad.mul(sh.env_sample(ad.softplus(raw), dirs), wl))

    assert finite_diff_check(f, [raw, dirs], step=1e-4) < 1e-3


def test_frame_orthonormal_and_differentiable():
    rng = np.random.default_rng(6)
    n = unit(rng.standard_normal((40, 3)))
    t, b = sh.orthonormal_frame(n)
    assert np.allclose((t.data * n).sum(axis=1), 0, atol=1e-6)
    assert np.allclose((t.data * b.data).sum(axis=1), 0, atol=1e-6)
    assert np.allclose(np.linalg.norm(t.data, axis=1), 1, atol=1e-6)
    assert np.allclose(np.linalg.norm(b.data, axis=1), 1, atol=1e-6)


def test_reflect_mirrors_about_normal():
    n = np.array([[0.0, 0.0, 1.0]])
    v = unit([[0.4, 0.2, 0.89]])
    r = sh.reflect(v, n).data
    assert np.allclose(r[0, :2], -v[0, :2], atol=1e-7)
    assert np.allclose(r[0, 2], v[0, 2], atol=1e-7)


def test_ggx_half_cosine_matches_cdf_inversion():
    u = np.linspace(0.01, 0.99, 50)
    for alpha in (0.1, 0.5, 1.0):
        got = sh.ggx_half_cosine(u, np.array(alpha)).data
        want = np.sqrt((1 - u) / (1 + (alpha ** 2 - 1) * u))
        assert np.allclose(got, want, atol=1e-7)
