"""Microfacet BRDF and far-field environment illumination.

The reflectance model is a diffuse plus specular mix gated by the Schlick
Fresnel factor:

    f = (albedo / pi) * (1 - Fr(h)) + Fr(h) * f_s,

with the specular lobe f_s = D * G1(outgoing) * g / (4 (n.wo)(n.wi)) built
from the Trowbridge-Reitz normal distribution D, a one-direction Smith
masking factor G1 and a learned bounded multiplier g for everything the
analytic terms do not capture.

All functions accept plain ndarrays or graph Tensors and return Tensors;
fixtures typically evaluate them on arrays and read ``.data``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_node

ALPHA_MIN = 1e-3
_DENOM_MIN = 1e-6
_PDF_MIN = 1e-8


def _val(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def dot(a, b, keepdims: bool = True) -> Tensor:
    return ad.tsum(ad.mul(a, b), axis=-1, keepdims=keepdims)


def normalize(v) -> Tensor:
    inv = ad.power(dot(v, v) + 1e-24, -0.5)
    return ad.mul(v, inv)


# ---------------------------------------------------------------------------
# analytic BRDF terms
# ---------------------------------------------------------------------------

def fresnel(f0, cos_theta) -> Tensor:
    """Schlick approximation; f0 at normal incidence, 1 at grazing."""
    c = ad.clamp(cos_theta, 0.0, 1.0)
    return ad.add(f0, ad.mul(ad.sub(1.0, f0), ad.power(ad.sub(1.0, c), 5.0)))


def ndf(alpha, cos_nh) -> Tensor:
    """Trowbridge-Reitz distribution; zero outside the upper hemisphere."""
    a = ad.clamp(alpha, ALPHA_MIN, 1.0)
    a2 = ad.mul(a, a)
    c = _val(cos_nh)
    support = (c > 0.0).astype(c.dtype)
    c2 = ad.mul(cos_nh, cos_nh)
    denom = ad.add(ad.mul(c2, ad.sub(a2, 1.0)), 1.0)
    d = ad.div(a2, ad.mul(ad.clamp(ad.mul(denom, denom), 1e-12, None), np.pi))
    return ad.mul(d, support)


def smith_g1(cos_nv, alpha) -> Tensor:
    """One-direction Smith masking matched to the Trowbridge-Reitz lobe."""
    a = ad.clamp(alpha, ALPHA_MIN, 1.0)
    a2 = ad.mul(a, a)
    c = ad.clamp(cos_nv, 1e-6, 1.0)
    c2 = ad.mul(c, c)
    root = ad.power(ad.add(a2, ad.mul(ad.sub(1.0, a2), c2)), 0.5)
    return ad.div(ad.mul(c, 2.0), ad.add(c, root))


def specular_term(alpha, cos_nh, cos_no, cos_ni, g_value) -> Tensor:
    """Specular lobe D * G1 * g / (4 (n.wo)(n.wi)); zero below the horizon."""
    no = _val(cos_no)
    ni = _val(cos_ni)
    above = ((no > 0.0) & (ni > 0.0)).astype(no.dtype)
    d = ndf(alpha, cos_nh)
    g1 = smith_g1(cos_no, alpha)
    denom = ad.clamp(ad.mul(ad.mul(cos_no, cos_ni), 4.0), _DENOM_MIN, None)
    return ad.mul(ad.div(ad.mul(ad.mul(d, g1), g_value), denom), above)


def brdf(albedo, f0, alpha, cos_nh, cos_no, cos_ni, cos_ho, g_value) -> Tensor:
    """Full reflectance: Fresnel-gated diffuse plus specular mix."""
    fr = fresnel(f0, cos_ho)
    diffuse = ad.mul(ad.div(albedo, np.pi), ad.sub(1.0, fr))
    spec = ad.mul(fr, specular_term(alpha, cos_nh, cos_no, cos_ni, g_value))
    return ad.add(diffuse, spec)


# ---------------------------------------------------------------------------
# local frames and sampling
# ---------------------------------------------------------------------------

def orthonormal_frame(n):
    """Tangent/bitangent completing n; differentiable w.r.t. n.

    The helper axis is chosen per row from the detached normal so the
    branch itself carries no gradient.
    """
    nv = _val(n)
    use_z = np.abs(nv[..., 2:3]) < 0.9
    helper = np.where(use_z,
                      np.array([0.0, 0.0, 1.0], dtype=nv.dtype),
                      np.array([1.0, 0.0, 0.0], dtype=nv.dtype))
    t = normalize(cross(helper, n))
    b = cross(n, t)
    return t, b


def cross(a, b) -> Tensor:
    ax, ay, az = (ad.take(a, (..., k)) for k in range(3))
    bx, by, bz = (ad.take(b, (..., k)) for k in range(3))
    return ad.stack([
        ad.sub(ad.mul(ay, bz), ad.mul(az, by)),
        ad.sub(ad.mul(az, bx), ad.mul(ax, bz)),
        ad.sub(ad.mul(ax, by), ad.mul(ay, bx)),
    ], axis=-1)


def reflect(v, n) -> Tensor:
    """Mirror v about n: 2 (v.n) n - v."""
    return ad.sub(ad.mul(ad.mul(dot(v, n), 2.0), n), v)


# ---------------------------------------------------------------------------
# environment map
# ---------------------------------------------------------------------------

class EnvironmentMap:
    """Equirectangular radiance image, trainable through a softplus.

    The stored tensor is pre-activation; radiance() applies softplus so the
    emitted values are strictly positive.  Lookups are bilinear with
    longitude wraparound and latitude clamped at the poles.
    """

    def __init__(self, raw: Tensor):
        if raw.data.ndim != 3 or raw.data.shape[2] != 3:
            raise ValueError("environment map raw tensor must be (H, W, 3)")
        self.raw = raw

    @property
    def height(self) -> int:
        return self.raw.data.shape[0]

    @property
    def width(self) -> int:
        return self.raw.data.shape[1]

    @classmethod
    def gray(cls, height: int, width: int, value: float = 0.5,
             rng: np.random.Generator | None = None) -> "EnvironmentMap":
        base = inverse_softplus(value)
        raw = np.full((height, width, 3), base, dtype=np.float32)
        if rng is not None:
            raw += (0.01 * rng.standard_normal(raw.shape)).astype(np.float32)
        return cls(Tensor(raw, requires_grad=True))

    @classmethod
    def from_radiance(cls, radiance: np.ndarray) -> "EnvironmentMap":
        raw = inverse_softplus(np.maximum(radiance, 1e-6)).astype(np.float32)
        return cls(Tensor(raw, requires_grad=True))

    def radiance(self) -> Tensor:
        return ad.softplus(self.raw)

    def radiance_values(self) -> np.ndarray:
        return ad.softplus(self.raw.detach()).data

    def clone(self) -> "EnvironmentMap":
        t = Tensor(self.raw.data.copy(), requires_grad=self.raw.requires_grad,
                   dtype=self.raw.data.dtype)
        return EnvironmentMap(t)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.clip(y, 1e-12, None))))


def direction_to_uv(dirs: np.ndarray):
    """Equirectangular mapping: u from longitude, v from latitude."""
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    u = 0.5 + np.arctan2(dx, -dz) / (2.0 * np.pi)
    v = np.arccos(np.clip(dy, -1.0, 1.0)) / np.pi
    return u, v


def env_sample(radiance, dirs) -> Tensor:
    """Bilinear environment lookup; (N, 3).

    Fused primitive differentiable w.r.t. both the radiance image and the
    query directions (needed because sampled directions depend on learned
    normals and roughness).  Horizontal wraparound, vertical clamp.
    """
    rad = _val(radiance)
    d = _val(dirs)
    h, w = rad.shape[0], rad.shape[1]
    dtype = np.result_type(rad.dtype, d.dtype)

    u, v = direction_to_uv(d)
    px = u * w - 0.5
    x0f = np.floor(px)
    fx = (px - x0f).astype(dtype)
    x0 = (x0f.astype(np.int64)) % w
    x1 = (x0 + 1) % w

    py = v * h - 0.5
    py_c = np.clip(py, 0.0, h - 1.0)
    y0 = np.floor(py_c).astype(np.int64)
    y0 = np.minimum(y0, h - 2) if h > 1 else y0 * 0
    fy = (py_c - y0).astype(dtype)
    y1 = np.minimum(y0 + 1, h - 1)

    flat = rad.reshape(h * w, 3)
    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1
    c00, c01 = flat[i00], flat[i01]
    c10, c11 = flat[i10], flat[i11]
    wfx = fx[..., None]
    wfy = fy[..., None]
    out = ((1 - wfy) * ((1 - wfx) * c00 + wfx * c01)
           + wfy * ((1 - wfx) * c10 + wfx * c11)).astype(dtype)

    def rad_vjp(g):
        acc = np.zeros(h * w * 3)
        chan = np.arange(3, dtype=np.int64)
        for idx, wgt in ((i00, (1 - fx) * (1 - fy)), (i01, fx * (1 - fy)),
                         (i10, (1 - fx) * fy), (i11, fx * fy)):
            flat_idx = (idx[:, None] * 3 + chan).ravel()
            acc += np.bincount(flat_idx, weights=(g * wgt[:, None]).ravel(),
                               minlength=h * w * 3)
        return acc.reshape(h, w, 3).astype(g.dtype)

    def dir_vjp(g):
        # chain rule through the bilinear weights and the angular mapping
        gfx = ((c01 - c00) * (1 - wfy) + (c11 - c10) * wfy)
        gfy = ((c10 - c00) * (1 - wfx) + (c11 - c01) * wfx)
        a = (g * gfx).sum(axis=-1)          # dL/dfx
        b = (g * gfy).sum(axis=-1)          # dL/dfy
        # fx follows px everywhere (wraparound keeps slope 1)
        du = a * w
        # fy is flat where the pole clamp is active
        interior = ((py > 0.0) & (py < h - 1.0)).astype(a.dtype)
        dv = b * h * interior
        dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
        r2 = np.maximum(dx * dx + dz * dz, 1e-12)
        # azimuth is meaningless at the poles; kill its gradient there
        du = du * (dx * dx + dz * dz > 1e-10)
        dphi_ddx = -dz / r2
        dphi_ddz = dx / r2
        du_scale = 1.0 / (2.0 * np.pi)
        sin_t = np.sqrt(np.maximum(1.0 - dy * dy, 1e-12))
        pole = (np.abs(dy) < 1.0 - 1e-7).astype(a.dtype)
        dv_ddy = -(1.0 / np.pi) / sin_t * pole
        grad = np.empty_like(d)
        grad[..., 0] = du * du_scale * dphi_ddx
        grad[..., 1] = dv * dv_ddy
        grad[..., 2] = du * du_scale * dphi_ddz
        return grad.astype(g.dtype)

    return make_node(out, [(radiance, rad_vjp), (dirs, dir_vjp)])


def env_lookup(env: EnvironmentMap, dirs) -> Tensor:
    """Radiance arriving from each direction (unit vectors)."""
    return env_sample(env.radiance(), dirs)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def cosine_local_dirs(u: np.ndarray) -> np.ndarray:
    """Cosine-weighted hemisphere directions from uniforms (..., 2)."""
    r = np.sqrt(u[..., 0])
    phi = 2.0 * np.pi * u[..., 1]
    x = r * np.cos(phi)
    y = r * np.sin(phi)
    z = np.sqrt(np.maximum(1.0 - u[..., 0], 0.0))
    return np.stack([x, y, z], axis=-1)


def ggx_half_cosine(u1, alpha) -> Tensor:
    """cos(theta_h) for half vectors drawn from D(h) (n.h); smooth in alpha."""
    a = ad.clamp(alpha, ALPHA_MIN, 1.0)
    a2 = ad.mul(a, a)
    denom = ad.add(1.0, ad.mul(ad.sub(a2, 1.0), u1))
    c2 = ad.div(ad.sub(1.0, u1), ad.clamp(denom, 1e-12, None))
    return ad.power(ad.clamp(c2, 0.0, 1.0) + 1e-20, 0.5)


def stratify_square(jitter: np.ndarray) -> np.ndarray:
    """Spread (..., samples, 2) uniforms over a jittered stratification grid.

    The sample axis is split into the most-square factor pair so low sample
    counts (16, 8, 4) still stratify both dimensions.
    """
    samples = jitter.shape[-2]
    grid_w = int(np.floor(np.sqrt(samples)))
    while samples % grid_w != 0:
        grid_w -= 1
    grid_h = samples // grid_w
    cells = np.stack(np.meshgrid(np.arange(grid_h), np.arange(grid_w),
                                 indexing="ij"), axis=-1).reshape(-1, 2)
    out = np.empty_like(jitter)
    out[..., 0] = (cells[:, 0] + jitter[..., 0]) / grid_h
    out[..., 1] = (cells[:, 1] + jitter[..., 1]) / grid_w
    return out


def stratified_uniforms(rng: np.random.Generator, count: int,
                        samples: int) -> np.ndarray:
    """(count, samples, 2) jittered-stratified uniforms on the unit square."""
    return stratify_square(rng.random((count, samples, 2)))


def sample_specular(n: np.ndarray, wo: np.ndarray, alpha: float,
                    rng: np.random.Generator):
    """Draw one incoming direction per row via NDF importance sampling.

    Returns (wi, pdf, valid): half vectors follow D(h)(n.h); wi is the
    mirror of wo about h; rows whose wi falls below the horizon are marked
    invalid and should be treated as zero-weight samples.
    """
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    wo = np.atleast_2d(np.asarray(wo, dtype=np.float64))
    count = n.shape[0]
    u = rng.random((count, 2))
    alpha_arr = np.broadcast_to(np.asarray(alpha, dtype=np.float64),
                                (count,)).reshape(count, 1)
    cos_h = ggx_half_cosine(u[:, :1], alpha_arr).data
    sin_h = np.sqrt(np.maximum(1.0 - cos_h ** 2, 0.0))
    phi = 2.0 * np.pi * u[:, 1:2]
    local = np.concatenate([sin_h * np.cos(phi), sin_h * np.sin(phi), cos_h],
                           axis=1)
    t, b = orthonormal_frame(n)
    hvec = (local[:, 0:1] * t.data + local[:, 1:2] * b.data
            + local[:, 2:3] * n)
    wi = 2.0 * (wo * hvec).sum(axis=1, keepdims=True) * hvec - wo
    cos_nh = np.clip((n * hvec).sum(axis=1), 0.0, 1.0)
    cos_ho = np.clip((hvec * wo).sum(axis=1), 1e-8, 1.0)
    d = ndf(np.full(count, alpha, dtype=np.float64), cos_nh).data
    pdf = d * cos_nh / (4.0 * cos_ho)
    valid = (wi * n).sum(axis=1) > 0.0
    return wi, pdf, valid
