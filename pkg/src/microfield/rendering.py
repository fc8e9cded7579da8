"""Volume rendering of ray batches through the microfacet field.

Rays are sampled with stratified jitter between their bounding-box entry
and exit points; transmittance weights follow the usual alpha compositing
(the weights plus the final transmittance sum to one by construction).
Shading is evaluated at samples whose weight exceeds a prune threshold:
outgoing radiance is a cosine-weighted Monte Carlo estimate of the diffuse
term plus an NDF-importance-sampled specular estimate, both against the
learned environment map.  Escaped radiance composites the environment map
behind the field.

Sample paths are reparameterized: sampled directions are differentiable
functions of the learned roughness and normals, so the backward pass
matches central finite differences of the whole renderer.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import shading as sh
from .autodiff import Tensor
from .config import Config
from .fields import SceneModel
from .rng import pixel_stream


# ---------------------------------------------------------------------------
# cameras and rays
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera; right-handed, -z forward, +y up camera frame."""

    c2w: np.ndarray
    fov_x: float
    width: int
    height: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise ValueError("camera-to-world matrix must be 4x4")
        if not np.all(np.isfinite(self.c2w)):
            raise ValueError("camera matrix contains non-finite entries")
        r = self.c2w[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-4:
            raise ValueError("camera rotation block is not orthonormal")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / np.tan(0.5 * self.fov_x)


def generate_rays(camera: Camera, pixels: np.ndarray):
    """Rays through pixel centers; pixels are (row, col) integer pairs."""
    pixels = np.asarray(pixels)
    rows, cols = pixels[:, 0], pixels[:, 1]
    if (rows.min() < 0 or cols.min() < 0 or rows.max() >= camera.height
            or cols.max() >= camera.width):
        raise ValueError("pixel indices outside the image bounds")
    f = camera.focal
    x = (cols + 0.5 - 0.5 * camera.width) / f
    y = -(rows + 0.5 - 0.5 * camera.height) / f
    d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    d_world = d_cam @ camera.c2w[:3, :3].T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.c2w[:3, 3], d_world.shape).copy()
    return origins.astype(np.float64), d_world.astype(np.float64)


def camera_ray_grid(camera: Camera):
    """Origins/directions for every pixel, row-major; ((H*W,3), (H*W,3))."""
    rows, cols = np.meshgrid(np.arange(camera.height),
                             np.arange(camera.width), indexing="ij")
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=-1)
    return generate_rays(camera, pixels)


def ray_aabb(origins: np.ndarray, dirs: np.ndarray,
             aabb: tuple[float, float]):
    """Entry/exit distances against the cube [lo, hi]^3.

    Rays that miss get near == far == 0 so downstream code degenerates to a
    pure-background pixel without branching.
    """
    lo, hi = aabb
    safe = np.where(np.abs(dirs) < 1e-9, np.where(dirs >= 0, 1e-9, -1e-9),
                    dirs)
    inv = 1.0 / safe
    ta = (lo - origins) * inv
    tb = (hi - origins) * inv
    tmin = np.minimum(ta, tb).max(axis=-1)
    tmax = np.maximum(ta, tb).min(axis=-1)
    near = np.maximum(tmin, 1e-4)
    hit = tmax > near
    near = np.where(hit, near, 0.0)
    far = np.where(hit, tmax, 0.0)
    return near, far, hit


# ---------------------------------------------------------------------------
# random-draw plumbing
# ---------------------------------------------------------------------------

class BatchDraw:
    """Single-stream draws for training batches."""

    def __init__(self, gen: np.random.Generator):
        self.gen = gen

    def draw(self, counts: np.ndarray, suffix: tuple) -> np.ndarray:
        total = int(np.sum(counts))
        return self.gen.random((total, *suffix))

    def regroup(self, ray_of: np.ndarray) -> "BatchDraw":
        return self


class PerRayDraw:
    """Independent stream per primary ray.

    Each ray draws from its own counter-based stream in a fixed order, so
    image renders are bit-identical regardless of how rays are batched
    across workers.
    """

    def __init__(self, gens: list[np.random.Generator]):
        self.gens = gens

    def draw(self, counts: np.ndarray, suffix: tuple) -> np.ndarray:
        counts = np.broadcast_to(counts, (len(self.gens),))
        parts = [g.random((int(c), *suffix))
                 for g, c in zip(self.gens, counts)]
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, *suffix))

    def regroup(self, ray_of: np.ndarray) -> "_GroupedDraw":
        return _GroupedDraw(self, ray_of)


class _GroupedDraw:
    """Routes draws of sub-entities (shading points, bounce rays) back to
    the primary ray streams.  Sub-entities must be sorted by primary ray,
    which the renderer guarantees by construction."""

    def __init__(self, base, ray_of: np.ndarray):
        self.base = base
        self.ray_of = np.asarray(ray_of)

    def draw(self, counts: np.ndarray, suffix: tuple) -> np.ndarray:
        counts = np.broadcast_to(counts, self.ray_of.shape).astype(np.int64)
        if isinstance(self.base, BatchDraw):
            return self.base.draw(counts, suffix)
        per_primary = np.bincount(self.ray_of, weights=counts,
                                  minlength=len(self.base.gens)).astype(np.int64)
        return self.base.draw(per_primary, suffix)

    def regroup(self, ray_of: np.ndarray) -> "_GroupedDraw":
        return _GroupedDraw(self.base, self.ray_of[ray_of])


# ---------------------------------------------------------------------------
# core rendering
# ---------------------------------------------------------------------------

@dataclass
class RayRender:
    """Graph-valued results for a batch of rays."""

    pixel: Tensor                 # (B, 3) linear radiance
    opacity: Tensor               # (B,)
    t_final: Tensor               # (B,)
    orientation: Tensor | None    # (B,) back-facing penalty, shaded rays
    weights: Tensor               # (B, N)
    aux: dict = field(default_factory=dict)
    sample_counts: np.ndarray | None = None


def _shade(model: SceneModel, pts: np.ndarray, n_hat, valid: np.ndarray,
           wo: np.ndarray, mats: dict, radiance, draw, depth: int,
           cfg: Config):
    """Outgoing radiance per shading point; (S, 3)."""
    s = pts.shape[0]
    kd, ks = cfg.diffuse_samples, cfg.specular_samples
    dtype = n_hat.data.dtype
    vmask = valid.astype(dtype)[:, None]
    # degenerate-gradient samples fall back to facing the viewer
    n_use = ad.add(ad.mul(n_hat, vmask), wo * (1.0 - vmask))

    tang, bitang = sh.orthonormal_frame(n_use)
    t3 = ad.reshape(tang, (s, 1, 3))
    b3 = ad.reshape(bitang, (s, 1, 3))
    n3 = ad.reshape(n_use, (s, 1, 3))
    wo3 = wo[:, None, :]

    albedo = mats["albedo"]
    rough = mats["roughness"]
    f0 = ad.reshape(mats["f0"], (s, 1, 3))

    # diffuse: cosine-weighted estimate of (albedo/pi) (1-Fr) * irradiance
    ones = np.ones(s, dtype=np.int64)
    ud = sh.stratify_square(draw.draw(ones, (kd, 2)).reshape(s, kd, 2))
    local = sh.cosine_local_dirs(ud).astype(dtype)
    wd = ad.add(ad.add(ad.mul(t3, local[..., 0:1]),
                       ad.mul(b3, local[..., 1:2])),
                ad.mul(n3, local[..., 2:3]))
    l_diff = ad.reshape(sh.env_sample(radiance, ad.reshape(wd, (-1, 3))),
                        (s, kd, 3))
    h_diff = sh.normalize(ad.add(wd, wo3))
    fr_diff = sh.fresnel(f0, sh.dot(h_diff, wo3))
    diffuse = ad.mul(albedo,
                     ad.tmean(ad.mul(ad.sub(1.0, fr_diff), l_diff), axis=1))

    # specular: half vectors from the roughness lobe, mirrored outgoing dir
    us = sh.stratify_square(draw.draw(ones, (ks, 2)).reshape(s, ks, 2))
    u1 = us[..., 0].astype(dtype)
    phi = (2.0 * np.pi * us[..., 1]).astype(dtype)
    cos_h = sh.ggx_half_cosine(u1, rough)                     # (S, K)
    sin_h = ad.power(ad.clamp(ad.sub(1.0, ad.mul(cos_h, cos_h)), 0.0, 1.0)
                     + 1e-20, 0.5)
    lx = ad.reshape(ad.mul(sin_h, np.cos(phi)), (s, ks, 1))
    ly = ad.reshape(ad.mul(sin_h, np.sin(phi)), (s, ks, 1))
    lz = ad.reshape(cos_h, (s, ks, 1))
    h_w = ad.add(ad.add(ad.mul(t3, lx), ad.mul(b3, ly)), ad.mul(n3, lz))
    wi = sh.reflect(wo3, h_w)                                  # (S, K, 3)

    cos_nh = sh.dot(n3, h_w)
    cos_ni = sh.dot(n3, wi)
    cos_no = sh.dot(n_use, wo)                                 # (S, 1)
    cos_ho = sh.dot(h_w, wo3)
    above = ((cos_ni.data > 0.0) & (cos_no.data[:, None, :] > 0.0)).astype(dtype)

    alpha3 = ad.reshape(rough, (s, 1, 1))
    d_term = sh.ndf(alpha3, cos_nh)
    g1 = ad.reshape(sh.smith_g1(cos_no, rough), (s, 1, 1))
    dots = ad.concat([cos_ni,
                      ad.broadcast_to(ad.reshape(cos_no, (s, 1, 1)),
                                      (s, ks, 1)),
                      cos_nh], axis=-1)
    g_val = ad.reshape(model.implicit_specular(ad.reshape(dots, (-1, 3))),
                       (s, ks, 1))
    fr_spec = sh.fresnel(f0, cos_ho)
    denom = ad.clamp(ad.mul(ad.mul(ad.broadcast_to(
        ad.reshape(cos_no, (s, 1, 1)), (s, ks, 1)), cos_ni), 4.0),
        1e-6, None)
    f_s = ad.div(ad.mul(ad.mul(d_term, g1), g_val), denom)
    pdf = ad.clamp(ad.div(ad.mul(d_term, cos_nh),
                          ad.clamp(ad.mul(cos_ho, 4.0), 1e-6, None)),
                   1e-8, None)

    if depth <= 1:
        l_spec = ad.reshape(sh.env_sample(radiance, ad.reshape(wi, (-1, 3))),
                            (s, ks, 3))
    else:
        # secondary geometry is detached: positions are not differentiable
        wi_dirs = wi.data.reshape(-1, 3)
        wi_dirs = wi_dirs / np.linalg.norm(wi_dirs, axis=-1, keepdims=True)
        sec_origins = np.repeat(pts, ks, axis=0) + 1e-3 * wi_dirs
        sub_draw = draw.regroup(np.repeat(np.arange(s), ks))
        sub = render_core(model, sec_origins, wi_dirs, sub_draw,
                          cfg, depth - 1, radiance)
        l_spec = ad.reshape(sub.pixel, (s, ks, 3))

    contrib = ad.mul(ad.mul(ad.mul(fr_spec, f_s), ad.mul(cos_ni, above)),
                     ad.div(l_spec, pdf))
    specular = ad.tmean(contrib, axis=1)
    return ad.add(diffuse, specular)


def render_core(model: SceneModel, origins: np.ndarray, dirs: np.ndarray,
                draw, cfg: Config | None = None, depth: int | None = None,
                radiance=None, collect_aux: bool = False) -> RayRender:
    """Render a batch of rays; all learnable dependencies stay on the tape."""
    cfg = cfg or model.config
    depth = cfg.bounce_depth if depth is None else depth
    primary = radiance is None
    n = cfg.n_samples if primary else cfg.secondary_samples
    b = origins.shape[0]
    if radiance is None:
        radiance = model.envmap.radiance()

    dtype = model.density_grid.planes[0].data.dtype
    near, far, hit = ray_aabb(origins, dirs, cfg.aabb)
    delta = ((far - near) / n)[:, None]
    jitter = draw.draw(np.ones(b, dtype=np.int64), (n,)).reshape(b, n)
    t_vals = near[:, None] + (np.arange(n) + jitter) * delta
    pts = (origins[:, None, :]
           + dirs[:, None, :] * t_vals[..., None]).astype(dtype)
    dirs = dirs.astype(dtype)

    raw_all = model.density_raw(pts.reshape(-1, 3))
    sigma = ad.reshape(ad.softplus(raw_all), (b, n))
    sig_delta = ad.mul(sigma, delta.astype(dtype))
    trans = ad.exp(ad.neg(ad.exclusive_cumsum(sig_delta, axis=1)))
    alpha = ad.sub(1.0, ad.exp(ad.neg(sig_delta)))
    weights = ad.mul(trans, alpha)
    t_final = ad.exp(ad.neg(ad.tsum(sig_delta, axis=1)))
    opacity = ad.tsum(weights, axis=1)

    mask = weights.data > cfg.prune_threshold
    limit = cfg.max_shade_per_ray
    if limit and mask.sum(axis=1).max(initial=0) > limit:
        # keep only the heaviest samples per ray; dropped samples still
        # occlude (their weight stays in the compositing) but emit nothing
        order = np.argsort(-weights.data, axis=1, kind="stable")[:, :limit]
        capped = np.zeros_like(mask)
        np.put_along_axis(capped, order, True, axis=1)
        mask &= capped
    sel = np.nonzero(mask.reshape(-1))[0]
    counts = mask.sum(axis=1).astype(np.int64)
    orientation = None
    aux: dict = {}

    bg = ad.mul(sh.env_sample(radiance, dirs),
                ad.reshape(t_final, (b, 1)))

    if sel.size:
        ray_of = sel // n
        pts_s = pts.reshape(-1, 3)[sel]
        w_s = ad.take(ad.reshape(weights, (-1,)), sel)
        n_hat, valid, _ = model.normal(pts_s, raw=ad.take(raw_all, sel))
        mats = model.material(pts_s)
        wo = (-dirs[ray_of]).astype(n_hat.data.dtype)
        sub_draw = draw.regroup(ray_of)
        radiance_s = _shade(model, pts_s, n_hat, valid, wo, mats, radiance,
                            sub_draw, depth, cfg)
        w_col = ad.reshape(w_s, (-1, 1))
        pixel = ad.add(ad.segment_sum(ad.mul(radiance_s, w_col), ray_of, b),
                       bg)
        facing = sh.dot(n_hat, dirs[ray_of].astype(n_hat.data.dtype),
                        keepdims=False)
        pen = ad.power(ad.relu(facing), 2.0)
        orientation = ad.segment_sum(
            ad.mul(ad.mul(w_s, pen), valid.astype(n_hat.data.dtype)),
            ray_of, b)
        if collect_aux:
            wsd = w_s.data[:, None]
            aux["normal"] = _scatter(n_hat.data * wsd, ray_of, b, 3)
            aux["albedo"] = _scatter(mats["albedo"].data * wsd, ray_of, b, 3)
            aux["roughness"] = _scatter(mats["roughness"].data * wsd,
                                        ray_of, b, 1)[:, 0]
            aux["f0"] = _scatter(mats["f0"].data * wsd, ray_of, b, 3)
    else:
        pixel = bg
        if collect_aux:
            aux["normal"] = np.zeros((b, 3))
            aux["albedo"] = np.zeros((b, 3))
            aux["roughness"] = np.zeros(b)
            aux["f0"] = np.zeros((b, 3))

    return RayRender(pixel=pixel, opacity=opacity, t_final=t_final,
                     orientation=orientation, weights=weights, aux=aux,
                     sample_counts=counts)


def _scatter(values: np.ndarray, ids: np.ndarray, b: int, c: int) -> np.ndarray:
    out = np.zeros((b, c))
    np.add.at(out, ids, values.reshape(-1, c))
    return out


# ---------------------------------------------------------------------------
# image rendering
# ---------------------------------------------------------------------------

@dataclass
class RenderOutput:
    """Per-pixel buffers of a full-image render (weighted sums)."""

    rgb: np.ndarray          # (H, W, 3) linear, unclamped
    opacity: np.ndarray      # (H, W)
    normal: np.ndarray       # (H, W, 3)
    albedo: np.ndarray       # (H, W, 3)
    roughness: np.ndarray    # (H, W)
    f0: np.ndarray           # (H, W, 3)
    sample_counts: np.ndarray

    def ldr(self) -> np.ndarray:
        return np.clip(self.rgb, 0.0, 1.0)


class _FrozenParams:
    """Temporarily drop every parameter off the tape (forward-only render)."""

    def __init__(self, model: SceneModel):
        self.model = model
        self.saved: list[tuple] = []

    def __enter__(self):
        for g in self.model.groups:
            for p in g.params:
                self.saved.append((p.tensor, p.tensor.requires_grad))
                p.tensor.requires_grad = False
        return self

    def __exit__(self, *exc):
        for t, flag in self.saved:
            t.requires_grad = flag
        return False


TILE_ROWS = 16


def render_image(model: SceneModel, camera: Camera, seed: int,
                 cfg: Config | None = None,
                 workers: int | None = None) -> RenderOutput:
    """Deterministic full-image render.

    Rays draw from per-pixel streams and are processed in fixed row tiles,
    so the output is bit-identical for any worker count.
    """
    cfg = cfg or model.config
    workers = cfg.workers if workers is None else workers
    h, w = camera.height, camera.width
    origins, dirs = camera_ray_grid(camera)

    rgb = np.zeros((h, w, 3))
    opacity = np.zeros((h, w))
    normal = np.zeros((h, w, 3))
    albedo = np.zeros((h, w, 3))
    roughness = np.zeros((h, w))
    f0 = np.zeros((h, w, 3))
    counts = np.zeros((h, w), dtype=np.int64)

    tiles = [(r0, min(r0 + TILE_ROWS, h)) for r0 in range(0, h, TILE_ROWS)]

    def run_tile(tile):
        r0, r1 = tile
        idx0, idx1 = r0 * w, r1 * w
        gens = [pixel_stream(seed, i) for i in range(idx0, idx1)]
        draw = PerRayDraw(gens)
        res = render_core(model, origins[idx0:idx1], dirs[idx0:idx1], draw,
                          cfg, collect_aux=True)
        rows = r1 - r0
        rgb[r0:r1] = res.pixel.data.reshape(rows, w, 3)
        opacity[r0:r1] = res.opacity.data.reshape(rows, w)
        normal[r0:r1] = res.aux["normal"].reshape(rows, w, 3)
        albedo[r0:r1] = res.aux["albedo"].reshape(rows, w, 3)
        roughness[r0:r1] = res.aux["roughness"].reshape(rows, w)
        f0[r0:r1] = res.aux["f0"].reshape(rows, w, 3)
        counts[r0:r1] = res.sample_counts.reshape(rows, w)

    with _FrozenParams(model):
        if workers <= 1:
            for tile in tiles:
                run_tile(tile)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(run_tile, tiles))

    return RenderOutput(rgb=rgb, opacity=opacity, normal=normal,
                        albedo=albedo, roughness=roughness, f0=f0,
                        sample_counts=counts)
