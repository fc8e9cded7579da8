"""Analytic sphere scenes used as independent ground truth.

A non-neural ray tracer renders a sphere of known material under a given
environment map.  Lambertian shading integrates the environment with a
dense texel quadrature; the mirror variant looks the reflected direction
up directly.  Ray-sphere intersection, shading and the equirectangular
lookup are implemented here from scratch so end-to-end tests never share
code with the differentiable renderer they are checking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream
from .sceneio import write_pfm, write_png


@dataclass
class OracleParams:
    kind: str = "lambertian_sphere"       # or "mirror_sphere"
    albedo: tuple[float, float, float] = (0.45, 0.3, 0.15)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 0.8
    camera_distance: float = 3.0
    fov_x: float = 0.8
    image_size: int = 128
    train_views: int = 16
    test_views: int = 4
    env_height: int = 64
    env_width: int = 128
    env_kind: str = "sky"                 # or "constant"
    env_level: float = 0.8                # constant-map level
    supersample: int = 2
    seed: int = 7

    def __post_init__(self):
        if self.kind not in ("lambertian_sphere", "mirror_sphere"):
            raise ValueError(f"unknown oracle kind: {self.kind}")


# ---------------------------------------------------------------------------
# environment maps
# ---------------------------------------------------------------------------

def make_envmap(params: OracleParams) -> np.ndarray:
    """Procedural LDR-range radiance; smooth sky plus a few bright blobs."""
    h, w = params.env_height, params.env_width
    if params.env_kind == "constant":
        return np.full((h, w, 3), params.env_level, dtype=np.float64)
    # gentle dynamic range: near-black regions are slow to fit at desk
    # iteration counts and dominate sRGB-space error disproportionately
    v = (np.arange(h) + 0.5) / h
    u = (np.arange(w) + 0.5) / w
    vv, uu = np.meshgrid(v, u, indexing="ij")
    sky = np.empty((h, w, 3))
    sky[..., 0] = 0.35 + 0.18 * np.cos(np.pi * vv)
    sky[..., 1] = 0.40 + 0.15 * np.cos(np.pi * vv) \
        + 0.08 * np.sin(2 * np.pi * uu)
    sky[..., 2] = 0.45 + 0.20 * np.cos(np.pi * vv) \
        + 0.08 * np.cos(2 * np.pi * uu)
    gen = stream(params.seed, "oracle-env")
    for _ in range(3):
        cu, cv = gen.random(), 0.15 + 0.5 * gen.random()
        du = np.minimum(np.abs(uu - cu), 1.0 - np.abs(uu - cu))
        blob = np.exp(-((du / 0.06) ** 2 + ((vv - cv) / 0.10) ** 2))
        sky += blob[..., None] * gen.uniform(0.3, 0.5, size=3)
    return np.clip(sky, 0.12, 1.0)


def envmap_directions(h: int, w: int):
    """Unit direction and solid angle of every texel center."""
    theta = (np.arange(h) + 0.5) / h * np.pi
    phi = ((np.arange(w) + 0.5) / w - 0.5) * 2.0 * np.pi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(tt) * np.sin(pp), np.cos(tt),
                     -np.sin(tt) * np.cos(pp)], axis=-1)
    omega = np.sin(tt) * (np.pi / h) * (2.0 * np.pi / w)
    return dirs.reshape(-1, 3), omega.reshape(-1)


def lookup_env(env: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Bilinear equirectangular lookup (independent implementation)."""
    h, w = env.shape[:2]
    u = 0.5 + np.arctan2(dirs[:, 0], -dirs[:, 2]) / (2.0 * np.pi)
    v = np.arccos(np.clip(dirs[:, 1], -1.0, 1.0)) / np.pi
    px = u * w - 0.5
    x0 = np.floor(px).astype(int)
    fx = px - x0
    x0 %= w
    x1 = (x0 + 1) % w
    py = np.clip(v * h - 0.5, 0, h - 1)
    y0 = np.minimum(np.floor(py).astype(int), h - 2)
    fy = py - y0
    y1 = y0 + 1
    c = (env[y0, x0] * ((1 - fx) * (1 - fy))[:, None]
         + env[y0, x1] * (fx * (1 - fy))[:, None]
         + env[y1, x0] * ((1 - fx) * fy)[:, None]
         + env[y1, x1] * (fx * fy)[:, None])
    return c


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def intersect_sphere(origins: np.ndarray, dirs: np.ndarray,
                     center, radius: float):
    """Smallest positive hit distance per ray, or inf."""
    oc = origins - np.asarray(center)
    b = (oc * dirs).sum(axis=-1)
    c = (oc * oc).sum(axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-6, t0, np.where(t1 > 1e-6, t1, np.inf))
    t = np.where(hit, t, np.inf)
    return t


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    z = eye - np.asarray(target, dtype=np.float64)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, eye
    return m


def ring_poses(params: OracleParams) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Deterministic camera poses for the two splits.

    Training elevations sweep well below and above the horizon (shuffled
    across azimuths) so the background rays observe most of the
    environment sphere; leaving large unobserved regions makes absolute
    albedo unrecoverable, since invented radiance there trades freely
    against albedo.  Test poses are offset from training poses: novel
    views whose background directions stay inside the observed coverage,
    so held-out error measures reconstruction rather than extrapolation
    into never-seen illumination.
    """
    def eye_at(az, el):
        eye = params.camera_distance * np.array([
            np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        return look_at(eye)

    def angles(i, count):
        az = 2.0 * np.pi * i / count
        el = np.deg2rad(-30.0 + 80.0 * ((i * 7) % count) / max(count - 1, 1))
        return az, el

    train = [eye_at(*angles(i, params.train_views))
             for i in range(params.train_views)]
    test = []
    for i in range(params.test_views):
        j = (i * params.train_views) // max(params.test_views, 1)
        az, el = angles(j, params.train_views)
        test.append(eye_at(az + np.deg2rad(9.0),
                           np.clip(el + np.deg2rad(4.0),
                                   np.deg2rad(-32.0), np.deg2rad(52.0))))
    return train, test


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _pixel_dirs(pose: np.ndarray, fov_x: float, size: int, ss: int):
    """World-space directions for an ss x ss supersampled pixel grid."""
    n = size * ss
    f = 0.5 * n / np.tan(0.5 * fov_x)
    px = np.arange(n) + 0.5
    x = (px - 0.5 * n) / f
    y = -(px - 0.5 * n) / f
    xx, yy = np.meshgrid(x, y, indexing="xy")
    d_cam = np.stack([xx, yy, -np.ones_like(xx)], axis=-1)
    d = d_cam @ pose[:3, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d.reshape(-1, 3)


def render_oracle_view(pose: np.ndarray, params: OracleParams,
                       env: np.ndarray):
    """One analytic view: (rgb, alpha, normal) at params.image_size.

    The returned normal holds the center-subsample hit normal (zero where
    the center ray misses); alpha is the supersampled coverage.
    """
    size, ss = params.image_size, params.supersample
    dirs = _pixel_dirs(pose, params.fov_x, size, ss)
    origins = np.broadcast_to(pose[:3, 3], dirs.shape)
    t = intersect_sphere(origins, dirs, params.center, params.radius)
    hit = np.isfinite(t)

    rgb = lookup_env(env, dirs)
    if params.kind == "lambertian_sphere":
        shaded = _lambertian(origins[hit], dirs[hit], t[hit], params, env)
    else:
        shaded = _mirror(origins[hit], dirs[hit], t[hit], params, env)
    rgb[hit] = shaded

    n = size * ss
    rgb = rgb.reshape(n, n, 3).reshape(size, ss, size, ss, 3).mean(axis=(1, 3))
    alpha = hit.reshape(n, n).reshape(size, ss, size, ss).mean(axis=(1, 3))

    # center-subsample geometry for the normal ground truth
    half = ss // 2
    centers = (np.arange(size) * ss + half)
    ci = (centers[:, None] * n + centers[None, :]).reshape(-1)
    normal = np.zeros((size * size, 3))
    t_c = t[ci]
    hit_c = np.isfinite(t_c)
    p_c = origins[ci][hit_c] + dirs[ci][hit_c] * t_c[hit_c][:, None]
    normal[hit_c] = (p_c - np.asarray(params.center)) / params.radius
    return rgb, alpha, normal.reshape(size, size, 3)


def irradiance_quadrature(normals: np.ndarray, env: np.ndarray) -> np.ndarray:
    """Cosine-weighted irradiance per normal by dense texel quadrature."""
    tex_dirs, omega = envmap_directions(env.shape[0], env.shape[1])
    radiance = env.reshape(-1, 3)
    out = np.empty((normals.shape[0], 3))
    chunk = 4096
    for lo in range(0, normals.shape[0], chunk):
        sl = slice(lo, lo + chunk)
        cosines = np.maximum(normals[sl] @ tex_dirs.T, 0.0)  # (n, T)
        out[sl] = (cosines * omega) @ radiance               # (n, 3)
    return out


class _IrradianceMap:
    """Quadrature irradiance precomputed on a grid of normal directions.

    Irradiance is the cosine convolution of the environment, so it is very
    smooth in the normal; a modest grid plus bilinear interpolation keeps
    the oracle quadrature-accurate at a fraction of the cost.
    """

    _cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __init__(self, env: np.ndarray, height: int = 64):
        key = id(env)
        cached = self._cache.get(key)
        if cached is None or cached[0] is not env:
            dirs, _ = envmap_directions(height, 2 * height)
            table = irradiance_quadrature(dirs, env)
            table = table.reshape(height, 2 * height, 3)
            self._cache.clear()
            self._cache[key] = (env, table)
            cached = self._cache[key]
        self.table = cached[1]

    def __call__(self, normals: np.ndarray) -> np.ndarray:
        return lookup_env(self.table, normals)


def _lambertian(origins, dirs, t, params: OracleParams, env) -> np.ndarray:
    pts = origins + dirs * t[:, None]
    normals = (pts - np.asarray(params.center)) / params.radius
    irr = _IrradianceMap(env)(normals)
    return np.asarray(params.albedo) * irr / np.pi


def _mirror(origins, dirs, t, params: OracleParams, env) -> np.ndarray:
    pts = origins + dirs * t[:, None]
    normals = (pts - np.asarray(params.center)) / params.radius
    refl = dirs - 2.0 * (dirs * normals).sum(axis=-1, keepdims=True) * normals
    refl /= np.linalg.norm(refl, axis=-1, keepdims=True)
    return lookup_env(env, refl)


# ---------------------------------------------------------------------------
# dataset emission
# ---------------------------------------------------------------------------

def generate_dataset(out_dir: str | Path, params: OracleParams,
                     env: np.ndarray | None = None) -> Path:
    """Write a synthetic scene directory in the transforms.json layout."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    env = make_envmap(params) if env is None else env
    write_pfm(out_dir / "env_gt.pfm", env)
    (out_dir / "oracle_params.json").write_text(json.dumps({
        "kind": params.kind, "albedo": list(params.albedo),
        "center": list(params.center), "radius": params.radius,
        "env_kind": params.env_kind, "env_level": params.env_level,
    }, indent=2))

    train_poses, test_poses = ring_poses(params)
    for split, poses in (("train", train_poses), ("test", test_poses)):
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        frames = []
        for i, pose in enumerate(poses):
            rgb, alpha, normal = render_oracle_view(pose, params, env)
            write_png(split_dir / f"r_{i}.png", rgb, alpha)
            write_pfm(split_dir / f"r_{i}_normal.pfm", normal)
            frames.append({
                "file_path": f"{split}/r_{i}",
                "transform_matrix": pose.tolist(),
            })
        meta = {"camera_angle_x": params.fov_x, "frames": frames}
        (out_dir / f"transforms_{split}.json").write_text(
            json.dumps(meta, indent=2))
    return out_dir
