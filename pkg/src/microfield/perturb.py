"""Controlled manipulation of one scene property at a time.

Three operator families, matched to the property type:

* material multiplier  — scales a sigmoid head's output by m and clips it
  back into [0, 1] (under/overestimation of albedo, roughness or f0);
* density noise        — adds i.i.d. Gaussian draws to the raw factor
  tensors of the density grid;
* environment blur     — separable Gaussian smoothing of the radiance
  image, periodic horizontally, clamped at the poles.

``attach`` builds a perturbed copy of a model; every parameter group other
than the target stays bit-identical, which the isolation tests assert.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import autodiff as ad
from .autodiff import Tensor
from .fields import SceneModel, MATERIAL_HEADS
from .rng import stream
from .shading import EnvironmentMap, inverse_softplus

MATERIAL_TARGETS = set(MATERIAL_HEADS)
ALL_TARGETS = MATERIAL_TARGETS | {"density", "envmap"}


@dataclass(frozen=True)
class PerturbationSpec:
    """Which property is manipulated and how.

    kind is implied by the target: materials take ``multiplier``, density
    takes ``sigma_d`` (noise std) plus a seed, envmap takes the blur kernel
    ``(size_i, sigma_i)``.  ``direction`` is a reporting tag only.
    """

    target: str
    multiplier: float | None = None
    sigma_d: float | None = None
    noise_seed: int = 0
    size_i: int | None = None
    sigma_i: float | None = None
    direction: str = "n/a"

    def __post_init__(self):
        if self.target not in ALL_TARGETS:
            raise ValueError(f"unknown perturbation target: {self.target}")
        if self.target in MATERIAL_TARGETS:
            if self.multiplier is None or self.multiplier < 0:
                raise ValueError("material targets need a multiplier m >= 0")
            if self.sigma_d is not None or self.size_i is not None:
                raise ValueError("multiplier specs cannot carry noise/blur")
        elif self.target == "density":
            if self.sigma_d is None or self.sigma_d < 0:
                raise ValueError("density target needs sigma_d >= 0")
            if self.multiplier is not None or self.size_i is not None:
                raise ValueError("density specs only carry gaussian noise")
        else:  # envmap
            if self.size_i is None or self.sigma_i is None:
                raise ValueError("envmap target needs (size_i, sigma_i)")
            if self.size_i < 1 or self.size_i % 2 == 0:
                raise ValueError("blur size must be odd and >= 1")
            if self.sigma_i <= 0:
                raise ValueError("blur sigma must be positive")
            if self.multiplier is not None or self.sigma_d is not None:
                raise ValueError("envmap specs only carry a blur kernel")
        if self.direction not in ("under", "over", "n/a"):
            raise ValueError("direction must be under/over/n/a")

    def label(self) -> str:
        if self.target in MATERIAL_TARGETS:
            return f"{self.target} m={self.multiplier:g}"
        if self.target == "density":
            return f"density N(0,{self.sigma_d:g}^2)"
        return f"envmap G({self.size_i},{self.sigma_i:g})"

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "multiplier": self.multiplier,
            "sigma_d": self.sigma_d,
            "noise_seed": self.noise_seed,
            "size_i": self.size_i,
            "sigma_i": self.sigma_i,
            "direction": self.direction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationSpec":
        return cls(**d)


def apply_multiplier(value, m: float):
    """m * value clipped into [0, 1]; gradients stop in the clipped region."""
    if m < 0:
        raise ValueError("multiplier must be nonnegative")
    if isinstance(value, Tensor):
        return ad.clamp(ad.mul(value, float(m)), 0.0, 1.0)
    return np.clip(np.asarray(value) * m, 0.0, 1.0)


def perturb_density(tensors: list[Tensor], sigma_d: float, seed: int) -> None:
    """Add N(0, sigma_d^2) draws to the raw grid coefficients, in place.

    sigma_d == 0 leaves every buffer bit-identical (no draws happen).
    """
    if sigma_d < 0:
        raise ValueError("sigma_d must be nonnegative")
    if sigma_d == 0.0:
        return
    gen = stream(seed, "density-noise")
    for t in tensors:
        noise = sigma_d * gen.standard_normal(t.data.shape)
        t.data = (t.data + noise).astype(t.data.dtype)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur_envmap(radiance: np.ndarray, size_i: int, sigma_i: float) -> np.ndarray:
    """Separable Gaussian blur; wraps in longitude, clamps at the poles."""
    if size_i % 2 == 0 or size_i < 1:
        raise ValueError("kernel size must be odd and >= 1")
    if size_i == 1:
        return radiance.copy()
    kern = gaussian_kernel(size_i, sigma_i)
    out = np.empty_like(radiance)
    for c in range(radiance.shape[2]):
        tmp = correlate1d(radiance[:, :, c], kern, axis=1, mode="wrap")
        out[:, :, c] = correlate1d(tmp, kern, axis=0, mode="nearest")
    return out


def attach(model: SceneModel, spec: PerturbationSpec) -> SceneModel:
    """Perturbed copy of the model; non-target groups stay bit-identical."""
    if spec.target in model.applied_perturbations:
        raise ValueError(f"target {spec.target} already carries a perturbation")
    out = model.clone()
    if spec.target in MATERIAL_TARGETS:
        out.multipliers[spec.target] = float(spec.multiplier)
    elif spec.target == "density":
        grid_tensors = [p.tensor for p in out.group("density").params
                        if p.name.startswith("grid")]
        perturb_density(grid_tensors, spec.sigma_d, spec.noise_seed)
    else:
        blurred = blur_envmap(out.envmap.radiance_values(),
                              spec.size_i, spec.sigma_i)
        if spec.size_i > 1:
            raw = inverse_softplus(np.maximum(blurred, 1e-6))
            out.envmap.raw.data = raw.astype(out.envmap.raw.data.dtype)
    out.applied_perturbations.append(spec.target)
    return out
