"""Run configuration: model dimensions, render settings, training schedule.

One flat dataclass covers everything so a config can be hashed, stored
verbatim in checkpoints, and mirrored by the JSON config file accepted by
the CLI.  ``desk()`` is the small-everything preset used by tests and quick
experiments; ``full()`` matches the published experiment scale.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields


@dataclass
class Config:
    # model
    density_res: tuple[int, int, int] = (48, 48, 48)
    density_rank: int = 8
    app_res: tuple[int, int, int] = (32, 32, 32)
    app_rank: int = 4
    app_channels: int = 8
    hidden_width: int = 64
    g_hidden_width: int = 32
    pe_freqs: int = 6
    pe_include_input: bool = True
    g_pe_freqs: int = 4
    env_height: int = 64
    env_width: int = 128
    density_shift_init: float = -10.0
    f0_bias: float = -3.0
    aabb: tuple[float, float] = (-1.5, 1.5)
    alpha_min: float = 1e-3

    # rendering
    n_samples: int = 128
    diffuse_samples: int = 16
    specular_samples: int = 4
    bounce_depth: int = 1
    secondary_samples: int = 32
    prune_threshold: float = 1e-4
    max_shade_per_ray: int = 8
    normal_eps: float = 1e-8

    # training
    iterations: int = 2000
    batch_size: int = 512
    lr_grid: float = 0.02
    lr_mlp: float = 1e-3
    # texel updates are sparse; at desk-scale iteration counts the radiance
    # image needs grid-rate steps to converge (full scale keeps 1e-3)
    lr_envmap: float = 0.02
    w_photometric: float = 1.0
    w_orientation: float = 0.01
    w_opacity_entropy: float = 0.001
    seed: int = 0
    eval_interval: int = 500
    finetune_iterations: int = 500
    finetune_eval_interval: int = 100

    # execution
    workers: int = 1

    @classmethod
    def desk(cls, **overrides) -> "Config":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "Config":
        base = dict(
            density_res=(128, 128, 128),
            app_res=(96, 96, 96),
            env_height=256,
            env_width=512,
            diffuse_samples=64,
            specular_samples=16,
            max_shade_per_ray=16,
            iterations=30000,
            batch_size=4096,
            lr_envmap=1e-3,
            eval_interval=2000,
            finetune_iterations=5000,
            finetune_eval_interval=500,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("density_res", "app_res", "aabb"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("density_res", "app_res", "aabb"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def validate(self) -> None:
        positive = [
            "density_rank", "app_rank", "app_channels", "hidden_width",
            "g_hidden_width", "env_height", "env_width", "n_samples",
            "diffuse_samples", "specular_samples", "bounce_depth",
            "secondary_samples", "batch_size", "lr_grid",
            "lr_mlp", "w_photometric", "workers",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        if self.iterations < 0 or self.finetune_iterations < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.aabb[0] >= self.aabb[1]:
            raise ValueError("aabb must satisfy lo < hi")
