"""Shared fixtures: tiny model configs and session-scoped oracle artifacts."""

from __future__ import annotations

import numpy as np
import pytest

from microfield.config import Config
from microfield.fields import build_model
from microfield.oracle import OracleParams, generate_dataset
from microfield.rng import stream
from microfield.sceneio import load_transforms


def tiny_config(**overrides) -> Config:
    base = dict(
        density_res=(4, 4, 4), density_rank=1,
        app_res=(3, 3, 3), app_rank=1, app_channels=2,
        hidden_width=8, g_hidden_width=6, pe_freqs=2, g_pe_freqs=2,
        env_height=6, env_width=12,
        n_samples=3, diffuse_samples=4, specular_samples=2,
        prune_threshold=0.0, max_shade_per_ray=0,
        iterations=2, batch_size=8, eval_interval=0,
        finetune_iterations=2, finetune_eval_interval=0,
    )
    base.update(overrides)
    return Config.from_dict({**Config.desk().to_dict(), **base})


@pytest.fixture
def tiny_model():
    """Small model with structured density so shading paths activate."""
    cfg = tiny_config()
    model = build_model(cfg, seed=5)
    gen = stream(11, "density-fixture")
    for t in model.density_grid.tensors():
        t.data = (0.5 * gen.standard_normal(t.data.shape)).astype(np.float32)
    model.density_shift.data = np.asarray(np.float32(0.5))
    return model


@pytest.fixture(scope="session")
def oracle_scene_dir(tmp_path_factory):
    """Small lambertian-sphere dataset shared by harness-level tests."""
    out = tmp_path_factory.mktemp("oracle") / "sphere"
    params = OracleParams(image_size=48, train_views=6, test_views=2,
                          supersample=1, env_height=32, env_width=64)
    generate_dataset(out, params)
    return out, params


@pytest.fixture(scope="session")
def oracle_datasets(oracle_scene_dir):
    path, params = oracle_scene_dir
    return load_transforms(path, "train"), load_transforms(path, "test"), params
