"""The manipulate/freeze/fine-tune experiment matrix and the
consistency-across-illuminations study.

A matrix run takes one trained baseline and, for each manipulation row,
first evaluates the perturbed model as-is (the no-fine-tune column), then
fine-tunes each property group in turn.  Cell seeds derive from the cell
identity, never from execution order, so permuting the schedule produces
byte-identical reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .fields import SceneModel
from .metrics import MetricBundle
from .perturb import PerturbationSpec, attach
from .rendering import render_image
from .sceneio import SceneDataset, write_json, write_matrix_csv, write_png, \
    write_png_raw
from .training import evaluate, eval_seed, finetune, train

FINETUNE_GROUPS = ("albedo", "roughness", "f0", "density", "envmap")
NO_FINETUNE = "none"


def shipped_noise_table(scene: str = "ball") -> list[PerturbationSpec]:
    """Default manipulation rows with the published per-scene parameters."""
    tables = {
        "ball": dict(albedo=(0.0, 1000.0), roughness=(0.1, 2.0),
                     f0=(0.8, 1.2), sigma_d=1.05, blur=(301, 300.0)),
        "car": dict(albedo=(0.4, 4.0), roughness=(0.0, 10.0),
                    f0=(0.6, 1.5), sigma_d=1.5, blur=(151, 100.0)),
        "helmet": dict(albedo=(0.6, 100.0), roughness=(0.0, 15.0),
                       f0=(0.6, 1.5), sigma_d=3.0, blur=(151, 100.0)),
    }
    t = tables.get(scene, tables["ball"])
    specs = []
    for head in ("albedo", "roughness", "f0"):
        specs.append(PerturbationSpec(target=head, multiplier=t[head][0],
                                      direction="under"))
        specs.append(PerturbationSpec(target=head, multiplier=t[head][1],
                                      direction="over"))
    specs.append(PerturbationSpec(target="density", sigma_d=t["sigma_d"]))
    specs.append(PerturbationSpec(target="envmap", size_i=t["blur"][0],
                                  sigma_i=t["blur"][1]))
    return specs


@dataclass
class ExperimentMatrix:
    """Grid of MetricBundles: manipulation rows x fine-tune columns."""

    scene: str
    baseline: MetricBundle
    specs: list[PerturbationSpec]
    cells: dict[tuple[str, str, str], MetricBundle] = field(
        default_factory=dict)

    def key(self, spec: PerturbationSpec, group: str):
        return (spec.target, spec.direction, group)

    def rows(self) -> list[dict]:
        out = [{
            "scene": self.scene, "manipulated": "none", "direction": "n/a",
            "finetuned": NO_FINETUNE, **self.baseline.as_dict(),
        }]
        for spec in self.specs:
            for group in (NO_FINETUNE,) + FINETUNE_GROUPS:
                bundle = self.cells.get(self.key(spec, group))
                if bundle is None:
                    continue
                out.append({
                    "scene": self.scene, "manipulated": spec.target,
                    "direction": spec.direction, "finetuned": group,
                    **bundle.as_dict(),
                })
        for row in out:
            row.pop("pixel_count", None)
            row.pop("mask_count", None)
        return out


def _cell_tag(scene: str, spec: PerturbationSpec, group: str) -> str:
    return f"{scene}:{spec.target}:{spec.direction}:{group}"


def run_matrix(baseline: SceneModel, specs: list[PerturbationSpec],
               train_ds: SceneDataset, test_ds: SceneDataset, cfg: Config,
               out_dir: str | Path | None = None, scene: str = "scene",
               groups: tuple[str, ...] = FINETUNE_GROUPS,
               cell_order: list[tuple[int, str]] | None = None,
               iterations: int | None = None,
               emit_renders: bool = True) -> ExperimentMatrix:
    """Evaluate the full manipulation x fine-tune grid from one baseline.

    ``cell_order`` optionally permutes execution; reports are sorted by
    cell identity and all randomness is keyed by cell identity, so the
    output is order-invariant.
    """
    matrix = ExperimentMatrix(scene=scene, baseline=evaluate(
        baseline, test_ds, cfg), specs=specs)

    schedule = cell_order if cell_order is not None else [
        (i, g) for i in range(len(specs))
        for g in (NO_FINETUNE,) + tuple(groups)
    ]
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for spec_idx, group in schedule:
        spec = specs[spec_idx]
        if group == NO_FINETUNE:
            perturbed = attach(baseline, spec)
            bundle = evaluate(perturbed, test_ds, cfg)
            matrix.cells[matrix.key(spec, group)] = bundle
            model_for_render = perturbed
        else:
            res = finetune(baseline, spec, group, train_ds, test_ds, cfg,
                           iterations=iterations,
                           cell_tag=_cell_tag(scene, spec, group))
            matrix.cells[matrix.key(spec, group)] = res.final_bundle
            model_for_render = res.model
        if out_dir is not None and emit_renders and len(test_ds):
            img = render_image(model_for_render, test_ds.cameras[0],
                               eval_seed(cfg.seed, 0), cfg)
            name = f"{scene}_{spec.target}_{spec.direction}_{group}.png"
            write_png(out_dir / name, img.ldr())

    if out_dir is not None:
        write_matrix_csv(out_dir / f"{scene}_matrix.csv", matrix.rows())
        write_json(out_dir / f"{scene}_matrix.json", {
            "scene": scene,
            "baseline": matrix.baseline.as_dict(),
            "specs": [s.to_dict() for s in specs],
            "cells": [{
                "manipulated": k[0], "direction": k[1], "finetuned": k[2],
                **b.as_dict()} for k, b in sorted(matrix.cells.items())],
        })
        if emit_renders and len(test_ds):
            _emit_baseline_row(baseline, test_ds, cfg, out_dir, scene)
    return matrix


def _emit_baseline_row(model: SceneModel, test_ds: SceneDataset, cfg: Config,
                       out_dir: Path, scene: str) -> None:
    img = render_image(model, test_ds.cameras[0], eval_seed(cfg.seed, 0), cfg)
    write_png(out_dir / f"{scene}_baseline_color.png", img.ldr())
    op = np.maximum(img.opacity, 1e-6)[..., None]
    write_png(out_dir / f"{scene}_baseline_albedo.png",
              np.clip(img.albedo / op, 0, 1))
    write_png(out_dir / f"{scene}_baseline_f0.png", np.clip(img.f0 / op, 0, 1))
    write_png_raw(out_dir / f"{scene}_baseline_roughness.png",
                  np.clip(img.roughness / op[..., 0], 0, 1))
    write_png(out_dir / f"{scene}_baseline_normal.png",
              0.5 * (img.normal / op + 1.0))
    write_png(out_dir / f"{scene}_baseline_envmap.png",
              np.clip(model.envmap.radiance_values(), 0, 1))


def summarize_across_scenes(matrices: list[ExperimentMatrix]) -> dict:
    """Cross-scene means, both unweighted per scene and pixel-weighted."""
    keys = set()
    for m in matrices:
        keys.update(m.cells.keys())
    summary = {}
    for key in sorted(keys):
        vals, weights = [], []
        for m in matrices:
            b = m.cells.get(key)
            if b is not None:
                vals.append(b.psnr)
                weights.append(max(b.pixel_count, 1))
        if vals:
            summary["/".join(key)] = {
                "psnr_mean_by_scene": float(np.mean(vals)),
                "psnr_mean_by_pixels": float(np.average(vals,
                                                        weights=weights)),
                "scenes": len(vals),
            }
    return summary


# ---------------------------------------------------------------------------
# consistency across illuminations
# ---------------------------------------------------------------------------

def consistency_experiment(train_sets: list[SceneDataset],
                           test_sets: list[SceneDataset], cfg: Config,
                           out_dir: str | Path | None = None,
                           seeds: list[int] | None = None) -> dict:
    """Train one model per illumination, compare the property buffers.

    All datasets must share their pose sets exactly.  Returns per-pixel
    standard-deviation maps across illuminations plus scalar means per
    property; images go to ``out_dir`` when given.
    """
    if len(train_sets) < 2:
        raise ValueError("need at least two illuminations")
    ref_poses = [c.c2w for c in train_sets[0].cameras]
    for ds in train_sets[1:]:
        poses = [c.c2w for c in ds.cameras]
        if len(poses) != len(ref_poses) or any(
                not np.allclose(a, b, atol=1e-9)
                for a, b in zip(ref_poses, poses)):
            raise ValueError("illumination datasets disagree on poses")

    seeds = seeds or [cfg.seed] * len(train_sets)
    buffers = {"albedo": [], "roughness": [], "f0": [], "normal": []}
    render_cams = test_sets[0].cameras
    for run, (train_ds, seed) in enumerate(zip(train_sets, seeds)):
        run_cfg = Config.from_dict({**cfg.to_dict(), "seed": seed})
        result = train(train_ds, run_cfg, run_tag="train")
        per_prop = {k: [] for k in buffers}
        for f, cam in enumerate(render_cams):
            img = render_image(result.model, cam, eval_seed(seed, f), run_cfg)
            op = np.maximum(img.opacity, 1e-6)
            per_prop["albedo"].append(img.albedo / op[..., None])
            per_prop["roughness"].append(img.roughness / op)
            per_prop["f0"].append(img.f0 / op[..., None])
            per_prop["normal"].append(img.normal / op[..., None])
        for k in buffers:
            buffers[k].append(np.stack(per_prop[k]))

    report = {"runs": len(train_sets), "frames": len(render_cams)}
    std_maps = {}
    for k, stacks in buffers.items():
        arr = np.stack(stacks)              # (K, F, H, W, [C])
        std = arr.std(axis=0)
        std_maps[k] = std
        report[f"{k}_mean"] = [float(m) for m in
                               np.mean(arr, axis=(0, 1, 2, 3)).reshape(-1)]
        report[f"{k}_std_mean"] = float(std.mean())

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "consistency.json", report)
        for k, std in std_maps.items():
            img = std[0]
            if img.ndim == 3:
                img = img.mean(axis=-1)
            scale = img.max() if img.max() > 0 else 1.0
            write_png_raw(out_dir / f"std_{k}.png", img / scale)
    return {"report": report, "std_maps": std_maps}
