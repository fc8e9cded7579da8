"""Optimization loops: full training, evaluation and single-group fine-tuning.

Training minimizes a photometric MSE in linear RGB (prediction clamped to
[0, 1]) plus two small regularizers: a back-facing-normal penalty and an
opacity entropy term that discourages semi-transparent surfaces.
Fine-tuning freezes every parameter group except one, optimizes the
photometric term only, and keeps the best-evaluating snapshot (the
starting state counts, so fine-tuning can never report a worse number
than the perturbed model it started from).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import shading as sh
from .autodiff import Tensor
from .config import Config
from .fields import SceneModel, build_model
from .metrics import MetricBundle, epsnr, mae_normals, psnr, ssim
from .optim import AdamState, adam_step
from .perturb import PerturbationSpec, attach
from .rendering import BatchDraw, RayRender, camera_ray_grid, render_core, \
    render_image
from .rng import stream
from .sceneio import SceneDataset, linear_to_srgb


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def orientation_loss(weights, normals, ray_dirs) -> Tensor:
    """Mean over rays of sum_j w_j max(0, n_j . d)^2.

    weights: (B, J), normals: (B, J, 3), ray_dirs: (B, 3).
    """
    d = ray_dirs[:, None, :] if not isinstance(ray_dirs, Tensor) \
        else ad.reshape(ray_dirs, (ray_dirs.shape[0], 1, 3))
    facing = ad.tsum(ad.mul(normals, d), axis=-1)
    pen = ad.power(ad.relu(facing), 2.0)
    return ad.tmean(ad.tsum(ad.mul(weights, pen), axis=1))


def opacity_entropy(opacity) -> Tensor:
    """Mean binary entropy of per-ray opacity."""
    o = ad.clamp(opacity, 1e-6, 1.0 - 1e-6)
    return ad.tmean(ad.neg(ad.add(ad.mul(o, ad.log(o)),
                                  ad.mul(ad.sub(1.0, o),
                                         ad.log(ad.sub(1.0, o))))))


def batch_loss(res: RayRender, gt: np.ndarray, cfg: Config,
               photometric_only: bool = False):
    """Weighted training loss for one rendered ray batch."""
    pred = ad.clamp(res.pixel, 0.0, 1.0)
    diff = ad.sub(pred, gt.astype(res.pixel.data.dtype))
    mse = ad.tmean(ad.mul(diff, diff))
    parts = {"mse": float(mse.data)}
    loss = ad.mul(mse, cfg.w_photometric)
    if not photometric_only:
        if res.orientation is not None:
            ori = ad.tmean(res.orientation)
            loss = ad.add(loss, ad.mul(ori, cfg.w_orientation))
            parts["orientation"] = float(ori.data)
        else:
            parts["orientation"] = 0.0
        ent = opacity_entropy(res.opacity)
        loss = ad.add(loss, ad.mul(ent, cfg.w_opacity_entropy))
        parts["opacity_entropy"] = float(ent.data)
    parts["total"] = float(loss.data)
    return loss, parts


# ---------------------------------------------------------------------------
# ray store
# ---------------------------------------------------------------------------

@dataclass
class RayStore:
    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: SceneDataset) -> "RayStore":
        origins, dirs, colors = [], [], []
        for i, cam in enumerate(dataset.cameras):
            o, d = camera_ray_grid(cam)
            origins.append(o)
            dirs.append(d)
            colors.append(dataset.images[i].reshape(-1, 3))
        return cls(np.concatenate(origins), np.concatenate(dirs),
                   np.concatenate(colors).astype(np.float32))

    def __len__(self) -> int:
        return self.origins.shape[0]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def eval_seed(cfg_seed: int, frame: int) -> int:
    return int(stream(cfg_seed, "eval", frame).integers(1 << 62))


def evaluate(model: SceneModel, dataset: SceneDataset,
             cfg: Config | None = None, seed: int | None = None,
             keep_renders: bool = False):
    """MetricBundle over every frame of a dataset split.

    PSNR/SSIM compare sRGB-encoded LDR images against the 8-bit ground
    truth.  Normal MAE uses pixels with ground-truth alpha >= 0.5 and a
    defined prediction; EPSNR compares the learned environment map against
    the dataset's, when present.
    """
    cfg = cfg or model.config
    seed = cfg.seed if seed is None else seed
    psnrs, ssims = [], []
    mae_sum, mae_count = 0.0, 0
    renders = []
    for f, cam in enumerate(dataset.cameras):
        out = render_image(model, cam, eval_seed(seed, f), cfg)
        if keep_renders:
            renders.append(out)
        pred = linear_to_srgb(out.ldr())
        gt = linear_to_srgb(dataset.images[f])
        psnrs.append(psnr(pred, gt))
        ssims.append(ssim(pred, gt))
        if dataset.gt_normals is not None:
            norm = np.linalg.norm(out.normal, axis=-1)
            defined = norm > 1e-6
            mask = (dataset.alphas[f] >= 0.5) & defined
            if mask.any():
                pred_n = out.normal / np.maximum(norm, 1e-12)[..., None]
                value, count = mae_normals(pred_n, dataset.gt_normals[f], mask)
                mae_sum += value * count
                mae_count += count
    e = None
    if dataset.gt_envmap is not None:
        e = epsnr(model.envmap.radiance_values(), dataset.gt_envmap)
    bundle = MetricBundle(
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        mae=(mae_sum / mae_count) if mae_count else None,
        epsnr=e,
        pixel_count=int(dataset.images[0].size // 3 * len(dataset)),
        mask_count=mae_count,
    )
    return (bundle, renders) if keep_renders else bundle


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SceneModel
    history: list[dict] = field(default_factory=list)
    eval_history: list[tuple[int, float]] = field(default_factory=list)


def train(dataset: SceneDataset, cfg: Config,
          eval_dataset: SceneDataset | None = None,
          model: SceneModel | None = None,
          run_tag: str = "train") -> TrainResult:
    """Optimize a model on a dataset; deterministic for a fixed config seed."""
    cfg.validate()
    model = build_model(cfg) if model is None else model
    rays = RayStore.from_dataset(dataset)
    batch_gen = stream(cfg.seed, run_tag, "batches")
    state = AdamState()
    result = TrainResult(model=model)

    for it in range(cfg.iterations):
        idx = batch_gen.integers(0, len(rays), cfg.batch_size)
        draw = BatchDraw(stream(cfg.seed, run_tag, "draw", it))
        res = render_core(model, rays.origins[idx], rays.dirs[idx], draw, cfg)
        loss, parts = batch_loss(res, rays.colors[idx], cfg)
        if not np.isfinite(parts["total"]):
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}: {parts}")
        model.zero_grad()
        ad.backward(loss)
        adam_step(model.groups, state)
        model.zero_grad()
        parts["iteration"] = it
        result.history.append(parts)
        if eval_dataset is not None and cfg.eval_interval > 0 \
                and (it + 1) % cfg.eval_interval == 0:
            bundle = evaluate(model, eval_dataset, cfg)
            result.eval_history.append((it + 1, bundle.psnr))
    return result


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    model: SceneModel
    perturbed_bundle: MetricBundle      # before any fine-tuning
    final_bundle: MetricBundle          # best snapshot over the run
    history: list[dict] = field(default_factory=list)
    eval_history: list[tuple[int, float]] = field(default_factory=list)


def finetune(baseline: SceneModel, spec: PerturbationSpec | None,
             unfrozen: str, dataset: SceneDataset,
             eval_dataset: SceneDataset, cfg: Config,
             iterations: int | None = None,
             cell_tag: str = "finetune") -> FinetuneResult:
    """Perturb one property, freeze everything but ``unfrozen``, re-optimize.

    Only the photometric loss is optimized.  Evaluation runs before the
    first step and on a fixed interval; the best-PSNR snapshot is returned,
    so the result is never worse than the perturbed starting point.
    """
    group_names = [g.name for g in baseline.groups]
    if unfrozen not in group_names:
        raise KeyError(f"unknown parameter group: {unfrozen}")
    iterations = cfg.finetune_iterations if iterations is None else iterations

    model = attach(baseline, spec) if spec is not None else baseline.clone()
    for g in model.groups:
        g.set_trainable(g.name == unfrozen)

    bundle0 = evaluate(model, eval_dataset, cfg)
    best_psnr = bundle0.psnr
    best_model = model.clone()
    best_bundle = bundle0

    rays = RayStore.from_dataset(dataset)
    batch_gen = stream(cfg.seed, "finetune", cell_tag, "batches")
    state = AdamState()
    result = FinetuneResult(model=model, perturbed_bundle=bundle0,
                            final_bundle=bundle0)
    result.eval_history.append((0, bundle0.psnr))

    for it in range(iterations):
        idx = batch_gen.integers(0, len(rays), cfg.batch_size)
        draw = BatchDraw(stream(cfg.seed, "finetune", cell_tag, "draw", it))
        res = render_core(model, rays.origins[idx], rays.dirs[idx], draw, cfg)
        loss, parts = batch_loss(res, rays.colors[idx], cfg,
                                 photometric_only=True)
        if not np.isfinite(parts["total"]):
            raise TrainingDiverged(
                f"non-finite fine-tune loss at iteration {it}: {parts}")
        model.zero_grad()
        ad.backward(loss)
        adam_step(model.groups, state)
        model.zero_grad()
        parts["iteration"] = it
        result.history.append(parts)
        last = it + 1 == iterations
        if last or (cfg.finetune_eval_interval > 0
                    and (it + 1) % cfg.finetune_eval_interval == 0):
            bundle = evaluate(model, eval_dataset, cfg)
            result.eval_history.append((it + 1, bundle.psnr))
            if bundle.psnr > best_psnr:
                best_psnr = bundle.psnr
                best_model = model.clone()
                best_bundle = bundle

    result.model = best_model
    result.final_bundle = best_bundle
    return result
