"""Command-line interface.

Subcommands: train, render, eval, perturb, finetune, matrix, consistency,
oracle-gen.  A JSON config file mirrors the Config dataclass and may add a
"matrix_specs" list of perturbation-spec dicts for the matrix subcommand.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import Config
from .experiments import consistency_experiment, run_matrix, \
    shipped_noise_table
from .oracle import OracleParams, generate_dataset
from .perturb import PerturbationSpec, attach
from .rendering import render_image
from .sceneio import load_checkpoint, load_transforms, save_checkpoint, \
    write_json, write_png, write_png_raw
from .training import evaluate, eval_seed, finetune, train


def _load_config(args) -> tuple[Config, dict]:
    extras: dict = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
        extras = {k: raw.pop(k) for k in ("matrix_specs",) if k in raw}
        base = Config.full().to_dict() if not args.desk else Config.desk().to_dict()
        base.update(raw)
        cfg = Config.from_dict(base)
    else:
        cfg = Config.desk() if args.desk else Config.full()
    if getattr(args, "seed", None) is not None:
        cfg = Config.from_dict({**cfg.to_dict(), "seed": args.seed})
    if getattr(args, "iters", None) is not None:
        cfg = Config.from_dict({**cfg.to_dict(), "iterations": args.iters})
    cfg.validate()
    return cfg, extras


def _spec_from_args(args) -> PerturbationSpec:
    kwargs: dict = {"target": args.target}
    if args.m is not None:
        kwargs["multiplier"] = args.m
        kwargs["direction"] = "under" if args.m < 1.0 else "over"
    if args.sigma_d is not None:
        kwargs["sigma_d"] = args.sigma_d
        kwargs["noise_seed"] = args.seed or 0
    if args.blur is not None:
        size, sigma = args.blur.split(",")
        kwargs["size_i"] = int(size)
        kwargs["sigma_i"] = float(sigma)
    return PerturbationSpec(**kwargs)


def cmd_train(args) -> int:
    cfg, _ = _load_config(args)
    train_ds = load_transforms(args.scene, "train")
    test_ds = None
    if (Path(args.scene) / "transforms_test.json").exists():
        test_ds = load_transforms(args.scene, "test")
    result = train(train_ds, cfg, eval_dataset=test_ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", result.model, cfg.iterations)
    write_json(out / "train_history.json", {
        "loss": result.history, "eval": result.eval_history})
    if test_ds is not None:
        bundle = evaluate(result.model, test_ds, cfg)
        write_json(out / "eval.json", bundle.as_dict())
        print(f"held-out PSNR {bundle.psnr:.2f} dB, SSIM {bundle.ssim:.4f}")
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return 0


def cmd_render(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    ds = load_transforms(args.scene, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = [args.frame] if args.frame is not None else range(len(ds))
    for f in frames:
        img = render_image(model, ds.cameras[f],
                           eval_seed(args.seed or cfg.seed, f), cfg,
                           workers=args.workers)
        write_png(out / f"render_{f}.png", img.ldr())
        op = np.maximum(img.opacity, 1e-6)
        write_png(out / f"albedo_{f}.png",
                  np.clip(img.albedo / op[..., None], 0, 1))
        write_png_raw(out / f"roughness_{f}.png",
                      np.clip(img.roughness / op, 0, 1))
        write_png(out / f"f0_{f}.png", np.clip(img.f0 / op[..., None], 0, 1))
        write_png(out / f"normal_{f}.png",
                  np.clip(0.5 * (img.normal / op[..., None] + 1.0), 0, 1))
    write_png(out / "envmap.png",
              np.clip(model.envmap.radiance_values(), 0, 1))
    print(f"renders written to {out}")
    return 0


def cmd_eval(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    ds = load_transforms(args.scene, args.split)
    bundle = evaluate(model, ds, cfg, seed=args.seed or cfg.seed)
    payload = bundle.as_dict()
    print(json.dumps(payload, indent=2))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_json(Path(args.out) / "eval.json", payload)
    return 0


def cmd_perturb(args) -> int:
    model, cfg, iteration = load_checkpoint(args.checkpoint)
    spec = _spec_from_args(args)
    perturbed = attach(model, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "perturbed.ckpt", perturbed, iteration)
    print(f"applied {spec.label()}; wrote {out / 'perturbed.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    train_ds = load_transforms(args.scene, "train")
    test_ds = load_transforms(args.scene, "test")
    spec = _spec_from_args(args) if args.target else None
    result = finetune(model, spec, args.finetune, train_ds, test_ds, cfg,
                      iterations=args.iters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "finetuned.ckpt", result.model)
    write_json(out / "finetune.json", {
        "perturbed": result.perturbed_bundle.as_dict(),
        "final": result.final_bundle.as_dict(),
        "eval_history": result.eval_history,
    })
    print(f"PSNR {result.perturbed_bundle.psnr:.2f} -> "
          f"{result.final_bundle.psnr:.2f} dB")
    return 0


def cmd_matrix(args) -> int:
    model, cfg, _ = load_checkpoint(args.checkpoint)
    _, extras = _load_config(args)
    train_ds = load_transforms(args.scene, "train")
    test_ds = load_transforms(args.scene, "test")
    scene = Path(args.scene).name
    if extras.get("matrix_specs"):
        specs = [PerturbationSpec.from_dict(d) for d in extras["matrix_specs"]]
    else:
        specs = shipped_noise_table(scene)
    matrix = run_matrix(model, specs, train_ds, test_ds, cfg,
                        out_dir=args.out, scene=scene,
                        iterations=args.iters)
    print(f"matrix with {len(matrix.cells)} cells written to {args.out}")
    return 0


def cmd_consistency(args) -> int:
    cfg, _ = _load_config(args)
    train_sets = [load_transforms(s, "train") for s in args.scene]
    test_sets = [load_transforms(s, "test") for s in args.scene]
    consistency_experiment(train_sets, test_sets, cfg, out_dir=args.out)
    print(f"consistency report written to {args.out}")
    return 0


def cmd_oracle_gen(args) -> int:
    params = OracleParams(kind=args.kind, seed=args.seed or 7,
                          image_size=args.size,
                          train_views=args.train_views,
                          test_views=args.test_views,
                          env_kind=args.env_kind)
    generate_dataset(args.out, params)
    print(f"oracle dataset written to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="microfield",
        description="Microfacet-field inverse renderer and perturbation "
                    "experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scene=True, ckpt=False):
        if scene:
            p.add_argument("--scene", required=True)
        if ckpt:
            p.add_argument("--checkpoint", required=True)
        p.add_argument("--config")
        p.add_argument("--out", default="out")
        p.add_argument("--seed", type=int)
        p.add_argument("--iters", type=int)
        p.add_argument("--desk", action="store_true",
                       help="use the desk-scale preset")

    p = sub.add_parser("train", help="train a model on a scene")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render views from a checkpoint")
    common(p, ckpt=True)
    p.add_argument("--split", default="test")
    p.add_argument("--frame", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p, ckpt=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("perturb", help="write a perturbed checkpoint")
    common(p, scene=False, ckpt=True)
    p.add_argument("--target", required=True)
    p.add_argument("--m", type=float)
    p.add_argument("--sigma-d", dest="sigma_d", type=float)
    p.add_argument("--blur", help="size,sigma")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("finetune", help="perturb and fine-tune one group")
    common(p, ckpt=True)
    p.add_argument("--target")
    p.add_argument("--m", type=float)
    p.add_argument("--sigma-d", dest="sigma_d", type=float)
    p.add_argument("--blur", help="size,sigma")
    p.add_argument("--finetune", required=True,
                   choices=["albedo", "roughness", "f0", "density", "envmap"])
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("matrix", help="run the full experiment matrix")
    common(p, ckpt=True)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("consistency",
                       help="train per illumination and compare properties")
    p.add_argument("--scene", action="append", required=True,
                   help="repeat once per illumination dataset")
    p.add_argument("--config")
    p.add_argument("--out", default="out")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--desk", action="store_true")
    p.set_defaults(func=cmd_consistency)

    p = sub.add_parser("oracle-gen", help="generate an analytic test scene")
    p.add_argument("--out", default="oracle_scene")
    p.add_argument("--kind", default="lambertian_sphere",
                   choices=["lambertian_sphere", "mirror_sphere"])
    p.add_argument("--env-kind", dest="env_kind", default="sky",
                   choices=["sky", "constant"])
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--train-views", type=int, default=16)
    p.add_argument("--test-views", type=int, default=4)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_oracle_gen)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
