"""Dataset ingestion, checkpoint persistence, image and report emission.

Datasets follow the synthetic transforms.json layout: one JSON per split
with a shared horizontal field of view ("camera_angle_x") and a list of
frames carrying a file path and a row-major camera-to-world matrix
(right-handed, -z forward, +y up).  Images are 8-bit sRGB PNGs with alpha;
alpha is kept separate as a mask and never composited into the colors.

Checkpoints are a single file: magic, manifest length, JSON manifest
(shapes, group/tensor names, config, config hash, iteration), then raw
little-endian float32 blobs in manifest order.  Round trips are bit-exact.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .config import Config
from .fields import SceneModel, build_model
from .rendering import Camera

CHECKPOINT_MAGIC = b"MFCKPT1\n"


class SchemaError(ValueError):
    """Raised when an input file violates the expected layout."""


# ---------------------------------------------------------------------------
# color transfer
# ---------------------------------------------------------------------------

def srgb_to_linear(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return np.where(s <= 0.04045, s / 12.92, ((s + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(lin: np.ndarray) -> np.ndarray:
    lin = np.clip(np.asarray(lin, dtype=np.float64), 0.0, 1.0)
    return np.where(lin <= 0.0031308, lin * 12.92,
                    1.055 * lin ** (1.0 / 2.4) - 0.055)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class SceneDataset:
    """Posed frames of one split, plus optional ground-truth sidecars."""

    images: np.ndarray          # (F, H, W, 3) linear RGB
    alphas: np.ndarray          # (F, H, W)
    cameras: list[Camera]
    split: str
    fov_x: float
    gt_envmap: np.ndarray | None = None      # (H, W, 3) linear
    gt_normals: np.ndarray | None = None     # (F, H, W, 3) world space
    name: str = "scene"

    def __len__(self) -> int:
        return len(self.cameras)


def load_transforms(scene_dir: str | Path, split: str = "train") -> SceneDataset:
    """Load one split of a synthetic scene directory."""
    scene_dir = Path(scene_dir)
    meta_path = scene_dir / f"transforms_{split}.json"
    if not meta_path.exists():
        raise SchemaError(f"missing {meta_path}")
    meta = json.loads(meta_path.read_text())
    if "camera_angle_x" not in meta:
        raise SchemaError(f"{meta_path}: missing camera_angle_x")
    if "frames" not in meta or not meta["frames"]:
        raise SchemaError(f"{meta_path}: missing frames")
    fov = float(meta["camera_angle_x"])

    images, alphas, cameras, normal_frames = [], [], [], []
    shape = None
    for frame in meta["frames"]:
        if "file_path" not in frame or "transform_matrix" not in frame:
            raise SchemaError(f"{meta_path}: frame missing keys")
        mat = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if mat.shape != (4, 4) or not np.all(np.isfinite(mat)):
            raise SchemaError(f"{meta_path}: bad transform for "
                              f"{frame['file_path']}")
        img_path = scene_dir / (frame["file_path"] + ".png")
        if not img_path.exists():
            img_path = scene_dir / frame["file_path"]
        if not img_path.exists():
            raise SchemaError(f"missing image file {img_path}")
        rgba = np.asarray(Image.open(img_path).convert("RGBA"),
                          dtype=np.float64) / 255.0
        if shape is None:
            shape = rgba.shape
        elif rgba.shape != shape:
            raise SchemaError("frames disagree on image resolution")
        images.append(srgb_to_linear(rgba[..., :3]))
        alphas.append(rgba[..., 3])
        cameras.append(Camera(mat, fov, rgba.shape[1], rgba.shape[0]))
        normal_path = img_path.with_name(img_path.stem + "_normal.pfm")
        normal_frames.append(read_pfm(normal_path)
                             if normal_path.exists() else None)

    gt_env = None
    for candidate in ("env_gt.pfm", "env_gt.png"):
        if (scene_dir / candidate).exists():
            gt_env = load_envmap(scene_dir / candidate)
            break

    gt_normals = None
    if all(nf is not None for nf in normal_frames):
        gt_normals = np.stack(normal_frames)

    return SceneDataset(
        images=np.stack(images), alphas=np.stack(alphas), cameras=cameras,
        split=split, fov_x=fov, gt_envmap=gt_env, gt_normals=gt_normals,
        name=scene_dir.name)


def load_envmap(path: str | Path) -> np.ndarray:
    """HDR (PFM) or LDR (PNG, sRGB-decoded) environment map; (H, W, 3)."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        data = read_pfm(path)
    elif path.suffix.lower() == ".png":
        arr = np.asarray(Image.open(path).convert("RGB"),
                         dtype=np.float64) / 255.0
        data = srgb_to_linear(arr)
    else:
        raise SchemaError(f"unsupported environment map format: {path.suffix}")
    if not np.all(np.isfinite(data)):
        raise SchemaError(f"{path}: non-finite radiance values")
    if data.shape[1] != 2 * data.shape[0]:
        import warnings
        warnings.warn(f"{path}: width {data.shape[1]} is not twice the "
                      f"height {data.shape[0]}", stacklevel=2)
    return np.maximum(data, 0.0)


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def read_pfm(path: str | Path) -> np.ndarray:
    """Binary PFM ('PF' header, bottom-up rows, sign of scale = endianness)."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"PF", b"Pf"):
        raise SchemaError(f"{path}: not a PFM file")
    channels = 3 if parts[0] == b"PF" else 1
    try:
        w, h = (int(tok) for tok in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise SchemaError(f"{path}: bad PFM header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    data = np.frombuffer(parts[3], dtype=dtype, count=count).astype(np.float64)
    data = data.reshape(h, w, channels)[::-1]  # rows are stored bottom-up
    if abs(scale) not in (0.0, 1.0):
        data = data * abs(scale)
    if not np.all(np.isfinite(data)):
        raise SchemaError(f"{path}: non-finite PFM payload")
    return data[..., 0] if channels == 1 else data


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[..., None]
    header = b"PF\n" if data.shape[2] == 3 else b"Pf\n"
    h, w = data.shape[:2]
    payload = data[::-1].astype("<f4").tobytes()
    Path(path).write_bytes(header + f"{w} {h}\n".encode() + b"-1.0\n" + payload)


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

def write_png(path: str | Path, linear_rgb: np.ndarray,
              alpha: np.ndarray | None = None) -> None:
    """8-bit sRGB PNG from linear radiance (clamped to [0, 1])."""
    srgb = linear_to_srgb(linear_rgb)
    img8 = np.round(srgb * 255.0).astype(np.uint8)
    if alpha is not None:
        a8 = np.round(np.clip(alpha, 0, 1) * 255.0).astype(np.uint8)
        img8 = np.concatenate([img8, a8[..., None]], axis=-1)
        Image.fromarray(img8, mode="RGBA").save(path)
    else:
        Image.fromarray(img8, mode="RGB").save(path)


def write_png_raw(path: str | Path, values: np.ndarray) -> None:
    """Grayscale or direct-value PNG without transfer (for buffer dumps)."""
    arr = np.round(np.clip(values, 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: SceneModel,
                    iteration: int = 0) -> None:
    tensors: list[tuple[str, Tensor]] = []
    for group in model.groups:
        for p in group.params:
            tensors.append((f"{group.name}/{p.name}", p.tensor))
    manifest = {
        "config": model.config.to_dict(),
        "config_hash": model.config.digest(),
        "iteration": int(iteration),
        "multipliers": dict(model.multipliers),
        "perturbations": list(model.applied_perturbations),
        "tensors": [
            {"name": name, "shape": list(t.data.shape)} for name, t in tensors
        ],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, expected_config: Config | None = None,
                    allow_config_mismatch: bool = False):
    """Rebuild (model, config, iteration) from a checkpoint file."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise SchemaError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (mlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    manifest = json.loads(raw[off:off + mlen].decode())
    off += mlen

    config = Config.from_dict(manifest["config"])
    if manifest.get("config_hash") != config.digest():
        raise SchemaError(f"{path}: manifest hash does not match its config")
    if expected_config is not None and not allow_config_mismatch:
        if expected_config.digest() != config.digest():
            raise SchemaError(
                f"{path}: checkpoint config hash {config.digest()[:12]} does "
                f"not match the expected config "
                f"{expected_config.digest()[:12]}; pass "
                "allow_config_mismatch to override")

    model = build_model(config)
    by_name = {}
    for group in model.groups:
        for p in group.params:
            by_name[f"{group.name}/{p.name}"] = p.tensor
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        off += count * 4
        if name not in by_name:
            raise SchemaError(f"{path}: unknown tensor {name}")
        if by_name[name].data.shape != shape:
            raise SchemaError(f"{path}: tensor {name} shape mismatch")
        if not np.all(np.isfinite(data)):
            raise SchemaError(f"{path}: non-finite payload in {name}")
        by_name[name].data = data.reshape(shape).copy()
    model.multipliers = {k: float(v)
                         for k, v in manifest.get("multipliers", {}).items()}
    model.applied_perturbations = list(manifest.get("perturbations", []))
    return model, config, int(manifest["iteration"])


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

CSV_HEADER = ["scene", "manipulated", "direction", "finetuned",
              "psnr", "ssim", "mae", "epsnr"]


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def write_matrix_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow([
                row["scene"], row["manipulated"], row["direction"],
                row["finetuned"], _fmt(row["psnr"]), _fmt(row["ssim"]),
                _fmt(row["mae"]), _fmt(row["epsnr"]),
            ])


def read_matrix_csv(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise SchemaError(f"{path}: unexpected CSV header")
        for rec in reader:
            rows.append({
                "scene": rec["scene"],
                "manipulated": rec["manipulated"],
                "direction": rec["direction"],
                "finetuned": rec["finetuned"],
                "psnr": float(rec["psnr"]) if rec["psnr"] else None,
                "ssim": float(rec["ssim"]) if rec["ssim"] else None,
                "mae": float(rec["mae"]) if rec["mae"] else None,
                "epsnr": float(rec["epsnr"]) if rec["epsnr"] else None,
            })
    return rows


def write_json(path: str | Path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
