"""Synthetic small-target segmentation data, paired augmentation, volume I/O.

Samples are small bright ellipses on a smooth textured background, a
desk-scale stand-in for an abdominal organ on CT. Volumes are Tensor4 arrays
whose batch axis holds 2-D slices.
"""
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from segkit.tensor import Prng, bilinear_resize, load_t4, save_t4


@dataclass(frozen=True)
class SynthTask:
    size: int = 64
    min_blobs: int = 1
    max_blobs: int = 3
    axis_range: tuple = (0.07, 0.16)  # ellipse semi-axes, fraction of size
    contrast: float = 0.35
    noise: float = 0.04
    min_fraction: float = 0.01
    max_fraction: float = 0.25
    seed: int = 0


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation: float = 10.0  # degrees
    zoom_range: float = 0.25
    shift_fraction: float = 0.2

    @classmethod
    def off(cls):
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AffineParams:
    angle: float = 0.0  # degrees, counter-clockwise as displayed
    zoom: float = 1.0  # >1 magnifies content
    shift_y: float = 0.0  # pixels
    shift_x: float = 0.0

    @property
    def is_identity(self):
        return self.angle == 0 and self.zoom == 1 and self.shift_x == 0 and self.shift_y == 0


def _texture(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    bg = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 3.0, 2)
        phase = rng.uniform(0, 2 * math.pi)
        bg += np.sin(2 * math.pi * (fy * yy + fx * xx) + phase)
    bg = (bg - bg.min()) / (np.ptp(bg) + 1e-12)
    return 0.1 + 0.35 * bg


def _sample(task, rng):
    size = task.size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    lo, hi = task.axis_range
    while True:
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(task.min_blobs, task.max_blobs + 1))):
            cy, cx = rng.uniform(0.3 * size, 0.7 * size, 2)
            ay, ax = rng.uniform(lo * size, hi * size, 2)
            theta = rng.uniform(0, math.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * math.cos(theta) + dy * math.sin(theta)
            v = -dx * math.sin(theta) + dy * math.cos(theta)
            mask |= (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        frac = mask.mean()
        if task.min_fraction <= frac <= task.max_fraction:
            break
    img = _texture(rng, size) + task.contrast * mask + rng.normal(0, task.noise, (size, size))
    img = np.clip(img, 0.0, 1.0)
    return (img[None, None].astype(np.float32), mask[None, None].astype(np.float32))


def generate(task, n):
    """Return ``n`` (image, mask) pairs of shape (1, 1, size, size).

    Sample i depends only on (seed, i), so a longer run extends a shorter one.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    root = Prng(task.seed)
    return [_sample(task, root.fork(i)) for i in range(n)]


def sample_affine(cfg, rng, shape):
    """Draw one transform; rotation in [-max, max] degrees, zoom in
    [1 - z, 1 + z], shifts within shift_fraction of the image height/width."""
    h, w = shape[-2:]
    return AffineParams(
        angle=float(rng.uniform(-cfg.max_rotation, cfg.max_rotation)),
        zoom=float(rng.uniform(1 - cfg.zoom_range, 1 + cfg.zoom_range)),
        shift_y=float(rng.uniform(-cfg.shift_fraction, cfg.shift_fraction)) * h,
        shift_x=float(rng.uniform(-cfg.shift_fraction, cfg.shift_fraction)) * w,
    )


def _source_coords(params, h, w):
    # output pixel center -> source pixel index, rotating about the image center;
    # rows grow downward, so the angle is negated to turn content counter-clockwise
    a = -math.radians(params.angle)
    cos, sin = math.cos(a), math.sin(a)
    cy, cx = h / 2, w / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy = yy + 0.5 - cy - params.shift_y
    dx = xx + 0.5 - cx - params.shift_x
    sx = (cos * dx + sin * dy) / params.zoom + cx - 0.5
    sy = (-sin * dx + cos * dy) / params.zoom + cy - 0.5
    return sy, sx


def _bilinear_gather(x, sy, sx):
    h, w = x.shape[-2:]
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    fy = (sy - y0).astype(x.dtype)
    fx = (sx - x0).astype(x.dtype)
    out = np.zeros(x.shape, dtype=x.dtype)
    for oy, wy in ((0, 1 - fy), (1, fy)):
        for ox, wx in ((0, 1 - fx), (1, fx)):
            yi, xi = y0 + oy, x0 + ox
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            vals = x[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += np.where(ok, vals, 0) * (wy * wx)
    return out


def _nearest_gather(x, sy, sx):
    h, w = x.shape[-2:]
    yi = np.floor(sy + 0.5).astype(np.intp)
    xi = np.floor(sx + 0.5).astype(np.intp)
    ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    vals = x[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.where(ok, vals, 0).astype(x.dtype)


def apply_affine(image, mask, params):
    """Warp image (bilinear) and mask (nearest) with the same transform;
    pixels mapped from outside the frame become 0."""
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ")
    if params.is_identity:
        return image.copy(), mask.copy()
    sy, sx = _source_coords(params, *image.shape[-2:])
    img = np.clip(_bilinear_gather(image, sy, sx), 0.0, 1.0)
    return img, _nearest_gather(mask, sy, sx)


def augment(image, mask, cfg, rng):
    return apply_affine(image, mask, sample_affine(cfg, rng, image.shape))


def merge_labels(labels):
    """Collapse a multi-label map (e.g. organ + tumour) into a binary mask."""
    return (labels > 0).astype(np.float32)


def preprocess(volume, labels, size=256):
    """Resize a scan to size x size (bilinear) and binarize its labels."""
    img = bilinear_resize(volume.astype(np.float32), size, size)
    msk = bilinear_resize(merge_labels(labels), size, size)
    return img, (msk >= 0.5).astype(np.float32)


def save_volume(path, x):
    save_t4(path, x)


def load_volume(path):
    return load_t4(path)


def write_dataset(out_dir, pairs, manifest):
    os.makedirs(out_dir, exist_ok=True)
    for i, (img, msk) in enumerate(pairs):
        save_volume(os.path.join(out_dir, f"img_{i:04d}.t4"), img)
        save_volume(os.path.join(out_dir, f"msk_{i:04d}.t4"), msk)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def read_dataset(data_dir):
    """Return [(scan_id, image, mask)] sorted by scan id."""
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"data directory {data_dir!r} does not exist")
    ids = sorted(f[4:-3] for f in os.listdir(data_dir)
                 if f.startswith("img_") and f.endswith(".t4"))
    if not ids:
        raise FileNotFoundError(f"no img_*.t4 files in {data_dir!r}")
    out = []
    for sid in ids:
        mpath = os.path.join(data_dir, f"msk_{sid}.t4")
        if not os.path.exists(mpath):
            raise FileNotFoundError(f"missing mask for scan {sid}")
        img = load_volume(os.path.join(data_dir, f"img_{sid}.t4"))
        msk = load_volume(mpath)
        if img.shape != msk.shape:
            raise ValueError(f"scan {sid}: image {img.shape} vs mask {msk.shape}")
        out.append((sid, img, msk))
    return out


def generate_dataset(out_dir, task, n, slices_per_volume=1):
    """Write ``n`` volumes of ``slices_per_volume`` synthetic slices each."""
    pairs = generate(task, n * slices_per_volume)
    vols = []
    for i in range(n):
        chunk = pairs[i * slices_per_volume:(i + 1) * slices_per_volume]
        vols.append((np.concatenate([p[0] for p in chunk]),
                     np.concatenate([p[1] for p in chunk])))
    manifest = {"seed": task.seed, "volumes": n, "slices_per_volume": slices_per_volume,
                "task": asdict(task)}
    write_dataset(out_dir, vols, manifest)
    return manifest
