"""Deterministic synthetic corpus: image/mask pairs and short clips with exact flow.

Objects are rigid textured shapes translated by integer steps over a static
textured background, so the stored flows are exact and ground truth is known.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import draw

from . import imaging


@dataclass
class SynthSpec:
    size: int = 64
    n_images: int = 300
    n_clips: int = 20
    n_static_clips: int = 4
    n_test_clips: int = 6
    n_frames: int = 20
    min_object: int = 24
    max_object: int = 34
    max_speed: int = 2
    noise: float = 0.03
    plain_frac: float = 0.3
    shapes: tuple = ("square", "disk", "polygon")


def _shape_mask(rng, shape, h, w):
    m = np.zeros((h, w), dtype=bool)
    if shape == "square":
        m[:] = True
    elif shape == "disk":
        rr, cc = draw.ellipse((h - 1) / 2, (w - 1) / 2, h / 2, w / 2, shape=(h, w))
        m[rr, cc] = True
    elif shape == "polygon":
        k = int(rng.integers(5, 9))
        ang = np.sort(rng.uniform(0, 2 * np.pi, k))
        rad = rng.uniform(0.75, 1.0, k)
        rr = (h - 1) / 2 + rad * (h / 2) * np.sin(ang)
        cc = (w - 1) / 2 + rad * (w / 2) * np.cos(ang)
        pr, pc = draw.polygon(rr, cc, shape=(h, w))
        m[pr, pc] = True
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def _background(rng, size, noise, plain_frac=0.0):
    if rng.uniform() < plain_frac:
        # flat backgrounds, often near white, like bland real-photo backdrops
        level = rng.uniform(0.6, 1.0) if rng.uniform() < 0.5 else rng.uniform(0.0, 1.0)
        tint = np.clip(level + rng.normal(scale=0.08, size=3), 0, 1)
        return tint + rng.normal(scale=noise / 3, size=(size, size, 3))
    field = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 6, mode="wrap")
    field = (field - field.min()) / (np.ptp(field) + 1e-12)
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    bg = c0 + field[..., None] * (c1 - c0)
    bg += rng.normal(scale=noise, size=bg.shape)
    return bg


def _object(rng, spec, bg_mean):
    shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
    h = int(rng.integers(spec.min_object, spec.max_object + 1))
    w = int(rng.integers(spec.min_object, spec.max_object + 1))
    mask = _shape_mask(rng, shape, h, w)
    while True:
        color = rng.uniform(0, 1, 3)
        if np.linalg.norm(color - bg_mean) > 0.6:
            break
    tex = color + rng.normal(scale=spec.noise, size=(h, w, 3))
    return mask, tex


def _compose(bg, mask, tex, top, left):
    img = bg.copy()
    h, w = mask.shape
    region = img[top:top + h, left:left + w]
    region[mask] = tex[mask]
    gt = np.zeros(bg.shape[:2], dtype=bool)
    gt[top:top + h, left:left + w] = mask
    return np.clip(img, 0, 1), gt


def _trajectory(rng, spec, h, w, n, moving):
    size = spec.size
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    if moving:
        while True:
            vy, vx = (int(v) for v in rng.integers(-spec.max_speed, spec.max_speed + 1, 2))
            if vy or vx:
                break
    else:
        vy = vx = 0
    pos = [(top, left)]
    for _ in range(n - 1):
        if not 0 <= top + vy <= size - h:
            vy = -vy
        if not 0 <= left + vx <= size - w:
            vx = -vx
        top, left = top + vy, left + vx
        pos.append((top, left))
    return pos


def _flow(mask, pos, disp, size):
    flow = np.zeros((size, size, 2), dtype=np.float32)
    top, left = pos
    h, w = mask.shape
    flow[top:top + h, left:left + w][mask] = (disp[1], disp[0])
    return flow


def write_clip(rng, spec, root, moving=True):
    root = Path(root)
    for sub in ("frames", "flow", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    bg = _background(rng, spec.size, spec.noise)
    mask, tex = _object(rng, spec, bg.mean(axis=(0, 1)))
    pos = _trajectory(rng, spec, *mask.shape, spec.n_frames, moving)
    for i, (top, left) in enumerate(pos):
        frame = bg + rng.normal(scale=spec.noise / 3, size=bg.shape)
        img, gt = _compose(frame, mask, tex, top, left)
        imaging.write_rgb(root / "frames" / f"{i:05d}.png", img)
        imaging.write_gray(root / "gt" / f"{i:05d}.png", gt)
    for i in range(len(pos) - 1):
        d = (pos[i + 1][0] - pos[i][0], pos[i + 1][1] - pos[i][1])
        imaging.write_flo(root / "flow" / f"{i:05d}_{i + 1:05d}.flo", _flow(mask, pos[i], d, spec.size))
        imaging.write_flo(root / "flow" / f"{i + 1:05d}_{i:05d}.flo",
                          _flow(mask, pos[i + 1], (-d[0], -d[1]), spec.size))


def generate_synthetic_corpus(spec: SynthSpec, root, seed=0) -> Path:
    """Write ``images/``, ``videos/`` (training clips) and ``test/`` (held-out clips) under ``root``.

    The first ``n_static_clips`` training clips have a motionless object.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    img_dir, mask_dir = root / "images" / "images", root / "images" / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    for k in range(spec.n_images):
        bg = _background(rng, spec.size, spec.noise, spec.plain_frac)
        mask, tex = _object(rng, spec, bg.mean(axis=(0, 1)))
        top = int(rng.integers(0, spec.size - mask.shape[0] + 1))
        left = int(rng.integers(0, spec.size - mask.shape[1] + 1))
        img, gt = _compose(bg, mask, tex, top, left)
        imaging.write_rgb(img_dir / f"{k:05d}.png", img)
        imaging.write_gray(mask_dir / f"{k:05d}.png", gt)
    for c in range(spec.n_clips):
        write_clip(rng, spec, root / "videos" / f"clip{c:03d}", moving=c >= spec.n_static_clips)
    for c in range(spec.n_test_clips):
        write_clip(rng, spec, root / "test" / f"clip{c:03d}", moving=True)
    return root
