"""Synthetic keypoint images with small high-frequency detail parts.

Each image holds 1-3 colored disks ("bodies") on a textured background. A
5x5 checkerboard of bright dots (the "detail part") is attached to every
disk. Keypoint ``2 * b`` is the center of the disk with color slot ``b`` and
keypoint ``2 * b + 1`` the center of its dot pattern; absent bodies leave
their keypoints invisible with all-zero target heatmaps.
"""
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import InvalidInput

STRIDE = 4
SIGMA_CELLS = 2.0
NUM_SLOTS = 3
NUM_KEYPOINTS = 2 * NUM_SLOTS
SLOT_COLORS = np.array([[0.95, 0.25, 0.2], [0.2, 0.9, 0.3], [0.25, 0.4, 1.0]])
DETAIL_SIZE = 5

BACKGROUND, BODY, DETAIL = 0, 1, 2


@dataclass
class SyntheticSample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    keypoints: np.ndarray  # (K, 2) pixel (x, y)
    visible: np.ndarray  # (K,) bool
    target_heatmaps: np.ndarray  # (K, H/4, W/4)
    part_mask: np.ndarray  # (H/4, W/4) with BACKGROUND / BODY / DETAIL labels


def keypoint_cell(x, y):
    return int(y // STRIDE), int(x // STRIDE)


def gaussian_heatmap(cell, shape, sigma=SIGMA_CELLS):
    rows = np.arange(shape[0])[:, None]
    cols = np.arange(shape[1])[None, :]
    d2 = (rows - cell[0]) ** 2 + (cols - cell[1]) ** 2
    return np.exp(-d2 / (2.0 * sigma**2))


def _background(rng, size):
    coarse = rng.random((size // 8 + 1, size // 8 + 1, 3))
    t = (np.arange(size) + 0.5) / 8.0
    i0 = np.floor(t).astype(int).clip(0, coarse.shape[0] - 2)
    f = (t - i0)[:, None]
    rows = coarse[i0] * (1 - f[..., None]) + coarse[i0 + 1] * f[..., None]
    smooth = rows[:, i0] * (1 - f.T[..., None]) + rows[:, i0 + 1] * f.T[..., None]
    return 0.2 + 0.08 * smooth + 0.02 * rng.standard_normal((size, size, 3))


def make_sample(rng, size=64):
    if size % 32:
        raise InvalidInput(f"image size must be a multiple of 32, got {size}")
    image = _background(rng, size)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    body_cover = np.zeros((size, size))
    detail_px = np.zeros((size, size), dtype=bool)
    keypoints = np.zeros((NUM_KEYPOINTS, 2))
    visible = np.zeros(NUM_KEYPOINTS, dtype=bool)

    n_bodies = int(rng.integers(1, NUM_SLOTS + 1))
    slots = np.sort(rng.choice(NUM_SLOTS, n_bodies, replace=False))
    placed = []
    half = DETAIL_SIZE // 2
    for slot in slots:
        for _ in range(200):
            r = rng.uniform(5.5, 8.5)
            theta = rng.uniform(0, 2 * np.pi)
            reach = r + half + 1.5
            margin = reach + half + 1
            cx, cy = rng.uniform(margin, size - margin, 2)
            if all(np.hypot(cx - px, cy - py) > reach + pr + 2 * half + 3 for px, py, pr in placed):
                break
        else:
            continue
        placed.append((cx, cy, r + half + 1.5))
        cover = np.clip(r + 0.5 - np.hypot(xx - cx, yy - cy), 0.0, 1.0)
        color = SLOT_COLORS[slot] * rng.uniform(0.8, 1.0)
        image = image * (1 - cover[..., None]) + color * cover[..., None]
        body_cover = np.maximum(body_cover, cover)

        dx = int(np.floor(cx + reach * np.cos(theta)))
        dy = int(np.floor(cy + reach * np.sin(theta)))
        bright = 0.5 * SLOT_COLORS[slot] + 0.5
        for i in range(-half, half + 1):
            for j in range(-half, half + 1):
                py, px = dy + i, dx + j
                detail_px[py, px] = True
                if (i + j) % 2 == 0:
                    image[py, px] = bright
                else:
                    image[py, px] = 0.05
        keypoints[2 * slot] = (cx, cy)
        keypoints[2 * slot + 1] = (dx + 0.5, dy + 0.5)
        visible[2 * slot] = visible[2 * slot + 1] = True

    base = size // STRIDE
    heatmaps = np.zeros((NUM_KEYPOINTS, base, base))
    for kp in np.flatnonzero(visible):
        heatmaps[kp] = gaussian_heatmap(keypoint_cell(*keypoints[kp]), (base, base))

    cells = lambda a: a.reshape(base, STRIDE, base, STRIDE)
    part = np.full((base, base), BACKGROUND, dtype=np.int64)
    part[cells(body_cover).mean(axis=(1, 3)) >= 0.5] = BODY
    part[cells(detail_px).any(axis=(1, 3))] = DETAIL
    return SyntheticSample(np.clip(image, 0.0, 1.0), keypoints, visible, heatmaps, part)


def generate_dataset(seed, count, resolution=64):
    """``count`` samples; sample ``i`` depends only on ``(seed, i)``."""
    if count < 0:
        raise InvalidInput(f"count must be >= 0, got {count}")
    children = np.random.SeedSequence(seed).spawn(count)
    return [make_sample(np.random.default_rng(c), resolution) for c in children]


def to_tensors(samples, dtype=torch.float32):
    """Stack samples into (B, 3, H, W) images and (B, K, H/4, W/4) targets."""
    images = torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype).permute(0, 3, 1, 2)
    targets = torch.as_tensor(np.stack([s.target_heatmaps for s in samples]), dtype=dtype)
    return images.contiguous(), targets
