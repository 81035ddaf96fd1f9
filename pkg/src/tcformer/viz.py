"""Token-region overlays: every token region gets its own color."""
import colorsys

import numpy as np
from PIL import Image


def palette_color(index):
    """Deterministic categorical color for a token index (golden-ratio hue walk)."""
    h = (index * 0.6180339887498949) % 1.0
    s = 0.55 + 0.35 * ((index * 7) % 3) / 2
    return np.array(colorsys.hsv_to_rgb(h, s, 0.95))


def region_overlay(image, region_map):
    """Blend each region's mean image color 50/50 with its palette color.

    ``image`` is (H, W, 3) in [0, 1]; ``region_map`` is the (Hb, Wb) token map.
    Returns an (H, W, 3) uint8 array.
    """
    image = np.asarray(image, dtype=np.float64)
    region_map = np.asarray(region_map)
    sy, sx = image.shape[0] // region_map.shape[0], image.shape[1] // region_map.shape[1]
    pix = np.repeat(np.repeat(region_map, sy, axis=0), sx, axis=1)
    n = int(region_map.max()) + 1
    flat = pix.ravel()
    area = np.bincount(flat, minlength=n)
    mean = np.stack([np.bincount(flat, image[..., c].ravel(), minlength=n) for c in range(3)], -1)
    mean /= np.maximum(area, 1)[:, None]
    colors = np.stack([palette_color(i) for i in range(n)])
    blended = 0.5 * mean + 0.5 * colors
    return np.round(blended[pix] * 255).astype(np.uint8)


def save_png(array, path, scale=1):
    img = Image.fromarray(np.asarray(array, dtype=np.uint8), "RGB")
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    img.save(path, format="PNG", optimize=False)


def stage_overlays(image, stage_region_maps):
    return [region_overlay(image, rm) for rm in stage_region_maps]


def composite_strip(image, overlays, gap=2):
    """Input image followed by the stage overlays, left to right."""
    panels = [np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), *overlays]
    h = panels[0].shape[0]
    sep = np.full((h, gap, 3), 255, dtype=np.uint8)
    parts = []
    for i, p in enumerate(panels):
        if i:
            parts.append(sep)
        parts.append(p)
    return np.concatenate(parts, axis=1)
