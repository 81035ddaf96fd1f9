import numpy as np
import torch

from ..token_space import region_areas
from .data import BACKGROUND, BODY, DETAIL, STRIDE, to_tensors


def decode_heatmaps(heatmaps):
    """Pixel coordinates (x, y) of each heatmap's argmax cell center.

    Ties go to the first cell in raster order.
    """
    hm = np.asarray(heatmaps)
    *lead, h, w = hm.shape
    flat = hm.reshape(-1, h * w).argmax(axis=-1)
    rows, cols = np.divmod(flat, w)
    xy = np.stack([cols * STRIDE + STRIDE / 2, rows * STRIDE + STRIDE / 2], axis=-1)
    return xy.reshape(*lead, 2).astype(np.float64)


def pck_from_heatmaps(heatmaps, samples, threshold_fraction=0.1):
    """Fraction of visible keypoints decoded within ``threshold_fraction * image size``."""
    pred = decode_heatmaps(heatmaps)
    hits = total = 0
    for p, s in zip(pred, samples):
        thr = threshold_fraction * s.image.shape[0]
        err = np.linalg.norm(p - s.keypoints, axis=-1)[s.visible]
        hits += int((err <= thr).sum())
        total += int(s.visible.sum())
    return hits / total if total else float("nan")


@torch.no_grad()
def predict_heatmaps(model, samples, batch_size=50):
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(samples), batch_size):
        images, _ = to_tensors(samples[i:i + batch_size], dtype)
        out.append(model(images).output.cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate_pck(model, samples, threshold_fraction=0.1, batch_size=50):
    return pck_from_heatmaps(predict_heatmaps(model, samples, batch_size), samples, threshold_fraction)


@torch.no_grad()
def token_density_report(model, samples, stage=-1, batch_size=50):
    """Tokens per unit area over detail, body and background cells of the given stage.

    A cell's density is 1 / (area of the token owning it); averaging over the
    cells of a part gives that part's tokens per base cell.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    sums = np.zeros(3)
    cells = np.zeros(3)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images, _ = to_tensors(chunk, dtype)
        tokens = model(images).stage_tokens[stage]
        areas = region_areas(tokens.region_map, tokens.num_tokens)
        cell_area = torch.gather(areas, 1, tokens.region_map.flatten(1)).reshape(tokens.region_map.shape)
        density = (1.0 / cell_area.double()).numpy()
        for d, s in zip(density, chunk):
            for part in (BACKGROUND, BODY, DETAIL):
                m = s.part_mask == part
                sums[part] += d[m].sum()
                cells[part] += m.sum()
    mean = sums / np.maximum(cells, 1)
    return {
        "background": float(mean[BACKGROUND]),
        "body": float(mean[BODY]),
        "detail": float(mean[DETAIL]),
        "detail_to_background": float(mean[DETAIL] / mean[BACKGROUND]),
    }
