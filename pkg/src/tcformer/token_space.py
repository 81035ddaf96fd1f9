"""Token sets with arbitrary-shaped regions and their conversion to dense maps.

A token's region is a union of *base cells*, the pixels of the stem output at
1/4 of the input resolution. Regions are stored as a dense ``region_map`` of
shape ``(B, Hb, Wb)`` whose entries are token indices, so every overlap
between a token and a map pixel is a whole number of cells.

Dense feature maps use the convolution layout ``(B, C, H, W)``.
"""
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidInput


@dataclass
class TokenSet:
    features: torch.Tensor  # (B, N, C)
    region_map: torch.Tensor  # (B, Hb, Wb), int64
    stage_index: int = 1

    @property
    def num_tokens(self):
        return self.features.shape[1]

    @property
    def base_resolution(self):
        return tuple(self.region_map.shape[-2:])

    @property
    def grid(self):
        """Nominal feature-map resolution of this token set's stage."""
        hb, wb = self.base_resolution
        f = 2 ** (self.stage_index - 1)
        return hb // f, wb // f

    def with_features(self, features):
        return TokenSet(features, self.region_map, self.stage_index)

    def validate(self):
        if self.features.ndim != 3 or self.region_map.ndim != 3:
            raise InvalidInput("features must be (B, N, C) and region_map (B, Hb, Wb)")
        if self.features.shape[0] != self.region_map.shape[0]:
            raise InvalidInput("batch size mismatch between features and region_map")
        n = self.num_tokens
        flat = self.region_map.flatten(1)
        if flat.min() < 0 or flat.max() >= n:
            raise InvalidInput("region_map entries must lie in [0, N)")
        counts = region_areas(self.region_map, n)
        if (counts == 0).any():
            raise InvalidInput("every token must own at least one base cell")
        return self


@dataclass
class MergeRecord:
    assignment: torch.Tensor  # (B, N_prev) merged-token index of each original token
    importance: torch.Tensor  # (B, N_prev)
    num_merged: int

    def validate(self):
        a = self.assignment
        if a.min() < 0 or a.max() >= self.num_merged:
            raise InvalidInput("assignment index out of range")
        hits = torch.zeros(a.shape[0], self.num_merged, dtype=torch.long, device=a.device)
        hits.scatter_add_(1, a, torch.ones_like(a))
        if (hits == 0).any():
            raise InvalidInput("assignment is not surjective onto the merged tokens")
        return self


def region_areas(region_map, num_tokens):
    """Number of base cells owned by each token, shape (B, N)."""
    flat = region_map.flatten(1)
    areas = torch.zeros(flat.shape[0], num_tokens, dtype=torch.long, device=flat.device)
    areas.scatter_add_(1, flat, torch.ones_like(flat))
    return areas


def _block_size(base, target):
    hb, wb = base
    h, w = target
    if h <= 0 or w <= 0 or hb % h or wb % w:
        raise InvalidInput(f"resolution {target} does not evenly divide base {base}")
    return hb // h, wb // w


def tokens_to_map(tokens, resolution=None):
    """Rasterize tokens; each pixel averages the tokens it overlaps, weighted by cell count."""
    resolution = tuple(resolution or tokens.grid)
    bh, bw = _block_size(tokens.base_resolution, resolution)
    x = tokens.features
    b, _, c = x.shape
    hb, wb = tokens.base_resolution
    idx = tokens.region_map.reshape(b, hb * wb, 1).expand(-1, -1, c)
    cells = torch.gather(x, 1, idx).transpose(1, 2).reshape(b, c, hb, wb)
    if (bh, bw) == (1, 1):
        return cells
    return F.avg_pool2d(cells, (bh, bw))


def map_to_tokens(fmap, region_map, num_tokens):
    """Average map pixels over each token's region, weighted by cell count."""
    b, c, h, w = fmap.shape
    hb, wb = region_map.shape[-2:]
    bh, bw = _block_size((hb, wb), (h, w))
    if (bh, bw) != (1, 1):
        fmap = fmap.repeat_interleave(bh, dim=2).repeat_interleave(bw, dim=3)
    cells = fmap.reshape(b, c, hb * wb).transpose(1, 2)
    flat = region_map.reshape(b, hb * wb)
    sums = fmap.new_zeros(b, num_tokens, c).scatter_add(1, flat.unsqueeze(-1).expand(-1, -1, c), cells)
    areas = region_areas(region_map, num_tokens).to(fmap.dtype)
    return sums / areas.clamp(min=1).unsqueeze(-1)


def grid_region_map(batch, base, grid, device=None):
    """Region map of a regular grid: each grid pixel owns an axis-aligned block of cells."""
    hb, wb = base
    gh, gw = grid
    bh, bw = _block_size(base, grid)
    rows = torch.arange(hb, device=device) // bh
    cols = torch.arange(wb, device=device) // bw
    ids = rows[:, None] * gw + cols[None, :]
    return ids.unsqueeze(0).expand(batch, -1, -1).contiguous()


def init_tokens(stem_map, stage_index=1):
    """Every pixel of a base-resolution map becomes one token owning one cell."""
    if stem_map.ndim != 4:
        raise InvalidInput(f"expected (B, C, H, W) map, got shape {tuple(stem_map.shape)}")
    b, c, h, w = stem_map.shape
    features = stem_map.flatten(2).transpose(1, 2)
    region_map = grid_region_map(b, (h, w), (h, w), device=stem_map.device)
    return TokenSet(features, region_map, stage_index)


def map_to_grid_tokens(fmap, base, stage_index):
    """Tokenize a coarse map: pixel ``i`` becomes a token owning its block of base cells."""
    b, c, h, w = fmap.shape
    features = fmap.flatten(2).transpose(1, 2)
    region_map = grid_region_map(b, base, (h, w), device=fmap.device)
    return TokenSet(features, region_map, stage_index)


def merge_regions(region_map, assignment, num_merged=None):
    """Remap cells through ``assignment``: a merged region is the union of its members."""
    if num_merged is not None:
        MergeRecord(assignment, assignment, num_merged).validate()
    b = region_map.shape[0]
    return torch.gather(assignment, 1, region_map.reshape(b, -1)).reshape(region_map.shape)

