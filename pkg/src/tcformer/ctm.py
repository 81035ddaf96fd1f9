"""Clustering-based token merge: cluster, importance-weighted merge, biased refinement."""
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import dpc_knn
from .blocks import Block, BlockConfig
from .errors import InvalidConfig, InvalidInput
from .token_space import MergeRecord, TokenSet, map_to_tokens, merge_regions, tokens_to_map


@dataclass(frozen=True)
class CtmConfig:
    inner_block: BlockConfig = field(default_factory=lambda: BlockConfig(channels=64))
    cluster_fraction: float = 0.25
    k: int = dpc_knn.DEFAULT_K
    use_topk_centers: bool = False

    def __post_init__(self):
        if not 0 < self.cluster_fraction <= 1:
            raise InvalidConfig(f"cluster_fraction must be in (0, 1], got {self.cluster_fraction}")
        if self.k < 1:
            raise InvalidConfig(f"k must be positive, got {self.k}")

    def num_clusters(self, num_tokens):
        m = math.ceil(num_tokens * self.cluster_fraction)
        if not 1 <= m <= num_tokens:
            raise InvalidConfig(f"{m} clusters for {num_tokens} tokens")
        return m


def merge_features(x, assignment, importance, num_merged):
    """Per-cluster softmax(importance)-weighted average of token features."""
    b, n, c = x.shape
    counts = torch.zeros(b, num_merged, dtype=torch.long, device=x.device)
    counts.scatter_add_(1, assignment, torch.ones_like(assignment))
    if (counts == 0).any():
        raise RuntimeError("empty cluster: assignment must be surjective")
    peak = torch.full((b, num_merged), -torch.inf, dtype=importance.dtype, device=x.device)
    peak = peak.scatter_reduce(1, assignment, importance.detach(), reduce="amax")
    w = torch.exp(importance - torch.gather(peak, 1, assignment))
    num = x.new_zeros(b, num_merged, c).scatter_add(1, assignment.unsqueeze(-1).expand(-1, -1, c), w.unsqueeze(-1) * x)
    den = w.new_zeros(b, num_merged).scatter_add(1, assignment, w)
    return num / den.unsqueeze(-1)


def gram_sq_distances(x):
    """Pairwise squared distances via |a|^2 + |b|^2 - 2ab in double precision."""
    x = x.detach().double()
    sq = (x * x).sum(-1)
    d = sq.unsqueeze(-1) + sq.unsqueeze(-2) - 2.0 * x @ x.transpose(-2, -1)
    d = d.clamp_min(0.0)
    d.diagonal(dim1=-2, dim2=-1).zero_()
    return d.numpy()


class CTM(nn.Module):
    def __init__(self, in_channels, cfg):
        super().__init__()
        self.cfg = cfg
        out = cfg.inner_block.channels
        self.in_channels = in_channels
        if in_channels != out:
            self.conv = nn.Conv2d(in_channels, out, 3, padding=1)
            self.skip = nn.Linear(in_channels, out)
            self.norm = nn.LayerNorm(out)
        self.score = nn.Linear(out, 1)
        self.block = Block(cfg.inner_block)
        self.last_cluster_seconds = 0.0

    def project(self, tokens):
        if self.in_channels == self.cfg.inner_block.channels:
            return tokens
        x = self.skip(tokens.features)
        x = x + map_to_tokens(self.conv(tokens_to_map(tokens)), tokens.region_map, tokens.num_tokens)
        return tokens.with_features(self.norm(x))

    def importance(self, x):
        return self.score(x).squeeze(-1)

    def cluster(self, x, importance, num_merged):
        """Hard cluster assignment (center rank per token); carries no gradient."""
        sq = gram_sq_distances(x)
        if self.cfg.use_topk_centers:
            p = importance.detach().cpu().numpy()
            centers = np.argsort(-p, axis=-1, kind="stable")[..., :num_merged]
            assignment = dpc_knn.assign_from_sq(sq, centers)
        else:
            assignment = dpc_knn.cluster_from_sq(sq, num_merged, self.cfg.k).assignment
        return torch.from_numpy(np.ascontiguousarray(assignment)).to(x.device)

    def forward(self, tokens, assignment=None):
        """Merge ``tokens`` into ``ceil(N * fraction)`` tokens of the next stage.

        Passing ``assignment`` skips clustering, which freezes the partition
        for finite-difference checks.
        """
        if tokens.num_tokens < 2:
            raise InvalidInput("CTM needs at least 2 tokens")
        src = self.project(tokens)
        x = src.features
        p = self.importance(x)
        m = self.cfg.num_clusters(tokens.num_tokens)
        start = time.perf_counter()
        if assignment is None:
            assignment = self.cluster(x, p, m)
        y = merge_features(x, assignment, p, m)
        region = merge_regions(tokens.region_map, assignment)
        self.last_cluster_seconds = time.perf_counter() - start
        merged = TokenSet(y, region, tokens.stage_index + 1)
        out = self.block(merged, kv_tokens=src, bias=p)
        return out, MergeRecord(assignment, p, m)
