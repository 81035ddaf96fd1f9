"""Multi-stage token aggregation head, plus the deconvolution baseline head."""
from dataclasses import dataclass

import torch
import torch.nn as nn

from .blocks import Block, BlockConfig
from .errors import InvalidConfig, InvalidInput
from .token_space import tokens_to_map


@dataclass(frozen=True)
class MtaConfig:
    agg_channels: int = 64
    out_channels: int = 17
    heads: int = 1
    expansion: int = 4
    dw_kernel: int = 3

    def __post_init__(self):
        if self.agg_channels <= 0 or self.out_channels <= 0:
            raise InvalidConfig(f"head widths must be positive: {self}")

    @property
    def level_block(self):
        # keys are the full token set at every level
        return BlockConfig(self.agg_channels, self.heads, self.expansion, 1, self.dw_kernel)


def upsample_tokens(merged_features, record):
    """Gather: original token ``i`` receives merged token ``record.assignment[i]``."""
    a = record.assignment
    if a.min() < 0 or a.max() >= merged_features.shape[1]:
        raise IndexError("merge record points outside the merged token set")
    c = merged_features.shape[-1]
    return torch.gather(merged_features, 1, a.unsqueeze(-1).expand(-1, -1, c))


def tokens_to_cells(tokens):
    """Reshape one-token-per-cell tokens to a (B, C, Hb, Wb) map."""
    b, n, c = tokens.features.shape
    hb, wb = tokens.base_resolution
    identity = torch.arange(hb * wb, device=tokens.region_map.device).reshape(hb, wb)
    if n != hb * wb or not torch.equal(tokens.region_map, identity.expand_as(tokens.region_map)):
        raise InvalidInput("final tokens must correspond one-to-one with base cells")
    return tokens.features.transpose(1, 2).reshape(b, c, hb, wb)


class MTAHead(nn.Module):
    def __init__(self, stage_channels, cfg):
        super().__init__()
        self.cfg = cfg
        self.lateral = nn.ModuleList(nn.Linear(c, cfg.agg_channels) for c in stage_channels)
        self.blocks = nn.ModuleList(Block(cfg.level_block) for _ in stage_channels[:-1])
        self.out = nn.Linear(cfg.agg_channels, cfg.out_channels)

    def forward(self, stage_tokens, records):
        if len(records) != len(stage_tokens) - 1 or len(stage_tokens) != len(self.lateral):
            raise InvalidInput(f"{len(stage_tokens)} stages need {len(stage_tokens) - 1} merge records")
        x = self.lateral[-1](stage_tokens[-1].features)
        for s in range(len(stage_tokens) - 2, -1, -1):
            tokens = stage_tokens[s]
            if records[s].assignment.shape[1] != tokens.num_tokens:
                raise InvalidInput(f"merge record {s} does not match stage {s + 1} token count")
            x = upsample_tokens(x, records[s]) + self.lateral[s](tokens.features)
            x = self.blocks[s](tokens.with_features(x)).features
        cells = tokens_to_cells(stage_tokens[0].with_features(x))
        return self.out(cells.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class DeconvHead(nn.Module):
    """Rasterize the last stage, then stride-2 transposed convs up to base resolution."""

    def __init__(self, in_channels, num_upsamples, cfg):
        super().__init__()
        layers = []
        c = in_channels
        for _ in range(num_upsamples):
            layers += [
                nn.ConvTranspose2d(c, cfg.agg_channels, 4, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(cfg.agg_channels),
                nn.ReLU(inplace=True),
            ]
            c = cfg.agg_channels
        self.deconv = nn.Sequential(*layers)
        self.out = nn.Conv2d(c, cfg.out_channels, 1)

    def forward(self, last_tokens):
        return self.out(self.deconv(tokens_to_map(last_tokens)))
