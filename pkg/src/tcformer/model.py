"""TCFormer assembly: stem, token stages joined by merge blocks, and a task head."""
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import torch
import torch.nn as nn

from .blocks import Block, BlockConfig, init_weights
from .ctm import CTM, CtmConfig
from .errors import InvalidConfig, InvalidInput
from .mta import DeconvHead, MTAHead, MtaConfig
from .token_space import MergeRecord, grid_region_map, init_tokens, map_to_grid_tokens, tokens_to_map

REDUCERS = ("dpcknn", "topk", "strided")
HEADS = ("mta", "deconv", "cls")

# Stage settings (reduction ratio, heads, expansion, channels) shared by every preset.
STAGE_SETTINGS = ((8, 1, 8, 64), (4, 2, 8, 128), (2, 5, 4, 320), (1, 8, 4, 512))
PRESET_DEPTHS = {
    "light": (2, 1, 1, 1),
    "base": (3, 2, 5, 2),
    "large": (3, 7, 26, 2),
}
# Depth-wise kernel of the presets, chosen so the base preset matches the
# published 25.6M parameter count (see README, "Parameter calibration").
PRESET_DW_KERNEL = 5


@dataclass(frozen=True)
class StageConfig:
    block: BlockConfig
    depth: int = 1

    def __post_init__(self):
        if self.depth < 0:
            raise InvalidConfig(f"stage depth must be >= 0, got {self.depth}")


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple
    head: str = "mta"
    reducer: str = "dpcknn"
    cluster_fraction: float = 0.25
    k: int = 5
    input_resolution: tuple = (224, 224)
    num_classes: int = 1000
    mta: MtaConfig = field(default_factory=MtaConfig)
    stem_kernel: int = 7
    preset: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "input_resolution", tuple(self.input_resolution))
        if not self.stages:
            raise InvalidConfig("at least one stage is required")
        if self.head not in HEADS:
            raise InvalidConfig(f"head must be one of {HEADS}, got {self.head!r}")
        if self.reducer not in REDUCERS:
            raise InvalidConfig(f"reducer must be one of {REDUCERS}, got {self.reducer!r}")
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise InvalidConfig(f"stem kernel must be odd, got {self.stem_kernel}")
        self.stage_grids  # validates resolutions

    @property
    def channels(self):
        return [s.block.channels for s in self.stages]

    @property
    def base_resolution(self):
        h, w = self.input_resolution
        return h // 4, w // 4

    @property
    def stage_grids(self):
        h, w = self.input_resolution
        factor = 4 * 2 ** (len(self.stages) - 1)
        if h % factor or w % factor:
            raise InvalidConfig(f"input {self.input_resolution} must be divisible by {factor}")
        grids = [(h // (4 * 2 ** s), w // (4 * 2 ** s)) for s in range(len(self.stages))]
        for s, (g, st) in enumerate(zip(grids, self.stages)):
            r = st.block.reduction_ratio
            if g[0] % r or g[1] % r:
                raise InvalidConfig(f"stage {s + 1} grid {g} not divisible by reduction ratio {r}")
            if s > 0 and self.reducer != "strided" and (grids[s - 1][0] % r or grids[s - 1][1] % r):
                raise InvalidConfig(f"merge block {s} grid {grids[s - 1]} not divisible by {r}")
        return grids

    @property
    def ctm_configs(self):
        return [
            CtmConfig(
                inner_block=self.stages[s + 1].block,
                cluster_fraction=self.cluster_fraction,
                k=self.k,
                use_topk_centers=self.reducer == "topk",
            )
            for s in range(len(self.stages) - 1)
        ]

    def token_counts(self):
        """Token count per stage for the configured input."""
        hb, wb = self.base_resolution
        counts = [hb * wb]
        for s, cfg in enumerate(self.ctm_configs):
            if self.reducer == "strided":
                gh, gw = self.stage_grids[s + 1]
                counts.append(gh * gw)
            else:
                counts.append(cfg.num_clusters(counts[-1]))
        return counts

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stages"] = tuple(
            StageConfig(BlockConfig(**s["block"]), s.get("depth", 1)) for s in d["stages"]
        )
        if "mta" in d:
            d["mta"] = MtaConfig(**d["mta"])
        return cls(**d)


def preset(name, **overrides):
    """TCFormer-Light / TCFormer / TCFormer-Large stage layouts."""
    if name not in PRESET_DEPTHS:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(PRESET_DEPTHS)}")
    stages = tuple(
        StageConfig(BlockConfig(c, heads, e, r, PRESET_DW_KERNEL), depth)
        for (r, heads, e, c), depth in zip(STAGE_SETTINGS, PRESET_DEPTHS[name])
    )
    return ModelConfig(stages=stages, preset=name, **overrides)


def mini_config(**overrides):
    """Two-stage model used for the 64x64 synthetic keypoint task."""
    defaults = dict(
        stages=(
            StageConfig(BlockConfig(32, heads=1, expansion=4, reduction_ratio=2), depth=1),
            StageConfig(BlockConfig(64, heads=2, expansion=4, reduction_ratio=1), depth=1),
        ),
        input_resolution=(64, 64),
        mta=MtaConfig(agg_channels=32, out_channels=6, heads=1, expansion=4),
        num_classes=2,
        preset="mini",
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


@dataclass
class ModelOutput:
    stage_tokens: list
    records: list
    output: torch.Tensor


class StridedDown(nn.Module):
    """Fixed-grid stage transition: stride-2 conv, each new token owns a 2x2 block."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.norm = nn.LayerNorm(out_channels)

    def forward(self, tokens, assignment=None):
        m = self.conv(tokens_to_map(tokens))
        out = map_to_grid_tokens(m, tokens.base_resolution, tokens.stage_index + 1)
        out = out.with_features(self.norm(out.features))
        b = tokens.features.shape[0]
        groups = grid_region_map(b, tokens.grid, out.grid, device=m.device).flatten(1)
        record = MergeRecord(groups, torch.zeros_like(groups, dtype=m.dtype), out.num_tokens)
        return out, record


class TCFormer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        k = cfg.stem_kernel
        self.stem_conv = nn.Conv2d(3, ch[0], k, stride=4, padding=k // 2)
        self.stem_norm = nn.LayerNorm(ch[0])
        self.stages = nn.ModuleList(
            nn.ModuleList(Block(st.block) for _ in range(st.depth)) for st in cfg.stages
        )
        self.stage_norms = nn.ModuleList(nn.LayerNorm(c) for c in ch)
        if cfg.reducer == "strided":
            self.reducers = nn.ModuleList(StridedDown(ch[s], ch[s + 1]) for s in range(len(ch) - 1))
        else:
            self.reducers = nn.ModuleList(CTM(ch[s], c) for s, c in enumerate(cfg.ctm_configs))
        if cfg.head == "mta":
            self.head = MTAHead(ch, cfg.mta)
        elif cfg.head == "deconv":
            self.head = DeconvHead(ch[-1], len(ch) - 1, cfg.mta)
        else:
            self.head = nn.Linear(ch[-1], cfg.num_classes)
        self.apply(init_weights)

    def stem(self, images):
        if images.ndim != 4 or images.shape[1] != 3:
            raise InvalidInput(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if tuple(images.shape[-2:]) != self.cfg.input_resolution:
            raise InvalidInput(f"image size {tuple(images.shape[-2:])} != {self.cfg.input_resolution}")
        m = self.stem_conv(images)
        return self.stem_norm(m.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)

    def forward(self, images, assignments=None):
        """Run all stages. ``assignments`` (one per merge) freezes the clustering."""
        tokens = init_tokens(self.stem(images))
        stage_tokens, records = [], []
        for s, blocks in enumerate(self.stages):
            if s > 0:
                frozen = assignments[s - 1] if assignments is not None else None
                tokens, record = self.reducers[s - 1](tokens, frozen)
                records.append(record)
            for blk in blocks:
                tokens = blk(tokens)
            tokens = tokens.with_features(self.stage_norms[s](tokens.features))
            stage_tokens.append(tokens)
        if self.cfg.head == "mta":
            out = self.head(stage_tokens, records)
        elif self.cfg.head == "deconv":
            out = self.head(stage_tokens[-1])
        else:
            out = self.head(stage_tokens[-1].features.mean(dim=1))
        return ModelOutput(stage_tokens, records, out)


def build_model(cfg, seed=None, dtype=torch.float32):
    if seed is not None:
        torch.manual_seed(seed)
    return TCFormer(cfg).to(dtype)


def with_head(cfg, head):
    return replace(cfg, head=head)
