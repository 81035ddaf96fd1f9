"""Run configuration: a YAML document with model/ctm/head/data/train/output sections.

Defaults (every key optional)::

    model:  {preset: mini, stages: null, agg_channels: 32}
    ctm:    {fraction: 0.25, k: 5, mode: dpcknn}      # mode: dpcknn | topk | strided
    head:   mta                                       # mta | deconv | cls
    data:   {seed: 0, count: 500, eval_seed: 1, eval_count: 100, resolution: 64}
    train:  {steps: 2000, lr: 0.0005, weight_decay: 0.01, batch_size: 20, warmup_steps: 50,
             reshuffle: false, seed: 0}
    output: runs/default

``model.stages`` may replace the preset with explicit stages, each a mapping
with ``channels``, ``heads``, ``expansion``, ``reduction_ratio``, ``depth`` and
optional ``dw_kernel``.
"""
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import yaml

from .blocks import BlockConfig
from .errors import InvalidConfig
from .harness.data import NUM_KEYPOINTS
from .harness.train import OptimizerConfig
from .model import ModelConfig, StageConfig, mini_config, preset
from .mta import MtaConfig


@dataclass
class ModelSection:
    preset: str = "mini"
    stages: Optional[list] = None
    agg_channels: int = 32


@dataclass
class CtmSection:
    fraction: float = 0.25
    k: int = 5
    mode: str = "dpcknn"


@dataclass
class DataSection:
    seed: int = 0
    count: int = 500
    eval_seed: int = 1
    eval_count: int = 100
    resolution: int = 64


@dataclass
class TrainSection:
    steps: int = 2000
    lr: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 20
    warmup_steps: int = 50
    reshuffle: bool = False
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    ctm: CtmSection = field(default_factory=CtmSection)
    head: str = "mta"
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    output: str = "runs/default"

    def model_config(self):
        res = (self.data.resolution, self.data.resolution)
        mta = MtaConfig(agg_channels=self.model.agg_channels, out_channels=NUM_KEYPOINTS)
        common = dict(head=self.head, reducer=self.ctm.mode, cluster_fraction=self.ctm.fraction,
                      k=self.ctm.k, input_resolution=res, mta=mta)
        if self.model.stages:
            stages = []
            for i, s in enumerate(self.model.stages):
                s = dict(s)
                depth = s.pop("depth", 1)
                try:
                    stages.append(StageConfig(BlockConfig(**s), depth))
                except TypeError as e:
                    raise InvalidConfig(f"model.stages[{i}]: {e}") from None
            return ModelConfig(stages=tuple(stages), preset=None, **common)
        if self.model.preset == "mini":
            return mini_config(**common)
        return preset(self.model.preset, **common)

    def optimizer_config(self):
        t = self.train
        return OptimizerConfig(steps=t.steps, batch_size=t.batch_size, lr=t.lr,
                               weight_decay=t.weight_decay, warmup_steps=t.warmup_steps,
                               reshuffle=t.reshuffle, seed=t.seed)

    def to_dict(self):
        return asdict(self)


_SECTIONS = {"model": ModelSection, "ctm": CtmSection, "data": DataSection, "train": TrainSection}


def _build_section(cls, values, name):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise InvalidConfig(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise InvalidConfig(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**values)


def from_dict(d):
    d = dict(d or {})
    unknown = set(d) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise InvalidConfig(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {name: _build_section(cls, d.get(name), name) for name, cls in _SECTIONS.items()}
    for key in ("head", "output"):
        if key in d:
            kwargs[key] = d[key]
    return RunConfig(**kwargs)


def load(path):
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise InvalidConfig(f"{path}: {e}") from None
    return from_dict(doc)


def apply_overrides(cfg, seed=None, out=None, preset_name=None, head=None, ctm=None):
    """Command-line flags take precedence over the file."""
    if seed is not None:
        cfg = replace(cfg, data=replace(cfg.data, seed=seed), train=replace(cfg.train, seed=seed))
    if out is not None:
        cfg = replace(cfg, output=out)
    if preset_name is not None:
        cfg = replace(cfg, model=replace(cfg.model, preset=preset_name, stages=None))
    if head is not None:
        cfg = replace(cfg, head=head)
    if ctm is not None:
        cfg = replace(cfg, ctm=replace(cfg.ctm, mode=ctm))
    return cfg


def dump(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
