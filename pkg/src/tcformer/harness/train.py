"""Heatmap-regression training loop for the synthetic keypoint task."""
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import InvalidConfig, TrainingDiverged
from ..model import build_model
from .data import to_tensors


@dataclass(frozen=True)
class OptimizerConfig:
    steps: int = 2000
    batch_size: int = 20
    lr: float = 5e-4
    weight_decay: float = 0.01
    warmup_steps: int = 50
    min_lr_fraction: float = 0.0
    grad_clip: float = 1.0
    reshuffle: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise InvalidConfig(f"steps must be >= 0 and batch_size >= 1: {self}")

    def lr_at(self, step):
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        span = max(1, self.steps - self.warmup_steps)
        t = (step - self.warmup_steps) / span
        lo = self.lr * self.min_lr_fraction
        return lo + 0.5 * (self.lr - lo) * (1 + math.cos(math.pi * t))


@dataclass
class TrainResult:
    model: torch.nn.Module
    losses: list = field(default_factory=list)
    seconds: float = 0.0


def smoothed(losses, window=25):
    """Means of consecutive non-overlapping ``window``-step blocks."""
    n = len(losses) // window
    return np.asarray(losses[: n * window], dtype=np.float64).reshape(n, window).mean(axis=1)


def heatmap_loss(pred, target):
    return F.mse_loss(pred, target)


def batch_order(num_samples, steps, batch_size, seed, reshuffle=True):
    """Indices per step; batches never straddle epochs.

    With ``reshuffle`` each epoch is a fresh permutation, otherwise every epoch
    repeats the first one.
    """
    g = torch.Generator().manual_seed(seed)
    per_epoch = max(1, num_samples // batch_size)
    order = []
    perm = torch.randperm(num_samples, generator=g)
    while len(order) < steps:
        if order and reshuffle:
            perm = torch.randperm(num_samples, generator=g)
        for b in range(per_epoch):
            order.append(perm[b * batch_size:(b + 1) * batch_size])
    return order[:steps]


def train(model_cfg, samples, opt_cfg, model=None, freeze=False, on_step=None):
    """Fit heatmaps with AdamW. ``freeze`` disables all parameter updates."""
    torch.manual_seed(opt_cfg.seed)
    if model is None:
        model = build_model(model_cfg, seed=opt_cfg.seed)
    images, targets = to_tensors(samples)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=opt_cfg.lr, weight_decay=opt_cfg.weight_decay)
    result = TrainResult(model)
    start = time.perf_counter()
    model.train()
    for step, idx in enumerate(batch_order(len(samples), opt_cfg.steps, opt_cfg.batch_size, opt_cfg.seed,
                                             opt_cfg.reshuffle)):
        for group in opt.param_groups:
            group["lr"] = opt_cfg.lr_at(step)
        if freeze:
            with torch.no_grad():
                loss = heatmap_loss(model(images[idx]).output, targets[idx])
        else:
            loss = heatmap_loss(model(images[idx]).output, targets[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if opt_cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, opt_cfg.grad_clip)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss at step {step}",
                {"step": step, "lr": opt_cfg.lr_at(step), "recent_losses": result.losses[-10:]},
            )
        if not freeze:
            opt.step()
        result.losses.append(value)
        if on_step is not None:
            on_step(step, value)
    result.seconds = time.perf_counter() - start
    model.eval()
    return result
