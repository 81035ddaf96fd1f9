"""Central finite-difference gradient checks in double precision."""
from dataclasses import dataclass

import torch
import torch.nn as nn

from ..blocks import Block, BlockConfig
from ..ctm import CTM, CtmConfig
from ..model import StageConfig, build_model, mini_config
from ..mta import MTAHead, MtaConfig
from ..token_space import MergeRecord, TokenSet, merge_regions

TOLERANCE = 1e-5


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_tensor: list

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def _entries(numel, limit, gen):
    if limit is None or numel <= limit:
        return torch.arange(numel)
    return torch.randperm(numel, generator=gen)[:limit]


def grad_check(loss_fn, tensors, eps=1e-4, max_entries=None, seed=0, corrupt=False):
    """Compare autograd against central differences of the scalar ``loss_fn()``.

    The error of one tensor is ``max|analytic - numeric| / scale`` over the
    checked entries, where ``scale`` is the larger of that tensor's largest
    analytic or numeric entry and ``1e-6`` times the largest analytic entry of
    any tensor. The floor keeps tensors whose true gradient is exactly zero
    (shift-invariant directions) from dividing roundoff by roundoff. The
    result reports the worst tensor.

    In double precision the default step keeps roundoff (about 1e-16 / eps)
    and truncation (about eps^2) both well under 1e-7 for these modules.
    ``max_entries`` caps how many entries per tensor are perturbed, and
    ``corrupt`` skews the analytic gradient as a negative control.
    """
    tensors = list(tensors)
    analytic = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    floor = 1e-6 * max((g.abs().max().item() for g in analytic if g is not None), default=0.0)
    errors = []
    for t, g in zip(tensors, analytic):
        g = torch.zeros_like(t) if g is None else g.detach().clone()
        if corrupt:
            g = g * 1.1 + 1e-3 * g.abs().max()
        flat, gflat = t.data.view(-1), g.view(-1)
        idx = _entries(flat.numel(), max_entries, gen)
        num = torch.empty(len(idx), dtype=t.dtype)
        with torch.no_grad():
            for n, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                num[n] = (up - down) / (2 * eps)
        ana = gflat[idx]
        scale = max(ana.abs().max().item(), num.abs().max().item(), floor, 1e-30)
        errors.append((ana - num).abs().max().item() / scale)
    return GradCheckResult(max(errors) if errors else 0.0, errors)


def _weighted_sum(out, seed):
    w = torch.randn(out.shape, generator=torch.Generator().manual_seed(seed), dtype=out.dtype)
    return (out * w).sum()


def random_partition(num_cells, num_tokens, gen, batch=1):
    """Random surjective map from cells to tokens, shape (batch, num_cells)."""
    maps = []
    for _ in range(batch):
        a = torch.cat([torch.arange(num_tokens), torch.randint(num_tokens, (num_cells - num_tokens,), generator=gen)])
        maps.append(a[torch.randperm(num_cells, generator=gen)])
    return torch.stack(maps)


def irregular_tokens(num_tokens, channels, base=(8, 8), stage_index=2, seed=0, batch=1):
    gen = torch.Generator().manual_seed(seed)
    region = random_partition(base[0] * base[1], num_tokens, gen, batch).reshape(batch, *base)
    x = torch.randn(batch, num_tokens, channels, generator=gen, dtype=torch.float64)
    return TokenSet(x, region, stage_index)


def _check_linear(seed, **kw):
    torch.manual_seed(seed)
    layer = nn.Linear(5, 3).double()
    x = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
    return grad_check(lambda: _weighted_sum(layer(x), seed), [x, *layer.parameters()], **kw)


def _check_block(seed, depth=2, num_tokens=12, **kw):
    torch.manual_seed(seed)
    cfg = BlockConfig(8, heads=2, expansion=2, reduction_ratio=2)
    blocks = nn.Sequential(*[Block(cfg) for _ in range(depth)]).double()
    tokens = irregular_tokens(num_tokens, 8, seed=seed)
    x = tokens.features.requires_grad_(True)

    def loss():
        t = tokens.with_features(x)
        for blk in blocks:
            t = blk(t)
        return _weighted_sum(t.features, seed)

    return grad_check(loss, [x, *blocks.parameters()], **kw)


def _check_ctm(seed, **kw):
    torch.manual_seed(seed)
    cfg = CtmConfig(inner_block=BlockConfig(8, heads=2, expansion=2, reduction_ratio=2))
    ctm = CTM(6, cfg).double()
    tokens = irregular_tokens(16, 6, base=(4, 4), stage_index=1, seed=seed)
    x = tokens.features.requires_grad_(True)
    _, record = ctm(tokens)
    frozen = record.assignment

    def loss():
        out, _ = ctm(tokens.with_features(x), assignment=frozen)
        return _weighted_sum(out.features, seed)

    return grad_check(loss, [x, *ctm.parameters()], **kw)


def _check_mta(seed, **kw):
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    head = MTAHead([6, 8], MtaConfig(agg_channels=8, out_channels=3, heads=2, expansion=2)).double()
    fine = irregular_tokens(16, 6, base=(4, 4), stage_index=1, seed=seed)
    fine = TokenSet(fine.features, torch.arange(16).reshape(1, 4, 4), 1)
    assignment = random_partition(16, 4, gen)
    coarse = TokenSet(torch.randn(1, 4, 8, generator=gen, dtype=torch.float64),
                      merge_regions(fine.region_map, assignment), 2)
    record = MergeRecord(assignment, torch.zeros(1, 16, dtype=torch.float64), 4)
    xs = [fine.features.requires_grad_(True), coarse.features.requires_grad_(True)]

    def loss():
        out = head([fine.with_features(xs[0]), coarse.with_features(xs[1])], [record])
        return _weighted_sum(out, seed)

    return grad_check(loss, [*xs, *head.parameters()], **kw)


def _tiny_model_cfg(head):
    return mini_config(
        stages=(
            StageConfig(BlockConfig(8, heads=1, expansion=2, reduction_ratio=2), depth=1),
            StageConfig(BlockConfig(16, heads=2, expansion=2, reduction_ratio=1), depth=1),
        ),
        input_resolution=(32, 32),
        mta=MtaConfig(agg_channels=8, out_channels=2, heads=1, expansion=2),
        head=head,
    )


def _check_stem(seed, **kw):
    model = build_model(_tiny_model_cfg("cls"), seed=seed, dtype=torch.float64)
    img = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    img.requires_grad_(True)
    params = [img, *model.stem_conv.parameters(), *model.stem_norm.parameters()]
    return grad_check(lambda: _weighted_sum(model.stem(img), seed), params, **kw)


def _check_full_model(head):
    def check(seed, **kw):
        model = build_model(_tiny_model_cfg(head), seed=seed, dtype=torch.float64)
        img = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        frozen = [r.assignment for r in model(img).records]
        kw.setdefault("max_entries", 8)
        return grad_check(lambda: _weighted_sum(model(img, frozen).output, seed), list(model.parameters()), **kw)

    return check


def _check_corrupted(seed, **kw):
    return _check_linear(seed, corrupt=True, **kw)


MODULE_CHECKS = {
    "linear": _check_linear,
    "block": _check_block,
    "ctm": _check_ctm,
    "mta": _check_mta,
    "stem": _check_stem,
    "classifier": _check_full_model("cls"),
    "model": _check_full_model("mta"),
    "corrupted": _check_corrupted,
}


def check_module(name, seed=0, **kw):
    if name not in MODULE_CHECKS:
        raise KeyError(name)
    return MODULE_CHECKS[name](seed, **kw)
