"""Closed-form parameter and FLOP counts.

FLOPs follow the convention of the published model tables (one fused
multiply-add counts as one FLOP):

* linear layer on ``n`` tokens: ``n * c_in * c_out``
* convolution: ``output_pixels * (c_in / groups) * c_out * k * k``
* attention: ``2 * n_queries * n_keys * channels`` (scores plus weighted sum)
* clustering: ``N^2 * channels`` for the pairwise distances
* merging: ``N * channels`` for the weighted sums

Normalization, activations, softmax and token/map rasterization are treated
as free. Use ``multiply_adds=False`` to count a multiply and an add separately.
"""
from collections import OrderedDict

from .model import ModelConfig


def _linear(i, o, bias=True):
    return i * o + (o if bias else 0)


def _conv(i, o, k, groups=1, bias=True):
    return i // groups * o * k * k + (o if bias else 0)


def _norm(c):
    return 2 * c


def block_params(bc):
    c, h = bc.channels, bc.channels * bc.expansion
    p = 2 * _norm(c) + _linear(c, c) + _linear(c, 2 * c) + _linear(c, c)
    if bc.reduction_ratio > 1:
        p += _conv(c, c, bc.reduction_ratio) + _norm(c)
    p += _linear(c, h) + _conv(h, h, bc.dw_kernel, groups=h) + _linear(h, c)
    return p


def param_breakdown(cfg: ModelConfig):
    ch = cfg.channels
    out = OrderedDict()
    out["stem"] = _conv(3, ch[0], cfg.stem_kernel) + _norm(ch[0])
    for s, st in enumerate(cfg.stages):
        if s > 0:
            ci, co = ch[s - 1], ch[s]
            if cfg.reducer == "strided":
                out[f"down{s}"] = _conv(ci, co, 3) + _norm(co)
            else:
                proj = _conv(ci, co, 3) + _linear(ci, co) + _norm(co) if ci != co else 0
                out[f"ctm{s}"] = proj + _linear(co, 1) + block_params(st.block)
        out[f"stage{s + 1}"] = st.depth * block_params(st.block) + _norm(ch[s])
    if cfg.head == "cls":
        out["head"] = _linear(ch[-1], cfg.num_classes)
    elif cfg.head == "mta":
        a = cfg.mta.agg_channels
        out["head"] = (
            sum(_linear(c, a) for c in ch)
            + (len(ch) - 1) * block_params(cfg.mta.level_block)
            + _linear(a, cfg.mta.out_channels)
        )
    else:
        a = cfg.mta.agg_channels
        p, c = 0, ch[-1]
        for _ in range(len(ch) - 1):
            p += _conv(c, a, 4, bias=False) + 2 * a
            c = a
        out["head"] = p + _conv(c, cfg.mta.out_channels, 1)
    return out


def param_count(cfg):
    return sum(param_breakdown(cfg).values())


def _block_flops(bc, n_q, q_grid, kv_tokens, kv_grid):
    c, h = bc.channels, bc.channels * bc.expansion
    r = bc.reduction_ratio
    if r > 1:
        n_k = (kv_grid[0] // r) * (kv_grid[1] // r)
        sr = n_k * c * c * r * r
    else:
        n_k, sr = kv_tokens, 0
    attn = n_q * c * c + n_k * 2 * c * c + sr + 2 * n_q * n_k * c + n_q * c * c
    ffn = n_q * c * h + q_grid[0] * q_grid[1] * h * bc.dw_kernel**2 + n_q * h * c
    return attn + ffn


def flop_breakdown(cfg: ModelConfig, resolution=None, multiply_adds=True):
    if resolution is not None and tuple(resolution) != cfg.input_resolution:
        cfg = ModelConfig(**{**cfg.__dict__, "input_resolution": tuple(resolution)})
    ch = cfg.channels
    grids = cfg.stage_grids
    counts = cfg.token_counts()
    hb, wb = cfg.base_resolution
    out = OrderedDict()
    out["stem"] = hb * wb * 3 * ch[0] * cfg.stem_kernel**2
    for s, st in enumerate(cfg.stages):
        g, n = grids[s], counts[s]
        if s > 0:
            gp, n_prev, ci, co = grids[s - 1], counts[s - 1], ch[s - 1], ch[s]
            if cfg.reducer == "strided":
                out[f"down{s}"] = g[0] * g[1] * ci * co * 9
            else:
                proj = gp[0] * gp[1] * ci * co * 9 + n_prev * ci * co if ci != co else 0
                out[f"ctm{s}"] = proj + n_prev * co + _block_flops(st.block, n, g, n_prev, gp)
                out[f"cluster{s}"] = n_prev * n_prev * co
                out[f"merge{s}"] = n_prev * co
        out[f"stage{s + 1}"] = st.depth * _block_flops(st.block, n, g, n, g)
    if cfg.head == "cls":
        out["head"] = ch[-1] * cfg.num_classes
    elif cfg.head == "mta":
        a = cfg.mta.agg_channels
        f = sum(counts[s] * ch[s] * a for s in range(len(ch)))
        for s in range(len(ch) - 1):
            f += _block_flops(cfg.mta.level_block, counts[s], grids[s], counts[s], grids[s])
        out["head"] = f + hb * wb * a * cfg.mta.out_channels
    else:
        a = cfg.mta.agg_channels
        f, c = 0, ch[-1]
        for s in range(len(ch) - 2, -1, -1):
            # each input pixel scatters a 4x4 kernel window
            gh, gw = grids[s + 1]
            f += gh * gw * c * a * 16
            c = a
        out["head"] = f + hb * wb * a * cfg.mta.out_channels
    if not multiply_adds:
        out = OrderedDict((k, 2 * v) for k, v in out.items())
    return out


def flop_count(cfg, resolution=None, multiply_adds=True):
    return sum(flop_breakdown(cfg, resolution, multiply_adds).values())
