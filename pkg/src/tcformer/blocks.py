"""Transformer block for irregular token sets.

Attention keys and values come from a spatially reduced map of the tokens,
and the feed-forward network mixes neighbors with a depth-wise convolution on
the stage grid. Positional information enters only through that convolution.
"""
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfig, InvalidInput
from .token_space import map_to_tokens, tokens_to_map


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    heads: int = 1
    expansion: int = 4
    reduction_ratio: int = 1
    dw_kernel: int = 3

    def __post_init__(self):
        if self.channels <= 0 or self.heads <= 0 or self.expansion <= 0:
            raise InvalidConfig(f"block sizes must be positive: {self}")
        if self.channels % self.heads:
            raise InvalidConfig(f"channels {self.channels} not divisible by heads {self.heads}")
        r = self.reduction_ratio
        if r < 1 or r & (r - 1):
            raise InvalidConfig(f"reduction ratio must be a power of two, got {r}")
        if self.dw_kernel < 1 or self.dw_kernel % 2 == 0:
            raise InvalidConfig(f"depth-wise kernel must be odd, got {self.dw_kernel}")


def init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        fan_out = module.kernel_size[0] * module.kernel_size[1] * module.out_channels // module.groups
        nn.init.normal_(module.weight, 0.0, math.sqrt(2.0 / fan_out))
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def biased_attention(q, k, v, bias=None):
    """softmax(q k^T / sqrt(d) + bias) v for (B, heads, N, d) inputs.

    ``bias`` has one entry per key, shape (B, Nk), and is shared by all heads
    and queries. Returns the output and the attention weights.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise InvalidInput(f"incompatible q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if bias is not None:
        if bias.shape[-1] != k.shape[-2]:
            raise InvalidInput(f"bias has {bias.shape[-1]} entries for {k.shape[-2]} keys")
        logits = logits + bias[:, None, None, :]
    weights = logits.softmax(dim=-1)
    return weights @ v, weights


class Attention(nn.Module):
    def __init__(self, dim, heads=1, reduction_ratio=1):
        super().__init__()
        self.heads = heads
        self.reduction_ratio = reduction_ratio
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        if reduction_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, reduction_ratio, stride=reduction_ratio)
            self.sr_norm = nn.LayerNorm(dim)

    def reduce(self, tokens):
        """Key/value features: the token set itself, or its strided-conv reduced map."""
        if self.reduction_ratio == 1:
            return tokens.features
        r = self.reduction_ratio
        gh, gw = tokens.grid
        if gh % r or gw % r:
            raise InvalidInput(f"reduction ratio {r} does not divide stage grid {(gh, gw)}")
        m = self.sr(tokens_to_map(tokens))
        return self.sr_norm(m.flatten(2).transpose(1, 2))

    def reduce_bias(self, tokens, bias):
        """Per-key bias: the per-token bias rasterized and block-averaged like the keys."""
        if self.reduction_ratio == 1:
            return bias
        m = tokens_to_map(tokens.with_features(bias.unsqueeze(-1)))
        return F.avg_pool2d(m, self.reduction_ratio).flatten(1)

    def forward(self, x, kv_tokens, bias=None, return_weights=False):
        b, nq, c = x.shape
        h = self.heads
        src = self.reduce(kv_tokens)
        if bias is not None:
            bias = self.reduce_bias(kv_tokens, bias)
        q = self.q(x).reshape(b, nq, h, c // h).transpose(1, 2)
        kv = self.kv(src).reshape(b, src.shape[1], 2, h, c // h).permute(2, 0, 3, 1, 4)
        out, weights = biased_attention(q, kv[0], kv[1], bias)
        out = self.proj(out.transpose(1, 2).reshape(b, nq, c))
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    """Pointwise expansion, depth-wise conv on the stage grid, GELU, projection back."""

    def __init__(self, dim, expansion=4, dw_kernel=3, act=nn.GELU):
        super().__init__()
        hidden = dim * expansion
        self.fc1 = nn.Linear(dim, hidden)
        self.pad = dw_kernel // 2
        self.dwconv = nn.Conv2d(hidden, hidden, dw_kernel, groups=hidden)
        self.act = act()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, tokens):
        h = self.fc1(tokens.features)
        m = tokens_to_map(tokens.with_features(h))
        # reflective borders keep a constant map constant; grids too small to reflect replicate
        mode = "reflect" if min(m.shape[-2:]) > self.pad else "replicate"
        local = self.dwconv(F.pad(m, (self.pad,) * 4, mode=mode))
        # the skip keeps per-token detail that rasterizing averages away
        h = h + map_to_tokens(local, tokens.region_map, tokens.num_tokens)
        return self.fc2(self.act(h))


class Block(nn.Module):
    """Pre-norm block: x + attn(norm(x)), then x + ffn(norm(x))."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        dim = cfg.channels
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, cfg.heads, cfg.reduction_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, cfg.expansion, cfg.dw_kernel)

    def forward(self, tokens, kv_tokens=None, bias=None):
        """Refine ``tokens``; keys/values come from ``kv_tokens`` when given (CTM refinement)."""
        x = tokens.features
        q_in = self.norm1(x)
        if kv_tokens is None:
            kv = tokens.with_features(q_in)
        else:
            kv = kv_tokens.with_features(self.norm1(kv_tokens.features))
        x = x + self.attn(q_in, kv, bias)
        x = x + self.ffn(tokens.with_features(self.norm2(x)))
        return tokens.with_features(x)

    def zero_output_projections(self):
        for layer in (self.attn.proj, self.ffn.fc2):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)
        return self
