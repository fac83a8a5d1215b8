"""Pre-LN Transformer encoder with clipped relative-position attention biases.

One parameterisation serves the tokenizer encoder, the decoder, the acoustic
model and the task model; only the EncoderConfig differs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class EncoderConfig:
    hidden: int
    intermediate: int
    heads: int
    layers: int
    max_relative_distance: int = 64
    input_width: int = 256

    def __post_init__(self):
        for name in ("hidden", "intermediate", "heads", "layers", "max_relative_distance", "input_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")


# (hidden, intermediate, heads, layers)
TABLE1 = {
    "tokenizer": (128, 512, 4, 6),
    "decoder": (128, 512, 4, 2),
    "acoustic": (384, 1536, 4, 6),
    "task": (384, 1536, 4, 1),
}


def make_config(module_name: str, input_width: int = 256, max_relative_distance: int = 64, **overrides) -> EncoderConfig:
    try:
        hidden, inter, heads, layers = TABLE1[module_name]
    except KeyError:
        raise ConfigError(f"unknown module {module_name!r}; expected one of {sorted(TABLE1)}") from None
    cfg = EncoderConfig(hidden, inter, heads, layers, max_relative_distance, input_width)
    return replace(cfg, **overrides) if overrides else cfg


def relative_index(i, j, k: int):
    """Table row for query position i attending to key position j: clip(j - i, -k, k) + k."""
    if isinstance(i, torch.Tensor) or isinstance(j, torch.Tensor):
        return torch.clamp(j - i, -k, k) + k
    return max(-k, min(k, j - i)) + k


def _trunc_normal_(t: torch.Tensor, std: float = 0.02) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


def locality_slopes(heads: int) -> torch.Tensor:
    """Geometric per-head slopes 2^(-8(h+1)/H), the ALiBi schedule."""
    return torch.tensor([2.0 ** (-8.0 * (h + 1) / heads) for h in range(heads)])


def init_locality_bias_(table: torch.Tensor, k: int) -> torch.Tensor:
    """Start each head's relative table at -slope * |distance|.

    Zero-filled masked patches all produce the same query, so relative
    position is the only thing separating them. With a flat table the first
    layer's attention collapses onto one content key and never localises; a
    distance penalty gives every position a different view from step 0.
    """
    dist = torch.arange(-k, k + 1, dtype=table.dtype).abs()
    with torch.no_grad():
        table.copy_(-locality_slopes(table.shape[0]).to(table.dtype)[:, None] * dist)
    return table


class RelativeSelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int, max_distance: int):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.k = max_distance
        self.q = nn.Linear(hidden, hidden)
        self.k_proj = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, hidden)
        self.rel_bias = nn.Parameter(torch.zeros(heads, 2 * max_distance + 1))

    def relative_bias(self, n: int) -> torch.Tensor:
        pos = torch.arange(n, device=self.rel_bias.device)
        idx = relative_index(pos[:, None], pos[None, :], self.k)
        return self.rel_bias[:, idx]  # (heads, n, n)

    def forward(self, x, pad_mask=None, need_weights=False):
        b, n, d = x.shape
        q = self.q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        logits = logits + self.relative_bias(n)
        if pad_mask is not None:
            logits = logits.masked_fill(pad_mask[:, None, None, :], torch.finfo(logits.dtype).min)
        attn = logits.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        y = self.out(y)
        if need_weights:
            return y, logits, attn
        return y, None, None


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.hidden)
        self.attn = RelativeSelfAttention(cfg.hidden, cfg.heads, cfg.max_relative_distance)
        self.norm2 = nn.LayerNorm(cfg.hidden)
        self.ff1 = nn.Linear(cfg.hidden, cfg.intermediate)
        self.ff2 = nn.Linear(cfg.intermediate, cfg.hidden)

    def forward(self, x, pad_mask=None, need_weights=False):
        a, logits, attn = self.attn(self.norm1(x), pad_mask, need_weights)
        x = x + a
        x = x + self.ff2(F.gelu(self.ff1(self.norm2(x))))
        return x, logits, attn


class Encoder(nn.Module):
    """Input projection -> L pre-LN relative-attention blocks -> final LayerNorm.

    Accepts (N, input_width) or (B, N, input_width); ``pad_mask`` is a bool
    tensor (B, N), True where the position is padding.
    """

    def __init__(self, cfg: EncoderConfig, check_finite: bool = True):
        super().__init__()
        self.cfg = cfg
        self.check_finite = check_finite
        self.embed = nn.Linear(cfg.input_width, cfg.hidden)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.hidden)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _trunc_normal_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, RelativeSelfAttention):
                init_locality_bias_(m.rel_bias, m.k)

    def forward(self, tokens: torch.Tensor, pad_mask: torch.Tensor | None = None, return_attention: bool = False):
        squeeze = tokens.dim() == 2
        if squeeze:
            tokens = tokens.unsqueeze(0)
            if pad_mask is not None:
                pad_mask = pad_mask.unsqueeze(0)
        if tokens.shape[-1] != self.cfg.input_width:
            raise ConfigError(f"token width {tokens.shape[-1]} != encoder input width {self.cfg.input_width}")
        if tokens.shape[1] < 1:
            raise ConfigError("encoder needs at least one token")
        x = self.embed(tokens)
        trace = []
        for i, layer in enumerate(self.layers):
            x, logits, attn = layer(x, pad_mask, return_attention)
            if self.check_finite and not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after encoder layer {i}")
            if return_attention:
                trace.append((logits, attn))
        x = self.norm(x)
        if squeeze:
            x = x.squeeze(0)
        if return_attention:
            return x, trace
        return x
