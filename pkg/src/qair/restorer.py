"""Four-level U-shaped restoration branch built from transposed-attention blocks.

Encoder levels use plain transformer blocks (MDTA + GDFN). The latent level
and the decoder use enhanced blocks whose attention is a guidance-conditioned
cross attention (PGCA) followed by the GDFN.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError


@dataclass
class RestorerConfig:
    base_channels: int = 48
    blocks: list = field(default_factory=lambda: [4, 6, 6, 8])
    heads: list = field(default_factory=lambda: [1, 2, 4, 8])
    width_scale: float = 1.0
    ffn_expansion: float = 2.66
    bias: bool = False

    def __post_init__(self):
        if len(self.blocks) != 4 or len(self.heads) != 4:
            raise ConfigError("blocks and heads must each list 4 levels")
        for ch, h in zip(self.channels, self.heads):
            if h < 1 or ch % h:
                raise ConfigError(f"heads={h} does not divide channels={ch}")

    @property
    def width(self) -> int:
        return max(1, int(round(self.base_channels * self.width_scale)))

    @property
    def channels(self) -> list[int]:
        return [self.width * 2**i for i in range(4)]


def to_3d(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


def to_4d(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return x.transpose(1, 2).reshape(x.shape[0], -1, h, w)


class LayerNorm2d(nn.Module):
    """LayerNorm over channels at every pixel (with bias)."""

    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        h, w = x.shape[-2:]
        return to_4d(F.layer_norm(to_3d(x), (x.shape[1],), self.weight, self.bias, 1e-5), h, w)


def _transposed_attention(q, k, v, heads: int, temperature: torch.Tensor, *, divide: bool = False):
    """Channel-wise attention. ``q, k, v``: [B, C, H, W]; returns output and attention."""
    b, c, h, w = q.shape
    q = F.normalize(q.reshape(b, heads, c // heads, h * w), dim=-1)
    k = F.normalize(k.reshape(b, heads, c // heads, h * w), dim=-1)
    v = v.reshape(b, heads, c // heads, h * w)
    logits = q @ k.transpose(-2, -1)
    logits = logits / temperature if divide else logits * temperature
    attn = logits.softmax(dim=-1)
    return (attn @ v).reshape(b, c, h, w), attn


class MDTA(nn.Module):
    """Multi-Dconv head transposed attention."""

    def __init__(self, dim: int, heads: int, bias: bool = False):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"heads={heads} does not divide channels={dim}")
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, 1, bias=bias)
        self.qkv_dwconv = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3, bias=bias)
        self.project_out = nn.Conv2d(dim, dim, 1, bias=bias)
        self.record_attention = False
        self.last_attention: torch.Tensor | None = None

    def forward(self, x):
        q, k, v = self.qkv_dwconv(self.qkv(x)).chunk(3, dim=1)
        out, attn = _transposed_attention(q, k, v, self.heads, self.temperature)
        if self.record_attention:
            self.last_attention = attn.detach()
        return self.project_out(out)


class GDFN(nn.Module):
    """Gated-Dconv feed-forward network."""

    def __init__(self, dim: int, expansion: float = 2.66, bias: bool = False):
        super().__init__()
        hidden = int(dim * expansion)
        self.project_in = nn.Conv2d(dim, hidden * 2, 1, bias=bias)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2, bias=bias)
        self.project_out = nn.Conv2d(hidden, dim, 1, bias=bias)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(x1) * x2)


class PGCA(nn.Module):
    """Prior-guidance cross attention: guidance ``y`` queries decoder features ``x``.

    ``out = MDTA(Softmax(Q(y) K(x)^T / alpha) V(x)) + y`` with channel-wise
    (transposed) attention and a learnable per-head ``alpha``.
    """

    def __init__(self, dim: int, heads: int, bias: bool = False):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"heads={heads} does not divide channels={dim}")
        self.heads = heads
        self.alpha = nn.Parameter(torch.ones(heads, 1, 1))
        self.q = nn.Conv2d(dim, dim, 1, bias=bias)
        self.q_dwconv = nn.Conv2d(dim, dim, 3, padding=1, groups=dim, bias=bias)
        self.kv = nn.Conv2d(dim, dim * 2, 1, bias=bias)
        self.kv_dwconv = nn.Conv2d(dim * 2, dim * 2, 3, padding=1, groups=dim * 2, bias=bias)
        self.project_out = nn.Conv2d(dim, dim, 1, bias=bias)
        self.mdta = MDTA(dim, heads, bias)
        self.record_attention = False
        self.last_attention: torch.Tensor | None = None

    def cross_attention(self, y, x):
        q = self.q_dwconv(self.q(y))
        k, v = self.kv_dwconv(self.kv(x)).chunk(2, dim=1)
        out, attn = _transposed_attention(q, k, v, self.heads, self.alpha, divide=True)
        if self.record_attention:
            self.last_attention = attn.detach()
        return self.project_out(out)

    def forward(self, x, y):
        if x.shape != y.shape:
            raise ContractError(f"decoder features {tuple(x.shape)} and guidance {tuple(y.shape)} differ in shape")
        return self.mdta(self.cross_attention(y, x)) + y


class TransformerBlock(nn.Module):
    """TB: ``x + MDTA(LN x)`` then ``x + GDFN(LN x)``."""

    def __init__(self, dim: int, heads: int, expansion: float = 2.66, bias: bool = False):
        super().__init__()
        self.norm1 = LayerNorm2d(dim)
        self.attn = MDTA(dim, heads, bias)
        self.norm2 = LayerNorm2d(dim)
        self.ffn = GDFN(dim, expansion, bias)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def identity_guide(x: torch.Tensor) -> torch.Tensor:
    return x


class EnhancedTransformerBlock(nn.Module):
    """ETB: PGCA on the normalised features with guidance ``Y = guide(x)``, then GDFN.

    PGCA already adds ``Y`` back (and ``Y`` carries ``x`` through the guidance
    residual), so no extra residual wraps the attention step.
    """

    def __init__(self, dim: int, heads: int, expansion: float = 2.66, bias: bool = False):
        super().__init__()
        self.norm1 = LayerNorm2d(dim)
        self.attn = PGCA(dim, heads, bias)
        self.norm2 = LayerNorm2d(dim)
        self.ffn = GDFN(dim, expansion, bias)

    def forward(self, x, guide: Callable[[torch.Tensor], torch.Tensor] = identity_guide):
        y = guide(x)
        x = self.attn(self.norm1(x), y)
        return x + self.ffn(self.norm2(x))


class Downsample(nn.Module):
    def __init__(self, dim: int, bias: bool = False):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(dim, dim // 2, 1, bias=bias), nn.PixelUnshuffle(2))

    def forward(self, x):
        return self.body(x)


class Upsample(nn.Module):
    def __init__(self, dim: int, bias: bool = False):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(dim, dim * 2, 1, bias=bias), nn.PixelShuffle(2))

    def forward(self, x):
        return self.body(x)


class RestorationBranch(nn.Module):
    """U-shaped encoder/decoder with global residual.

    ``guides`` is a list of four callables (levels 1..4) mapping a decoder
    feature map to its guidance ``Y_l``; ``None`` means identity guidance.
    """

    def __init__(self, cfg: RestorerConfig):
        super().__init__()
        self.cfg = cfg
        ch, nb, hd, e, b = cfg.channels, cfg.blocks, cfg.heads, cfg.ffn_expansion, cfg.bias
        self.embed = nn.Conv2d(3, ch[0], 3, padding=1, bias=b)
        self.encoders = nn.ModuleList(
            [nn.ModuleList([TransformerBlock(ch[l], hd[l], e, b) for _ in range(nb[l])]) for l in range(3)]
        )
        self.downs = nn.ModuleList([Downsample(ch[l], b) for l in range(3)])
        self.latent = nn.ModuleList([EnhancedTransformerBlock(ch[3], hd[3], e, b) for _ in range(nb[3])])
        # index l holds decoder level l+1 (levels 1..3)
        self.ups = nn.ModuleList([Upsample(ch[l + 1], b) for l in range(3)])
        self.reduce = nn.ModuleList([nn.Conv2d(2 * ch[l], ch[l], 1, bias=b) for l in range(3)])
        self.decoders = nn.ModuleList(
            [nn.ModuleList([EnhancedTransformerBlock(ch[l], hd[l], e, b) for _ in range(nb[l])]) for l in range(3)]
        )
        self.output = nn.Conv2d(ch[0], 3, 3, padding=1, bias=b)

    def forward(self, i_d: torch.Tensor, guides: Sequence[Callable] | None = None, return_features: bool = False):
        h, w = i_d.shape[-2:]
        if h % 8 or w % 8:
            raise ContractError(f"image height and width must be divisible by 8, got {h}x{w}")
        guides = list(guides) if guides is not None else [identity_guide] * 4
        feats = {}
        x = self.embed(i_d)
        skips = []
        for l in range(3):
            for blk in self.encoders[l]:
                x = blk(x)
            skips.append(x)
            feats[f"enc{l + 1}"] = x
            x = self.downs[l](x)
        for blk in self.latent:
            x = blk(x, guides[3])
        feats["latent"] = x
        for l in (2, 1, 0):
            x = self.reduce[l](torch.cat([self.ups[l](x), skips[l]], dim=1))
            for blk in self.decoders[l]:
                x = blk(x, guides[l])
            feats[f"dec{l + 1}"] = x
        out = self.output(x) + i_d
        return (out, feats) if return_features else out

    def attention_modules(self) -> list[nn.Module]:
        return [m for m in self.modules() if isinstance(m, (MDTA, PGCA))]
