"""Source-mask injection and two-view bottleneck fusion."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import MLP, Attention


class MaskEmbed(nn.Module):
    """Full-resolution mask -> C-channel embedding at half resolution."""

    def __init__(self, channels: int):
        super().__init__()
        self.down = nn.Conv2d(1, channels, 4, stride=2, padding=1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, mask: torch.Tensor, feature_hw: tuple[int, int] | None = None) -> torch.Tensor:
        if mask.dim() == 3:
            mask = mask[:, None]
        h, w = mask.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"mask {h}x{w} has odd size")
        if feature_hw is not None and (h // 2, w // 2) != tuple(feature_hw):
            raise ValueError(f"mask {h}x{w} does not match feature map {feature_hw}")
        return self.proj(F.gelu(self.down(mask)))


def inject_mask(f_s: torch.Tensor, e_m: torch.Tensor) -> torch.Tensor:
    if f_s.shape != e_m.shape:
        raise ValueError(f"feature {tuple(f_s.shape)} and mask embedding {tuple(e_m.shape)} differ")
    return f_s + e_m


def downsample(x: torch.Tensor, r: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    if h % r or w % r:
        raise ValueError(f"feature resolution {h}x{w} not divisible by r={r}")
    return F.avg_pool2d(x, r)


def upsample(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def _resample_matrices(size: int, r: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """1-D average-pool (size/r x size) and bilinear upsample (size x size/r) operators."""
    small = size // r
    eye = torch.eye(small, dtype=torch.float64)[None]
    up = F.interpolate(eye, size=size, mode="linear", align_corners=False)[0].T  # (size, small)
    down = torch.zeros(small, size, dtype=torch.float64)
    for i in range(small):
        down[i, i * r:(i + 1) * r] = 1.0 / r
    return down.to(dtype), up.to(dtype)


class BottleneckFusion(nn.Module):
    """Average-pool both views by ``r``, attend jointly, then upsample back.

    Output = U_r(FFN(SelfAttn([D_r(F_s'), D_r(F_t)]))) with pre-norm residuals
    around the attention and the FFN. Learned positional and per-view
    embeddings enter the queries and keys only.
    """

    def __init__(self, channels: int, heads: int, grid: int):
        super().__init__()
        self.grid = grid
        self.pos = nn.Parameter(torch.randn(1, channels, grid, grid) * 0.02)
        self.view = nn.Parameter(torch.randn(2, channels) * 0.02)
        self.norm1 = nn.LayerNorm(channels)
        self.attn = Attention(channels, heads)
        self.norm2 = nn.LayerNorm(channels)
        self.ffn = MLP(channels, 4 * channels)
        self._ops: dict = {}

    def _pos(self, gh: int, gw: int) -> torch.Tensor:
        pos = self.pos
        if (gh, gw) != (self.grid, self.grid):
            pos = F.interpolate(pos, size=(gh, gw), mode="bilinear", align_corners=False)
        return pos.flatten(2).transpose(1, 2)  # (1, N, C)

    def _operators(self, size: int, r: int, dtype):
        key = (size, r, dtype)
        if key not in self._ops:
            self._ops[key] = _resample_matrices(size, r, dtype)
        return self._ops[key]

    def _mix(self, d_s: torch.Tensor, d_t: torch.Tensor, gh: int, gw: int) -> torch.Tensor:
        # d_*: (B, n, C) bottleneck tokens
        x = torch.cat([d_s, d_t], dim=1)
        pos = self._pos(gh, gw)
        pe = torch.cat([pos + self.view[0], pos + self.view[1]], dim=1)
        y = self.norm1(x)
        x = x + self.attn(y + pe, y + pe, y)
        return x + self.ffn(self.norm2(x))

    def forward_tokens(self, x_s: torch.Tensor, x_t: torch.Tensor, hw: tuple[int, int], r: int):
        """Same as ``forward`` on row-major (B, h*w, C) token sequences."""
        h, w = hw
        if h % r or w % r:
            raise ValueError(f"feature resolution {h}x{w} not divisible by r={r}")
        b, n, c = x_s.shape
        dh, uh = self._operators(h, r, x_s.dtype)
        dw, uw = self._operators(w, r, x_s.dtype)
        gh, gw = h // r, w // r

        def down(x):
            return torch.einsum("ia,jb,nabc->nijc", dh, dw, x.reshape(b, h, w, c)).reshape(b, gh * gw, c)

        def up(x):
            return torch.einsum("ai,bj,nijc->nabc", uh, uw, x.reshape(b, gh, gw, c)).reshape(b, n, c)

        x = self._mix(down(x_s), down(x_t), gh, gw)
        m = gh * gw
        return up(x[:, :m]), up(x[:, m:])

    def forward(self, f_s: torch.Tensor, f_t: torch.Tensor, r: int) -> tuple[torch.Tensor, torch.Tensor]:
        if f_s.shape != f_t.shape:
            raise ValueError("source and target feature maps differ in shape")
        size = tuple(f_s.shape[-2:])
        d_s, d_t = downsample(f_s, r), downsample(f_t, r)
        b, c, gh, gw = d_s.shape
        n = gh * gw
        x = self._mix(d_s.flatten(2).transpose(1, 2), d_t.flatten(2).transpose(1, 2), gh, gw)
        x = x.transpose(1, 2)
        o_s = x[:, :, :n].reshape(b, c, gh, gw)
        o_t = x[:, :, n:].reshape(b, c, gh, gw)
        return upsample(o_s, size), upsample(o_t, size)


def bottleneck_fuse(f_s_prime, f_t, module: BottleneckFusion, r: int):
    return module(f_s_prime, f_t, r)
