"""Point prompts and the two-way decoder that turns them into a target mask."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import PointSet
from .encoder import MLP, Attention


class EmptyMaskError(ValueError):
    pass


def foreground_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground (x, y) coordinates in row-major order."""
    ys, xs = np.nonzero(np.asarray(mask) > 0)
    return np.stack([xs, ys], axis=1).astype(np.int64)


def kmeans_once(pixels: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding then a single Lloyd step; centroids snapped to pixels.

    ``pixels`` is an (n, 2) integer array of distinct coordinates. Returns
    min(k, n) snapped points. Random draws: one ``integers(n)`` for the first
    seed, then one ``random()`` per further seed (D^2 weighting).
    """
    pix = np.asarray(pixels, dtype=np.int64)
    n = len(pix)
    k = min(k, n)
    centers = [pix[rng.integers(n)]]
    d2 = ((pix - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        cum = np.cumsum(d2)
        u = rng.random() * cum[-1]
        idx = min(int(np.searchsorted(cum, u, side="right")), n - 1)
        centers.append(pix[idx])
        d2 = np.minimum(d2, ((pix - pix[idx]) ** 2).sum(axis=1))
    c = np.array(centers, dtype=np.float64)

    # one assignment/update pass
    dist = ((pix[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    assign = dist.argmin(axis=1)
    means = c.copy()
    for j in range(k):
        members = pix[assign == j]
        if len(members):
            means[j] = members.sum(axis=0) / len(members)

    snap = ((pix[:, None, :] - means[None, :, :]) ** 2).sum(axis=2).argmin(axis=0)
    return pix[snap].astype(np.float64)


def sample_points(mask: np.ndarray, k: int, rng: np.random.Generator | int) -> PointSet:
    """Pick ``k`` representative foreground pixels of a binary mask.

    When the mask has fewer than ``k`` pixels, all of them are returned
    followed by repeats of the last one; ``meta['distinct']`` records how
    many are unique.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    pix = foreground_pixels(mask)
    if len(pix) == 0:
        raise EmptyMaskError("empty source mask")
    pts = kmeans_once(pix, k, rng)
    distinct = len(pts)
    if distinct < k:
        pts = np.concatenate([pts, np.repeat(pts[-1:], k - distinct, axis=0)])
    return PointSet(pts, frame="source", meta={"requested": k, "distinct": distinct})


def pixel_to_grid(points: torch.Tensor, feature_hw: tuple[int, int], image_hw: tuple[int, int]) -> torch.Tensor:
    """Pixel (x, y) -> normalised grid_sample coordinates on a feature map."""
    fh, fw = feature_hw
    ih, iw = image_hw
    u = (points[..., 0] + 0.5) * (fw / iw) - 0.5
    v = (points[..., 1] + 0.5) * (fh / ih) - 0.5
    gx = u / max(fw - 1, 1) * 2 - 1
    gy = v / max(fh - 1, 1) * 2 - 1
    return torch.stack([gx, gy], dim=-1)


def sample_at(features: torch.Tensor, grid_xy: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of (B, C, h, w) at normalised (B, K, 2) positions -> (B, K, C)."""
    out = F.grid_sample(
        features, grid_xy[:, :, None, :], mode="bilinear", padding_mode="border", align_corners=True
    )
    return out[:, :, :, 0].transpose(1, 2)


def sample_point_features(points: torch.Tensor, features: torch.Tensor, stride: int = 2) -> torch.Tensor:
    """Bilinear sample of a stride-``stride`` feature map at pixel points."""
    fh, fw = features.shape[-2:]
    grid = pixel_to_grid(points.to(features.dtype), (fh, fw), (fh * stride, fw * stride))
    return sample_at(features, grid)


class FourierEncoding(nn.Module):
    """Random Fourier features of coordinates normalised to [0, 1]."""

    def __init__(self, channels: int, scale: float = 1.0):
        super().__init__()
        self.register_buffer("gauss", torch.randn(2, channels // 2) * scale)

    def forward(self, coords01: torch.Tensor) -> torch.Tensor:
        v = (2 * coords01 - 1).to(self.gauss.dtype) @ self.gauss
        v = 2 * math.pi * v
        return torch.cat([v.sin(), v.cos()], dim=-1)

    def dense(self, h: int, w: int, dtype=None) -> torch.Tensor:
        """Encoding of every cell centre of an h x w grid, shape (h*w, C)."""
        ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h
        xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        out = self(torch.stack([gx, gy], dim=-1).reshape(-1, 2).to(self.gauss.dtype))
        return out if dtype is None else out.to(dtype)


class PromptEncoder(nn.Module):
    """Maps pixel points to C-dim tokens: Fourier features, projection, role embedding."""

    SOURCE, TARGET = 0, 1

    def __init__(self, channels: int, pe: FourierEncoding):
        super().__init__()
        self.pe = pe
        self.proj = nn.Linear(channels, channels)
        nn.init.eye_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        self.role = nn.Parameter(torch.randn(2, channels) * 0.02)

    def forward(self, points: torch.Tensor, image_hw: tuple[int, int], role: int) -> torch.Tensor:
        h, w = image_hw
        coords = torch.stack([(points[..., 0] + 0.5) / w, (points[..., 1] + 0.5) / h], dim=-1)
        return self.proj(self.pe(coords)) + self.role[role]


class DecoderBlock(nn.Module):
    """Prompt self-attention, prompt->image and image->prompt cross-attention.

    Positional terms are added to queries/keys only; values stay content-only.
    """

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.norm_self = nn.LayerNorm(channels)
        self.self_attn = Attention(channels, heads)
        self.norm_p2i = nn.LayerNorm(channels)
        self.norm_img_k = nn.LayerNorm(channels)
        self.p2i = Attention(channels, heads)
        self.norm_mlp = nn.LayerNorm(channels)
        self.mlp = MLP(channels, 4 * channels)
        self.norm_i2p = nn.LayerNorm(channels)
        self.norm_q_k = nn.LayerNorm(channels)
        self.i2p = Attention(channels, heads)

    def forward(
        self, q: torch.Tensor, q_pe: torch.Tensor, img: torch.Tensor, img_pe: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        y = self.norm_self(q)
        q = q + self.self_attn(y + q_pe, y + q_pe, y)
        y = self.norm_p2i(q)
        k = self.norm_img_k(img)
        q = q + self.p2i(y + q_pe, k + img_pe, k)
        q = q + self.mlp(self.norm_mlp(q))
        y = self.norm_i2p(img)
        kq = self.norm_q_k(q)
        img = img + self.i2p(y + img_pe, kq + q_pe, kq)
        return q, img


class MaskPredictor(nn.Module):
    """Output token attends to target features; its MLP image dots every pixel."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(channels)
        self.norm_k = nn.LayerNorm(channels)
        self.attn = Attention(channels, heads)
        self.mlp = MLP(channels, channels)
        nn.init.normal_(self.mlp.fc2.weight, std=1e-3)
        nn.init.zeros_(self.mlp.fc2.bias)

    def forward(
        self, o: torch.Tensor, o_pe: torch.Tensor, h_t: torch.Tensor, h_pe: torch.Tensor
    ) -> torch.Tensor:
        """o: (B, 1, C); h_t: (B, N, C) -> logits (B, N)."""
        k = self.norm_k(h_t)
        o = o + self.attn(self.norm_q(o) + o_pe, k + h_pe, k)
        w = self.mlp(o)  # (B, 1, C)
        return mask_logits(w[:, 0], h_t)


def mask_logits(w: torch.Tensor, h_t: torch.Tensor) -> torch.Tensor:
    """Per-pixel dot product of (B, C) weights with (B, N, C) features -> (B, N)."""
    return torch.einsum("bc,bnc->bn", w, h_t)
