"""Frozen two-view geometry encoder and point trackers.

The toy encoder stands in for a pretrained multi-view transformer: a patch
stem, alternating frame-wise / global self-attention blocks and a dense
decoder that lifts tokens to a stride-2 feature map. Weights are drawn once
from a seeded generator and never trained.
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import RunConfig, clamp_points


def sincos_2d(gh: int, gw: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sine/cosine positional table, shape (gh*gw, dim)."""
    if dim % 4:
        raise ValueError("positional dim must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys, xs = torch.meshgrid(
        torch.arange(gh, dtype=torch.float64), torch.arange(gw, dtype=torch.float64), indexing="ij"
    )
    ox = xs.reshape(-1, 1) * omega
    oy = ys.reshape(-1, 1) * omega
    table = torch.cat([ox.sin(), ox.cos(), oy.sin(), oy.cos()], dim=1)
    return table.to(dtype)


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with separate q/k/v inputs."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        b, nq, c = q.shape
        nk = k.shape[1]
        h = self.heads
        q, k, v = self.q_proj(q), self.k_proj(k), self.v_proj(v)
        if h == 1:
            return self.out_proj(F.scaled_dot_product_attention(q, k, v))
        q = q.reshape(b, nq, h, c // h).transpose(1, 2)
        k = k.reshape(b, nk, h, c // h).transpose(1, 2)
        v = v.reshape(b, nk, h, c // h).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.out_proj(out.transpose(1, 2).reshape(b, nq, c))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, scope: str):
        super().__init__()
        self.scope = scope
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, 4 * dim)

    def forward(self, x: torch.Tensor, n_per_frame: int, joint: bool = True) -> torch.Tensor:
        # x: (B, 2N, C), source tokens first
        y = self.norm1(x)
        if self.scope == "global" and joint:
            x = x + self.attn(y, y, y)
        else:
            b, n2, c = y.shape
            yf = y.reshape(b * 2, n_per_frame, c)
            x = x + self.attn(yf, yf, yf).reshape(b, n2, c)
        return x + self.mlp(self.norm2(x))


class ToyEncoder(nn.Module):
    """Patch stem -> alternating frame/global attention -> stride-2 dense decoder."""

    def __init__(self, config: RunConfig, seed: int | None = None):
        super().__init__()
        c = config.channels
        p = config.patch_size
        self.config = config
        self.patch_size = p
        self.channels = c
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed if seed is None else seed)
            self.stem = nn.Linear(3 * p * p, c)
            self.frame_embed = nn.Parameter(torch.randn(2, c) * 0.02)
            self.blocks = nn.ModuleList(
                EncoderBlock(c, config.encoder_heads, scope)
                for scope in ("frame", "global", "frame", "global")
            )
            self.out_norm = nn.LayerNorm(c)
            self.dense_proj = nn.Linear(c, c)
            self.dense_conv = nn.Conv2d(c, c, 3, padding=1)
            # low-level skip from the raw image; see dense_decode
            self.image_skip = nn.Conv2d(3, c, 4, stride=2, padding=1)
            for m in self.modules():
                if isinstance(m, (nn.Linear, nn.Conv2d)):
                    nn.init.kaiming_normal_(m.weight, nonlinearity="linear")
                    nn.init.normal_(m.bias, std=0.02)
        self.requires_grad_(False)
        self.eval()

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def train(self, mode: bool = True) -> "ToyEncoder":
        # stays in inference mode regardless of the surrounding model
        return super().train(False)

    def checksum(self) -> str:
        return param_checksum(self)

    def patchify_stem(self, image: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, H/p * W/p, C) tokens with fixed positional terms."""
        b, _, h, w = image.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        patches = image.reshape(b, 3, gh, p, gw, p).permute(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, 3 * p * p)
        pos = sincos_2d(gh, gw, self.channels, image.dtype)
        return self.stem(patches) + pos

    def joint_encode(
        self,
        x_s: torch.Tensor,
        x_t: torch.Tensor,
        joint: bool = True,
        frame_embed: bool = True,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if x_s.shape[-1] != x_t.shape[-1]:
            raise ValueError("source and target tokens differ in channel count")
        if x_s.shape != x_t.shape:
            raise ValueError("source and target token grids differ in size")
        n = x_s.shape[1]
        if frame_embed:
            x_s = x_s + self.frame_embed[0]
            x_t = x_t + self.frame_embed[1]
        x = torch.cat([x_s, x_t], dim=1)
        for blk in self.blocks:
            x = blk(x, n, joint=joint)
        x = self.out_norm(x)
        return x[:, :n], x[:, n:]

    def dense_decode(self, h: torch.Tensor, grid: tuple[int, int], image: torch.Tensor | None = None) -> torch.Tensor:
        """Tokens (B, N, C) on a (gh, gw) grid -> (B, C, gh*p/2, gw*p/2).

        When ``image`` is given and the skip is enabled, a stride-2 convolution
        of the raw frame is added so features resolve edges finer than a patch.
        """
        gh, gw = grid
        b, n, c = h.shape
        if n != gh * gw:
            raise ValueError(f"{n} tokens do not fill a {gh}x{gw} grid")
        x = self.dense_proj(h).transpose(1, 2).reshape(b, c, gh, gw)
        out_hw = (gh * self.patch_size // 2, gw * self.patch_size // 2)
        x = F.interpolate(x, size=out_hw, mode="bilinear", align_corners=False)
        x = self.dense_conv(x)
        if image is not None and self.config.encoder_image_skip:
            x = x + self.image_skip(image)
        return x

    @torch.no_grad()
    def forward(
        self, image_s: torch.Tensor, image_t: torch.Tensor, joint: bool | torch.Tensor = True
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode a batch of image pairs to (F_s, F_t), each (B, C, H/2, W/2).

        ``joint`` may be a bool tensor of shape (B,); samples with False are
        encoded with cross-frame attention disabled.
        """
        p = self.patch_size
        grid = (image_s.shape[2] // p, image_s.shape[3] // p)
        x_s = self.patchify_stem(image_s)
        x_t = self.patchify_stem(image_t)
        if isinstance(joint, torch.Tensor):
            if bool(joint.all()):
                h_s, h_t = self.joint_encode(x_s, x_t, joint=True)
            elif not bool(joint.any()):
                h_s, h_t = self.joint_encode(x_s, x_t, joint=False)
            else:
                h_s1, h_t1 = self.joint_encode(x_s, x_t, joint=True)
                h_s0, h_t0 = self.joint_encode(x_s, x_t, joint=False)
                sel = joint.view(-1, 1, 1)
                h_s = torch.where(sel, h_s1, h_s0)
                h_t = torch.where(sel, h_t1, h_t0)
        else:
            h_s, h_t = self.joint_encode(x_s, x_t, joint=joint)
        return self.dense_decode(h_s, grid, image_s), self.dense_decode(h_t, grid, image_t)


def param_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(t.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def to_tensor_images(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) or (B, H, W, 3) numpy -> (B, 3, H, W) tensor."""
    a = np.asarray(images)
    if a.ndim == 3:
        a = a[None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2))).to(dtype)


class ExternalEncoder:
    """Reads precomputed feature maps (and optionally tracks) from a directory.

    Layout: ``<dir>/<pair_id>_fs.npy`` and ``<pair_id>_ft.npy`` hold C x H/2 x W/2
    arrays; ``<pair_id>_pt.npy`` may hold K x 2 tracked target points.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise FileNotFoundError(f"external feature directory {directory} missing")

    def features(self, pair_id: str, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        fs = np.load(self.directory / f"{pair_id}_fs.npy")
        ft = np.load(self.directory / f"{pair_id}_ft.npy")
        if fs.shape != ft.shape or fs.ndim != 3:
            raise ValueError(f"feature maps for {pair_id} have shapes {fs.shape}, {ft.shape}")
        return torch.from_numpy(fs)[None].to(dtype), torch.from_numpy(ft)[None].to(dtype)

    def tracks(self, pair_id: str) -> np.ndarray | None:
        path = self.directory / f"{pair_id}_pt.npy"
        return np.load(path) if path.exists() else None


# ---------------------------------------------------------------- trackers


class Tracker(Protocol):
    name: str

    def __call__(self, points: np.ndarray, image_s: np.ndarray, image_t: np.ndarray) -> np.ndarray: ...


class GroundTruthTracker:
    """Applies a known point transform (exact correspondences)."""

    name = "ground_truth"

    def __init__(self, transform: Callable[[np.ndarray], np.ndarray]):
        self.transform = transform

    def __call__(self, points, image_s, image_t):
        return np.asarray(self.transform(np.asarray(points, dtype=np.float64)), dtype=np.float64)


class FeatureCorrelationTracker:
    """Argmax of cosine similarity between source point features and the target map."""

    name = "feature_correlation"

    def __init__(self, encoder: ToyEncoder):
        self.encoder = encoder
        self.features: tuple[torch.Tensor, torch.Tensor] | None = None

    def with_features(self, f_s: torch.Tensor, f_t: torch.Tensor) -> "FeatureCorrelationTracker":
        out = FeatureCorrelationTracker(self.encoder)
        out.features = (f_s, f_t)
        return out

    def __call__(self, points, image_s, image_t):
        if self.features is None:
            f_s, f_t = self.encoder(to_tensor_images(image_s), to_tensor_images(image_t))
        else:
            f_s, f_t = self.features
        from .prediction import sample_point_features

        pts = np.asarray(points, dtype=np.float64)
        q = sample_point_features(torch.from_numpy(pts)[None].to(f_s.dtype), f_s[:1])[0]  # (K, C)
        c, fh, fw = f_t.shape[1:]
        tgt = f_t[0].reshape(c, -1)
        sim = F.normalize(q, dim=1) @ F.normalize(tgt, dim=0)
        idx = sim.argmax(dim=1).numpy()
        fy, fx = np.divmod(idx, fw)
        stride_y = image_t.shape[0] / fh
        stride_x = image_t.shape[1] / fw
        out = np.stack([(fx + 0.5) * stride_x - 0.5, (fy + 0.5) * stride_y - 0.5], axis=1)
        return out


def track_points(points: np.ndarray, image_s: np.ndarray, image_t: np.ndarray, tracker: Tracker) -> np.ndarray:
    """Map source points into the target frame, preserving order and clamping in-bounds."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("empty point set")
    h, w = image_s.shape[:2]
    if np.any(pts < 0) or np.any(pts[:, 0] > w - 1) or np.any(pts[:, 1] > h - 1):
        raise ValueError("source points out of bounds")
    out = tracker(pts, image_s, image_t)
    return clamp_points(out, image_t.shape[0], image_t.shape[1])
