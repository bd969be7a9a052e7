"""The trainable segmentation head: mask fusion, point-guided decoding, refinement."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import RunConfig
from .encoder import track_points
from .fusion import BottleneckFusion, MaskEmbed
from .prediction import (
    DecoderBlock,
    FourierEncoding,
    MaskPredictor,
    PromptEncoder,
    sample_point_features,
    sample_points,
)
from .refinement import RefinePlan, RefineState, refine, refine_schedule, run_refinement


@dataclass
class HeadOutput:
    mask: torch.Tensor  # (B, H, W) final probabilities
    initial: torch.Tensor  # (B, H, W) pre-refinement probabilities
    logits: torch.Tensor  # (B, h, w) final logits
    queries: torch.Tensor
    plan: RefinePlan
    final_inputs: dict[str, Any] = field(default_factory=dict)


class DecoderStack(nn.Module):
    """L decoder blocks, each with its own bottleneck fusion, plus the mask predictor."""

    def __init__(self, config: RunConfig):
        super().__init__()
        c = config.channels
        self.config = config
        self.blocks = nn.ModuleList(DecoderBlock(c, config.heads) for _ in range(config.decoder_blocks))
        self.fusions = nn.ModuleList(
            BottleneckFusion(c, config.heads, config.fusion_grid) for _ in range(config.decoder_blocks)
        ) if config.use_fusion else None
        self.predictor = MaskPredictor(c, config.heads)

    def forward(self, f_s, f_t, q, q_pe, img_pe):
        """f_s, f_t: (B, C, h, w) maps. Returns (queries, target logits (B, h, w))."""
        b, c, h, w = f_s.shape
        n = h * w
        x = torch.cat([f_s.flatten(2), f_t.flatten(2)], dim=2).transpose(1, 2)  # (B, 2n, C)
        for i, blk in enumerate(self.blocks):
            if self.fusions is not None:
                d_s, d_t = self.fusions[i].forward_tokens(x[:, :n], x[:, n:], (h, w), self.config.fusion_ratio)
                x = x + torch.cat([d_s, d_t], dim=1)
            q, x = blk(q, q_pe, x, img_pe)
        z = self.predictor(q[:, -1:], q_pe[:, -1:], x[:, n:], img_pe[:, n:])
        return q, z.reshape(b, h, w)


class SegmentationHead(nn.Module):
    """Trainable head mapping (F_s, F_t, M_s, P_s, P_t) to a target-view mask."""

    def __init__(self, config: RunConfig, seed: int | None = None):
        super().__init__()
        c = config.channels
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed((config.seed if seed is None else seed) + 1)
            self.pe = FourierEncoding(c)
            self.mask_embed = MaskEmbed(c)
            self.frame_embed = nn.Parameter(torch.randn(2, c) * 0.02)
            self.out_token = nn.Parameter(torch.randn(1, 1, c) * 0.02)
            self.null_mask = nn.Parameter(torch.zeros(c)) if config.target_null_mask else None
            self.prompt = PromptEncoder(c, self.pe) if config.use_points else None
            self.decoder = DecoderStack(config)
            if config.separate_refine_weights and config.effective_refine_iters > 0:
                self.refine_embed = MaskEmbed(c)
                self.refine_decoder = DecoderStack(config)
            else:
                self.refine_embed = None
                self.refine_decoder = None
        self.psi_calls = 0

    # parameter groups, named after the stage they belong to
    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {"mask_prompt_fusion": [], "point_guided_prediction": [], "mask_refinement": []}
        for name, p in self.named_parameters():
            if name.startswith(("refine_embed", "refine_decoder")):
                groups["mask_refinement"].append((name, p))
            elif name.startswith(("mask_embed", "null_mask")) or ".fusions." in name:
                groups["mask_prompt_fusion"].append((name, p))
            else:
                groups["point_guided_prediction"].append((name, p))
        return {k: v for k, v in groups.items() if v}

    def _image_pe(self, h: int, w: int, dtype) -> torch.Tensor:
        dense = self.pe.dense(h, w, dtype)
        return torch.cat([dense + self.frame_embed[0], dense + self.frame_embed[1]], dim=0)[None]

    def _to_image(self, logits: torch.Tensor, image_hw: tuple[int, int]) -> torch.Tensor:
        if self.config.upsample_logits:
            z = F.interpolate(logits[:, None], size=image_hw, mode="bilinear", align_corners=False)
            return torch.sigmoid(z)[:, 0]
        p = torch.sigmoid(logits)[:, None]
        return F.interpolate(p, size=image_hw, mode="bilinear", align_corners=False)[:, 0]

    def encode_prompts(self, p_s, p_t, f_s, image_hw, batch: int, dtype) -> torch.Tensor:
        """Q_0 = [E_p, E_s, E_t, O], or just [O] when point prompts are disabled."""
        out = self.out_token.to(dtype).expand(batch, 1, -1)
        if self.prompt is None:
            return out
        if p_s.shape != p_t.shape:
            raise ValueError("source and target point sets differ in size")
        e_p = sample_point_features(p_s, f_s)
        e_s = self.prompt(p_s.to(dtype), image_hw, PromptEncoder.SOURCE)
        e_t = self.prompt(p_t.to(dtype), image_hw, PromptEncoder.TARGET)
        return torch.cat([e_p, e_s, e_t, out], dim=1)

    def _target_features(self, f_t: torch.Tensor) -> torch.Tensor:
        if self.null_mask is not None:
            return f_t + self.null_mask.view(1, -1, 1, 1)
        return f_t

    def refine_step(self, f_s, m_s, f_t, m_hat, queries, query_pe):
        self.psi_calls += int(f_s.shape[0])
        embed = self.refine_embed or self.mask_embed
        decoder = self.refine_decoder or self.decoder
        fh, fw = f_s.shape[-2:]
        f_s1 = f_s + embed(m_s, (fh, fw))
        f_t1 = f_t + embed(m_hat, (fh, fw))
        _, z = decoder(f_s1, f_t1, queries, query_pe, self._image_pe(fh, fw, f_s.dtype))
        return self._to_image(z, tuple(m_s.shape[-2:])), z

    def forward(
        self,
        f_s: torch.Tensor,
        f_t: torch.Tensor,
        m_s: torch.Tensor,
        p_s: torch.Tensor | None = None,
        p_t: torch.Tensor | None = None,
        plan: RefinePlan | None = None,
        training: bool = False,
        cached: dict[str, Any] | None = None,
    ) -> HeadOutput:
        """``cached`` replays the final refinement step on previously recorded
        detached inputs instead of re-running the earlier iterations."""
        b, _, fh, fw = f_s.shape
        image_hw = tuple(m_s.shape[-2:])
        if f_t.shape != f_s.shape:
            raise ValueError("feature maps differ in shape")
        if image_hw != (2 * fh, 2 * fw):
            raise ValueError(f"mask {image_hw} does not match features {(fh, fw)}")
        if plan is None:
            plan = refine_schedule(b, self.config.effective_refine_iters, training=False)
        dtype = f_s.dtype
        m_s = m_s.to(dtype)

        e_m = self.mask_embed(m_s, (fh, fw))
        f_s1 = f_s + e_m
        f_t1 = self._target_features(f_t)
        q0 = self.encode_prompts(
            p_s, p_t, f_s1 if self.config.point_features_from_injected else f_s, image_hw, b, dtype
        )
        img_pe = self._image_pe(fh, fw, dtype)
        q, z = self.decoder(f_s1, f_t1, q0, q0, img_pe)
        m0 = self._to_image(z, image_hw)

        mask, logits = m0, z
        final_inputs: dict[str, Any] = {}
        iters = np.asarray(plan.iters)
        if iters.max(initial=0) > 0:
            if len(set(iters[iters > 0].tolist())) != 1:
                raise ValueError("refined samples must share one iteration count")
            n_iter = int(iters.max())
            idx = torch.from_numpy(np.nonzero(iters > 0)[0])
            if cached is not None:
                m_in, q_in, pe_in = cached["m_hat"], cached["queries"], cached["query_pe"]
                pm, pz = refine(self, f_s[idx], m_s[idx], f_t1[idx], m_in, q_in, pe_in)
                state = RefineState(n_iter, pm, q_in, pe_in, pz)
                final_inputs = dict(m_hat=m_in, queries=q_in, query_pe=pe_in)
            else:
                state = RefineState(0, m0[idx], q[idx], q0[idx])
                state, final_inputs = run_refinement(
                    self, f_s[idx], m_s[idx], f_t1[idx], state, n_iter, training
                )
            final_inputs = dict(final_inputs or {}, index=idx)
            mask = m0.index_copy(0, idx, state.mask)
            logits = z.index_copy(0, idx, state.logits)
        return HeadOutput(mask=mask, initial=m0, logits=logits, queries=q, plan=plan, final_inputs=final_inputs)


def prompts_for(mask: np.ndarray, k: int, rng, tracker, image_s, image_t) -> tuple[np.ndarray, np.ndarray]:
    """Sample source points from a mask and track them into the target view."""
    p_s = sample_points(mask, k, rng).points
    p_t = track_points(p_s, image_s, image_t, tracker)
    return p_s, p_t


def run_head(
    encoder,
    head: SegmentationHead,
    image_s: np.ndarray,
    image_t: np.ndarray,
    m_s: np.ndarray,
    tracker,
    seed: int = 0,
    features: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> np.ndarray:
    """End-to-end inference for one pair; returns an H x W probability mask."""
    from .encoder import FeatureCorrelationTracker, to_tensor_images

    if np.count_nonzero(m_s) == 0:
        raise ValueError("empty source mask")
    dtype = next(head.parameters()).dtype
    if features is None:
        f_s, f_t = encoder(to_tensor_images(image_s), to_tensor_images(image_t))
    else:
        f_s, f_t = features
    f_s, f_t = f_s.to(dtype), f_t.to(dtype)
    if isinstance(tracker, FeatureCorrelationTracker):
        tracker = tracker.with_features(f_s, f_t)
    rng = np.random.default_rng(seed)
    p_s, p_t = prompts_for(m_s, head.config.k_points, rng, tracker, image_s, image_t)
    with torch.no_grad():
        out = head(
            f_s,
            f_t,
            torch.from_numpy(np.asarray(m_s, dtype=np.float64))[None].to(dtype),
            torch.from_numpy(p_s)[None].to(dtype),
            torch.from_numpy(p_t)[None].to(dtype),
        )
    return out.mask[0].numpy()


def clone_head(head: SegmentationHead) -> SegmentationHead:
    return copy.deepcopy(head)
