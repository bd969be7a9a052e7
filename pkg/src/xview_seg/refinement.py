"""Iterative mask refinement and its training-time schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class RefinePlan:
    """Per-sample refinement iteration counts for one batch.

    ``grad_flow[i]`` is True when gradients reach the sample's loss only
    through its final refinement iteration (refined training samples).
    """

    iters: np.ndarray
    grad_flow: np.ndarray

    @property
    def refined(self) -> np.ndarray:
        return self.iters > 0


def refine_schedule(
    batch_size: int, refine_iters: int, training: bool, rng: np.random.Generator | None = None
) -> RefinePlan:
    """Training: each sample is refined with probability 0.5. Inference: all are."""
    if batch_size < 1:
        raise ValueError("empty batch")
    if training and refine_iters > 0:
        if rng is None:
            raise ValueError("training schedule needs an rng")
        chosen = rng.random(batch_size) < 0.5
    else:
        chosen = np.full(batch_size, refine_iters > 0)
    iters = np.where(chosen, refine_iters, 0).astype(np.int64)
    grad_flow = chosen & training
    return RefinePlan(iters=iters, grad_flow=grad_flow)


@dataclass
class RefineState:
    iteration: int
    mask: torch.Tensor  # (B, H, W) probabilities
    queries: torch.Tensor  # carried post-decoder queries
    query_pe: torch.Tensor
    logits: torch.Tensor | None = None


def refine(head, f_s, m_s, f_t, m_hat, queries, query_pe) -> tuple[torch.Tensor, torch.Tensor]:
    """One application of the refinement decoder.

    Encodes the current target mask, adds it to the target features, re-runs
    the decoder blocks from the carried queries and returns
    (probabilities at image resolution, logits at feature resolution).
    """
    if m_hat.shape != m_s.shape:
        raise ValueError(f"mask shapes differ: {tuple(m_hat.shape)} vs {tuple(m_s.shape)}")
    return head.refine_step(f_s, m_s, f_t, m_hat, queries, query_pe)


def run_refinement(head, f_s, m_s, f_t, state: RefineState, n_iters: int, training: bool):
    """Apply ``n_iters`` refinement steps; when training, only the last carries gradient.

    Returns the final state plus the detached inputs to the last step
    (used to evaluate the loss with severed iterations held fixed).
    """
    final_inputs = None
    for k in range(n_iters):
        last = k == n_iters - 1
        if training and not last:
            with torch.no_grad():
                mask, logits = refine(head, f_s, m_s, f_t, state.mask, state.queries, state.query_pe)
        else:
            m_in, q_in, pe_in = state.mask, state.queries, state.query_pe
            if training:
                m_in, q_in, pe_in = m_in.detach(), q_in.detach(), pe_in.detach()
                final_inputs = dict(m_hat=m_in, queries=q_in, query_pe=pe_in)
            mask, logits = refine(head, f_s, m_s, f_t, m_in, q_in, pe_in)
        state = RefineState(k + 1, mask, state.queries, state.query_pe, logits)
    return state, final_inputs
