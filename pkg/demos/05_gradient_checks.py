"""Finite-difference gradient checks and the final-iteration-only rule.

Only the last refinement iteration carries gradient. Parameters that reach
the loss of a refined sample only through earlier iterations (here the
prompt encoder and output token) therefore get exactly zero gradient, and
differencing the same function autograd sees gives zero too.
"""

import numpy as np
import torch

from xview_seg.core import RunConfig
from xview_seg.encoder import ToyEncoder
from xview_seg.head import SegmentationHead
from xview_seg.refinement import RefinePlan
from xview_seg.synthetic import generate_pairs
from xview_seg.training import batch_loss, grad_check, make_batch

cfg = RunConfig.toy(channels=32, refine_iters=2)
rep = grad_check(SegmentationHead(cfg), cfg, tolerance=1e-4, n_samples=30)
for module, stats in rep.per_module.items():
    print(f"{module:>24}: {stats['pass_fraction']:.2f} within 1e-4, max rel error {stats['max_rel_error']:.1e}")

head = SegmentationHead(cfg).double()
batch = make_batch(generate_pairs(2, "medium", 5), ToyEncoder(cfg).double(), cfg,
                   np.random.default_rng(0), "paired", dtype=torch.float64)
plan = RefinePlan(np.array([2, 2]), np.array([True, True]))
loss, _ = batch_loss(head, batch, plan, training=True)
loss.total.backward()
print("prompt encoder grad is zero:", bool(torch.count_nonzero(head.prompt.proj.weight.grad) == 0))
print("decoder grad is nonzero:", bool(torch.count_nonzero(head.decoder.predictor.mlp.fc2.weight.grad) > 0))
