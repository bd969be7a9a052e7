"""One forward pass through the head, stage by stage.

Frozen encoder features -> mask injection + bottleneck fusion -> prompt
queries [point features, source PE, target PE, output token] -> decoder
blocks -> dot-product mask predictor -> refinement iterations.
"""

import numpy as np
import torch

from xview_seg.core import RunConfig
from xview_seg.encoder import GroundTruthTracker, ToyEncoder, to_tensor_images
from xview_seg.head import SegmentationHead, prompts_for
from xview_seg.refinement import refine_schedule
from xview_seg.synthetic import generate_pairs

cfg = RunConfig.toy(k_points=5, decoder_blocks=2, refine_iters=2)
enc, head = ToyEncoder(cfg), SegmentationHead(cfg)
pair = generate_pairs(1, "medium", seed=2)[0]

with torch.no_grad():
    f_s, f_t = enc(to_tensor_images(pair.image_s), to_tensor_images(pair.image_t))
print("feature maps:", tuple(f_s.shape), "(half resolution)")
print("bottleneck grid:", cfg.fusion_grid, "x", cfg.fusion_grid)

p_s, p_t = prompts_for(pair.mask_s, cfg.k_points, np.random.default_rng(0),
                       GroundTruthTracker(pair.transform.apply), pair.image_s, pair.image_t)
m_s = torch.from_numpy(pair.mask_s.astype(np.float32))[None]
p_s, p_t = torch.from_numpy(p_s)[None].float(), torch.from_numpy(p_t)[None].float()

q0 = head.encode_prompts(p_s, p_t, f_s, (70, 70), 1, torch.float32)
print("prompt queries:", q0.shape[1], "= 3*K + 1")

for iters in (0, 1, 2):
    head.psi_calls = 0
    plan = refine_schedule(1, iters, training=False)
    with torch.no_grad():
        out = head(f_s, f_t, m_s, p_s, p_t, plan=plan)
    print(f"refine_iters={iters}: mask {tuple(out.mask.shape)}, refinement calls {head.psi_calls}, "
          f"mean prob {out.mask.mean():.3f}")
