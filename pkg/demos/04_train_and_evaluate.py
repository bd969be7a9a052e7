"""Train a small head on synthetic pairs and compare refinement settings.

A few minutes on one CPU core. The full benchmark (2,000 pairs, 3 epochs,
three seeds) lives in the acceptance tests.

    python demos/04_train_and_evaluate.py [n_pairs] [epochs]
"""

import sys
import time

from xview_seg.core import RunConfig
from xview_seg.encoder import ToyEncoder
from xview_seg.head import SegmentationHead
from xview_seg.synthetic import generate_pairs
from xview_seg.training import evaluate, train

n = int(sys.argv[1]) if len(sys.argv) > 1 else 400
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 2
cfg = RunConfig.toy(epochs=epochs)
train_pairs = generate_pairs(n, "medium", seed=100)
test_pairs = generate_pairs(100, "medium", seed=200)
enc = ToyEncoder(cfg)

print(f"untrained IoU: {evaluate(SegmentationHead(cfg), enc, test_pairs, cfg).mean:.3f}")
start = time.perf_counter()
state = train(cfg, train_pairs, enc,
              on_step=lambda s, r: r.step % 25 == 0 and print(f"  step {r.step:4d} epoch {r.epoch} loss {r.loss:.4f}"))
print(f"trained {len(state.steps)} steps in {time.perf_counter() - start:.0f}s")
for iters in (0, 2):
    rep = evaluate(state.head, enc, test_pairs, cfg, refine_iters=iters)
    print(f"refine_iters={iters}: mean IoU {rep.mean:.3f} (95% CI {rep.ci_low:.3f}-{rep.ci_high:.3f})")
print("reverse direction:", round(evaluate(state.head, enc, test_pairs, cfg, direction="t2s").mean, 3))
