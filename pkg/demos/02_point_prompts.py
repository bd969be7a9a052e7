"""Point prompts: k-means++ seeding, a single Lloyd step, and tracking.

The source mask is summarised by K foreground pixels. Seeding is k-means++,
followed by exactly one assignment/update step; each centroid is then
snapped to the nearest foreground pixel so every prompt lies on the object.
A tracker moves the points into the target view.
"""

import numpy as np
import torch

from xview_seg.core import RunConfig
from xview_seg.encoder import FeatureCorrelationTracker, GroundTruthTracker, ToyEncoder, to_tensor_images, track_points
from xview_seg.prediction import sample_points
from xview_seg.synthetic import generate_pairs

pair = generate_pairs(1, "medium", seed=7)[0]
for k in (1, 5, 9):
    pts = sample_points(pair.mask_s, k, rng=0)
    on_object = all(pair.mask_s[int(y), int(x)] for x, y in pts.points)
    print(f"K={k}: {pts.points.tolist()}  all on object: {on_object}")

# Same seed, same points; the draws are fully determined by the rng.
assert np.array_equal(sample_points(pair.mask_s, 5, 1).points, sample_points(pair.mask_s, 5, 1).points)

pts = sample_points(pair.mask_s, 5, rng=0).points
exact = track_points(pts, pair.image_s, pair.image_t, GroundTruthTracker(pair.transform.apply))

# A learned tracker would go here; the toy encoder's features give a weak
# nearest-neighbour tracker, good enough to see the interface.
cfg = RunConfig.toy()
enc = ToyEncoder(cfg)
with torch.no_grad():
    f_s, f_t = enc(to_tensor_images(pair.image_s), to_tensor_images(pair.image_t))
approx = track_points(pts, pair.image_s, pair.image_t, FeatureCorrelationTracker(enc).with_features(f_s, f_t))
print("tracking error (px) of the feature tracker:", np.linalg.norm(exact - approx, axis=1).round(1))
