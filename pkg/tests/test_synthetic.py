import numpy as np
import pytest

from xview_seg.core import RunConfig, iou
from xview_seg.encoder import ToyEncoder
from xview_seg.head import SegmentationHead
from xview_seg.synthetic import (
    ViewTransform,
    export_dataset,
    generate_pairs,
    generate_scene,
    load_dataset,
    parse_manifest,
    render_pair,
    sample_pair,
    transfer_iou,
)
from xview_seg.training import evaluate


def _grid(size):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return xs, ys


def test_scene_is_seed_deterministic():
    a = render_pair(generate_scene(np.random.default_rng(3), "hard"), ViewTransform.identity())
    b = render_pair(generate_scene(np.random.default_rng(3), "hard"), ViewTransform.identity())
    assert np.array_equal(a.image_s, b.image_s) and np.array_equal(a.mask_s, b.mask_s)


@pytest.mark.parametrize("difficulty,lo,hi", [("easy", 1, 3), ("medium", 3, 6), ("hard", 5, 9)])
def test_instance_counts(difficulty, lo, hi):
    rng = np.random.default_rng(0)
    extra = 0 if difficulty == "easy" else 2  # up to two look-alike distractors
    for _ in range(30):
        s = generate_scene(rng, difficulty)
        assert lo <= len(s.instances) <= hi + extra
        assert bool(s.occluders) == (difficulty == "hard")


def test_hard_query_stays_visible():
    rng = np.random.default_rng(1)
    xs, ys = _grid(70)
    for _ in range(40):
        s = generate_scene(rng, "hard")
        full = s.instances[s.query].inside(xs, ys).sum()
        visible = (s.labels(xs.ravel(), ys.ravel()) == s.query).sum()
        assert visible / full >= 0.2


def test_identity_and_translation_pairs():
    scene = generate_scene(np.random.default_rng(4), "medium")
    p = render_pair(scene, ViewTransform.identity())
    assert np.array_equal(p.image_s, p.image_t) and np.array_equal(p.mask_s, p.mask_t)
    t = render_pair(scene, ViewTransform.translation(4, -3))
    shifted = np.zeros_like(t.mask_s)
    shifted[0:67, 4:] = t.mask_s[3:70, 0:66]
    assert np.array_equal(t.mask_t, shifted)


def test_warp_agrees_with_rerasterised_mask_at_full_size():
    rng = np.random.default_rng(2)
    for _ in range(5):
        scene = generate_scene(rng, "easy", 518)
        t = ViewTransform.similarity(518, float(rng.uniform(0.8, 1.2)), float(rng.uniform(-20, 20)),
                                     *rng.uniform(-30, 30, 2))
        assert transfer_iou(render_pair(scene, t)) >= 0.98


def test_generated_pairs_keep_the_query_in_frame():
    for p in generate_pairs(20, "hard", 0):
        assert p.mask_s.any() and p.mask_t.any()
        assert not np.array_equal(p.image_s, p.image_t)


def test_generation_is_deterministic():
    a = generate_pairs(5, "medium", 7)
    b = generate_pairs(5, "medium", 7)
    for x, y in zip(a, b):
        assert np.array_equal(x.image_t, y.image_t) and np.array_equal(x.mask_t, y.mask_t)


def test_export_split_round_trip_and_determinism(tmp_path):
    export_dataset(20, tmp_path / "a", split=0.9, seed=5)
    export_dataset(20, tmp_path / "b", split=0.9, seed=5)
    rows = parse_manifest(tmp_path / "a" / "manifest.txt")
    assert len(rows) == 20
    assert sum(r["split"] == "train" for r in rows) == 18
    for f in sorted((tmp_path / "a").rglob("*.png")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    assert (tmp_path / "a" / "images" / "val").is_dir() and (tmp_path / "a" / "masks" / "train").is_dir()
    loaded = load_dataset(tmp_path / "a")
    fresh = generate_pairs(20, "medium", 5)
    for x, y in zip(loaded, fresh):
        assert np.array_equal(x.mask_s, y.mask_s) and np.array_equal(x.mask_t, y.mask_t)
        assert transfer_iou(x) >= 0.9


def test_export_full_size_counts(tmp_path):
    export_dataset(2000, tmp_path, split=0.9, seed=0)
    rows = parse_manifest(tmp_path / "manifest.txt")
    assert len((tmp_path / "manifest.txt").read_text().splitlines()) == 2000
    assert sum(r["split"] == "train" for r in rows) == 1800
    assert sum(r["split"] == "val" for r in rows) == 200


def test_export_rejects_bad_arguments(tmp_path):
    with pytest.raises(ValueError):
        export_dataset(0, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        export_dataset(1, blocker / "sub")


def test_untrained_iou_does_not_rise_with_difficulty():
    cfg = RunConfig.toy()
    enc = ToyEncoder(cfg)
    means = {}
    for d in ("easy", "medium", "hard"):
        vals = [evaluate(SegmentationHead(cfg.replace(seed=s)), enc, generate_pairs(40, d, 50 + s), cfg).mean
                for s in range(3)]
        means[d] = float(np.mean(vals))
    assert means["easy"] >= means["medium"] >= means["hard"], means
