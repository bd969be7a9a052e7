import json

import numpy as np
import pytest

from xview_seg.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, Parser, bench_forward, build_config, main, make_parser
from xview_seg.core import RunConfig, read_image, read_mask
from xview_seg.encoder import ToyEncoder
from xview_seg.head import SegmentationHead
from xview_seg.synthetic import generate_pairs
from xview_seg.training import score

TRAIN = ["--preset", "toy", "--set", "channels=32", "--epochs", "1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--n", "20", "--seed", "7", "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), *TRAIN]) == EXIT_OK
    return root


def _parse(argv):
    return make_parser().parse_args(argv)


def test_gen_is_byte_identical_on_rerun(workspace, tmp_path):
    assert main(["gen", "--n", "20", "--seed", "7", "--out", str(tmp_path / "again")]) == EXIT_OK
    for f in sorted((workspace / "data").rglob("*.png")):
        assert f.read_bytes() == (tmp_path / "again" / f.relative_to(workspace / "data")).read_bytes()
    assert (workspace / "data" / "manifest.txt").read_bytes() == (tmp_path / "again" / "manifest.txt").read_bytes()


def test_gen_rejects_zero_pairs(tmp_path, capsys):
    assert main(["gen", "--n", "0", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_default_flags_encode_reference_setting():
    c = build_config(_parse(["train", "--data", "d", "--out", "o"]))
    assert (c.k_points, c.fusion_grid, c.decoder_blocks, c.effective_refine_iters, c.image_size) == (5, 37, 2, 2, 518)


@pytest.mark.parametrize(
    "flag,expect",
    [
        ("plain", (False, False, 0)),
        ("bf", (True, False, 0)),
        ("pgp", (True, True, 0)),
        ("mr", (True, True, 2)),
    ],
)
def test_ablation_flags(flag, expect):
    c = build_config(_parse(["train", "--data", "d", "--out", "o", "--ablate", flag]))
    assert (c.use_fusion, c.use_points, c.effective_refine_iters) == expect


def test_axis_flags():
    c = build_config(_parse(["train", "--data", "d", "--out", "o", "--points", "9", "--blocks", "3",
                             "--refine-iters", "0", "--image-size", "420", "--fusion-size", "30"]))
    assert (c.k_points, c.decoder_blocks, c.effective_refine_iters, c.image_size, c.fusion_grid) == (9, 3, 0, 420, 30)


@pytest.mark.parametrize(
    "argv",
    [
        ["--fusion-size", "36"],
        ["--ablate", "pgp", "--refine-iters", "2"],
        ["--points", "4"],
        ["--set", "nonsense=1"],
        ["--image-size", "71"],
    ],
)
def test_invalid_combinations_are_usage_errors(argv, tmp_path):
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), *argv]) == EXIT_USAGE


def test_config_file_then_flags_precedence(tmp_path):
    RunConfig.toy(k_points=9, decoder_blocks=3).write(tmp_path / "c.ini")
    c = build_config(_parse(["train", "--data", "d", "--out", "o", "--config", str(tmp_path / "c.ini"),
                             "--blocks", "1"]))
    assert c.k_points == 9 and c.decoder_blocks == 1 and c.image_size == 70


def test_train_writes_checkpoint_log_and_manifest(workspace):
    run = workspace / "run"
    assert (run / "checkpoint" / "manifest.txt").exists() and (run / "checkpoint" / "params.bin").exists()
    assert (run / "metrics.log").read_text().count("\n") == 3  # 18 train pairs, batch 8
    man = json.loads((run / "run_manifest.json").read_text())
    assert man["config"]["channels"] == 32 and man["seed"] == 0
    assert {"git", "started", "finished", "metrics", "artifacts"} <= set(man)


def test_eval_reports_and_missing_checkpoint(workspace, tmp_path, capsys):
    rep = tmp_path / "rep.txt"
    argv = ["eval", "--checkpoint", str(workspace / "run" / "checkpoint"), "--data", str(workspace / "data"),
            "--direction", "both", "--report", str(rep)]
    assert main(argv) == EXIT_OK
    out = capsys.readouterr().out
    assert "direction=s2t" in out and "direction=t2s" in out and "ci95_low" in out
    assert len(rep.read_text().splitlines()) == 2 + 2 * 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(workspace / "data")]) == EXIT_RUNTIME


def test_score_fixtures():
    gts = [p.mask_t for p in generate_pairs(4, "easy", 0)]
    assert score([g.astype(float) for g in gts], gts).mean == 1.0
    assert score([np.zeros_like(g, dtype=float) for g in gts], gts).mean == 0.0


def test_infer_outputs(workspace, tmp_path, capsys):
    data = workspace / "data"
    src = data / "images" / "val" / "000018_s.png"
    msk = data / "masks" / "val" / "000018_s.png"
    out = tmp_path / "out"
    argv = ["infer", "--checkpoint", str(workspace / "run" / "checkpoint"), "--source-image", str(src),
            "--source-mask", str(msk), "--target-image", str(src), "--out", str(out)]
    assert main(argv) == EXIT_OK
    assert "iou_vs_source_mask=" in capsys.readouterr().out
    for name in ("pred_mask.png", "overlay_source.png", "overlay_target.png"):
        assert (out / name).exists()
    assert read_image(out / "overlay_target.png").shape == read_image(src).shape
    assert read_mask(out / "pred_mask.png").shape == (70, 70)


def test_infer_rejects_empty_mask(workspace, tmp_path):
    from xview_seg.core import write_mask

    write_mask(np.zeros((70, 70), np.uint8), tmp_path / "empty.png")
    src = workspace / "data" / "images" / "val" / "000018_s.png"
    argv = ["infer", "--checkpoint", str(workspace / "run" / "checkpoint"), "--source-image", str(src),
            "--source-mask", str(tmp_path / "empty.png"), "--target-image", str(src), "--out", str(tmp_path / "o")]
    assert main(argv) == EXIT_RUNTIME


def test_bench_counts_and_ordering(workspace, tmp_path):
    rep = tmp_path / "bench.txt"
    ck = str(workspace / "run" / "checkpoint")
    assert main(["bench", "--checkpoint", ck, "--report", str(rep), "--refine-iters", "3"]) == EXIT_OK
    lines = rep.read_text().splitlines()
    assert sum(line.startswith("sample=") for line in lines) == 100
    cfg = RunConfig.toy(channels=32)
    pair = generate_pairs(1, "medium", 0)[0]
    enc = ToyEncoder(cfg)
    slow = bench_forward(SegmentationHead(cfg.replace(refine_iters=3)), enc, pair, 10, 100)
    fast = bench_forward(SegmentationHead(cfg.replace(refine_iters=0)), enc, pair, 10, 100)
    assert len(slow) == len(fast) == 100
    assert slow.mean() >= fast.mean()


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == EXIT_OK
    assert main([]) == EXIT_USAGE
