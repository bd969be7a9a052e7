"""Command-line entry point: gen, train, eval, infer, bench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from .core import (
    RunConfig,
    atomic_write_text,
    binarize,
    coerce_fields,
    iou,
    read_image,
    read_mask,
    write_image,
    write_mask,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

ABLATIONS = {
    "plain": dict(use_fusion=False, use_points=False, use_refinement=False),
    "bf": dict(use_fusion=True, use_points=False, use_refinement=False),
    "pgp": dict(use_fusion=True, use_points=True, use_refinement=False),
    "mr": dict(use_fusion=True, use_points=True, use_refinement=True),
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


class RunManifest:
    """Record of one command invocation, written atomically when it ends."""

    def __init__(self, command: str, config: RunConfig | None, seed: int | None, argv: Sequence[str]):
        self.data: dict[str, Any] = dict(
            command=command,
            argv=list(argv),
            config=config.to_dict() if config else None,
            seed=seed,
            git=git_describe(),
            started=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            metrics={},
            artifacts={},
        )

    def write(self, path: Path) -> None:
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        atomic_write_text(path, json.dumps(self.data, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ config


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file ([run] section)")
    p.add_argument("--preset", choices=["toy", "full"], default=None,
                   help="built-in defaults (toy: 70x70 desk scale; full: 518x518)")
    p.add_argument("--ablate", choices=sorted(ABLATIONS))
    p.add_argument("--points", type=int, choices=[1, 5, 9])
    p.add_argument("--fusion-size", type=int, help="bottleneck grid side; must divide the feature resolution")
    p.add_argument("--blocks", type=int, choices=[1, 2, 3, 6])
    p.add_argument("--refine-iters", type=int, choices=[0, 1, 2, 3])
    p.add_argument("--image-size", type=int, help="420, 518 or 700 (any multiple of 14 with a valid fusion size)")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any RunConfig field")


def build_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    """Precedence: command-line flags > config file > built-in defaults."""
    values: dict[str, Any] = (base or (RunConfig.toy() if args.preset == "toy" else RunConfig())).to_dict()
    if getattr(args, "config", None):
        import configparser

        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise UsageError(f"cannot read config file {args.config}")
        for section in cp.sections():
            values.update(coerce_fields(dict(cp[section])))
    flags: dict[str, Any] = {}
    if args.ablate:
        flags.update(ABLATIONS[args.ablate])
    if args.points is not None:
        flags["k_points"] = args.points
    if args.blocks is not None:
        flags["decoder_blocks"] = args.blocks
    if args.refine_iters is not None:
        flags["refine_iters"] = args.refine_iters
        if args.refine_iters == 0:
            flags["use_refinement"] = False
    if args.image_size is not None:
        flags["image_size"] = args.image_size
    if args.seed is not None:
        flags["seed"] = args.seed
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        try:
            flags.update(coerce_fields({k.strip().replace("-", "_"): v.strip()}))
        except (KeyError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
    if args.ablate and args.refine_iters and not flags.get("use_refinement", True):
        raise UsageError(f"--ablate {args.ablate} disables refinement; --refine-iters {args.refine_iters} conflicts")
    values.update(flags)
    if args.fusion_size is not None:
        feat = values["image_size"] // 2
        if args.fusion_size < 1 or feat % args.fusion_size:
            raise UsageError(f"--fusion-size {args.fusion_size} does not divide feature resolution {feat}")
        values["fusion_ratio"] = feat // args.fusion_size
    values["decay_epochs"] = tuple(values["decay_epochs"])
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _encoder_for(config: RunConfig):
    from .encoder import ToyEncoder

    return ToyEncoder(config)


# ------------------------------------------------------------------ commands


def cmd_gen(args, argv) -> int:
    from .synthetic import export_dataset

    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if not 0 < args.split <= 1:
        raise UsageError("--split must be in (0, 1]")
    out = Path(args.out)
    man = RunManifest("gen", None, args.seed, argv)
    path = export_dataset(args.n, out, split=args.split, difficulty=args.difficulty, seed=args.seed, size=args.image_size)
    man.data["artifacts"] = {"dataset": str(out), "manifest": str(path)}
    man.data["metrics"] = {"pairs": args.n}
    man.write(out / "run_manifest.json")
    print(f"wrote {args.n} pairs to {out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    from .synthetic import load_dataset
    from .training import train

    config = build_config(args)
    if args.epochs is not None:
        config = config.replace(epochs=args.epochs)
    if args.lr is not None:
        config = config.replace(lr=args.lr)
    pairs = load_dataset(args.data, "train")
    if not pairs:
        raise RuntimeError(f"no training pairs in {args.data}")
    if pairs[0].image_s.shape[0] != config.image_size:
        raise UsageError(f"dataset image size {pairs[0].image_s.shape[0]} != configured {config.image_size}")
    out = Path(args.out)
    man = RunManifest("train", config, config.seed, argv)
    state = train(config, pairs, _encoder_for(config), out_dir=out)
    last = state.steps[-1] if state.steps else None
    man.data["metrics"] = dict(
        steps=len(state.steps),
        epochs=state.epoch,
        final_loss=last.loss if last else None,
        encoder_checksum=state.encoder_checksum,
    )
    man.data["artifacts"] = {"checkpoint": str(out / "checkpoint"), "metrics_log": str(out / "metrics.log")}
    man.write(out / "run_manifest.json")
    print(f"trained {len(state.steps)} steps; checkpoint at {out / 'checkpoint'}")
    return EXIT_OK


def _load(checkpoint: str):
    from .training import load_checkpoint

    if not Path(checkpoint, "manifest.txt").exists():
        raise FileNotFoundError(f"missing checkpoint: {checkpoint}")
    return load_checkpoint(checkpoint)


def cmd_eval(args, argv) -> int:
    from .synthetic import load_dataset
    from .training import evaluate

    config, head = _load(args.checkpoint)
    pairs = load_dataset(args.data, args.split)
    if not pairs:
        raise RuntimeError(f"no {args.split} pairs in {args.data}")
    encoder = _encoder_for(config)
    directions = ["s2t", "t2s"] if args.direction == "both" else [args.direction]
    lines, metrics = [], {}
    for d in directions:
        rep = evaluate(head, encoder, pairs, config, seed=args.seed, direction=d)
        prefix = f"split={args.split} direction={d} "
        lines += rep.lines(prefix)
        metrics[d] = dict(mean_iou=rep.mean, ci95=[rep.ci_low, rep.ci_high], n=len(rep.ious))
        for i, v in enumerate(rep.ious):
            lines.append(f"{prefix}pair={pairs[i].pair_id} iou={float(v)!r}")
    for line in lines:
        if " pair=" not in line:
            print(line)
    report = Path(args.report) if args.report else Path(args.checkpoint).parent / f"eval_{args.split}.txt"
    atomic_write_text(report, "\n".join(lines) + "\n")
    man = RunManifest("eval", config, args.seed, argv)
    man.data["metrics"] = metrics
    man.data["artifacts"] = {"report": str(report)}
    man.write(report.with_suffix(".manifest.json"))
    return EXIT_OK


def _tint(image: np.ndarray, mask: np.ndarray, color, alpha=0.45) -> np.ndarray:
    out = image.copy()
    m = mask.astype(bool)
    out[m] = (1 - alpha) * out[m] + alpha * np.asarray(color, dtype=np.float32)
    return out


def _draw_points(image: np.ndarray, points: np.ndarray, color, radius: int = 2) -> np.ndarray:
    out = image.copy()
    h, w = out.shape[:2]
    for x, y in np.rint(points).astype(int):
        out[max(0, y - radius):min(h, y + radius + 1), min(max(x, 0), w - 1)] = color
        out[min(max(y, 0), h - 1), max(0, x - radius):min(w, x + radius + 1)] = color
    return out


def cmd_infer(args, argv) -> int:
    from .encoder import FeatureCorrelationTracker, to_tensor_images
    from .head import prompts_for

    config, head = _load(args.checkpoint)
    encoder = _encoder_for(config)
    image_s, image_t = read_image(args.source_image), read_image(args.target_image)
    m_s = read_mask(args.source_mask)
    if not m_s.any():
        raise ValueError("empty source mask")
    if image_s.shape != image_t.shape or m_s.shape != image_s.shape[:2]:
        raise ValueError("source image, source mask and target image must share one size")
    f_s, f_t = encoder(to_tensor_images(image_s), to_tensor_images(image_t))
    tracker = FeatureCorrelationTracker(encoder).with_features(f_s, f_t)
    rng = np.random.default_rng(args.seed)
    p_s, p_t = prompts_for(m_s, config.k_points, rng, tracker, image_s, image_t)
    with torch.no_grad():
        out = head(
            f_s, f_t,
            torch.from_numpy(m_s.astype(np.float32))[None],
            torch.from_numpy(p_s.astype(np.float32))[None],
            torch.from_numpy(p_t.astype(np.float32))[None],
        )
    pred = binarize(out.mask[0].numpy())
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "mask": out_dir / "pred_mask.png",
        "overlay_source": out_dir / "overlay_source.png",
        "overlay_target": out_dir / "overlay_target.png",
    }
    write_mask(pred, paths["mask"])
    write_image(_draw_points(_tint(image_s, m_s, (0.1, 0.9, 0.2)), p_s, (1.0, 0.1, 0.1)), paths["overlay_source"])
    write_image(_draw_points(_tint(image_t, pred, (0.1, 0.4, 1.0)), p_t, (1.0, 0.1, 0.1)), paths["overlay_target"])
    score = iou(pred, m_s)
    print(f"iou_vs_source_mask={score!r} foreground_pixels={int(pred.sum())}")
    for k, p in paths.items():
        print(f"{k}={p}")
    man = RunManifest("infer", config, args.seed, argv)
    man.data["metrics"] = {"iou_vs_source_mask": score}
    man.data["artifacts"] = {k: str(v) for k, v in paths.items()}
    man.write(out_dir / "run_manifest.json")
    return EXIT_OK


def bench_forward(head, encoder, pair, warmup: int = 10, passes: int = 100) -> np.ndarray:
    """Milliseconds per end-to-end forward pass on one pair, warmup excluded."""
    from .encoder import GroundTruthTracker, to_tensor_images
    from .head import prompts_for

    rng = np.random.default_rng(0)
    p_s, p_t = prompts_for(pair.mask_s, head.config.k_points, rng, GroundTruthTracker(pair.transform.apply),
                           pair.image_s, pair.image_t)
    i_s, i_t = to_tensor_images(pair.image_s), to_tensor_images(pair.image_t)
    m_s = torch.from_numpy(pair.mask_s.astype(np.float32))[None]
    ps = torch.from_numpy(p_s.astype(np.float32))[None]
    pt = torch.from_numpy(p_t.astype(np.float32))[None]

    def once():
        with torch.no_grad():
            f_s, f_t = encoder(i_s, i_t)
            head(f_s, f_t, m_s, ps, pt)

    for _ in range(warmup):
        once()
    times = np.empty(passes)
    for i in range(passes):
        t0 = time.perf_counter()
        once()
        times[i] = (time.perf_counter() - t0) * 1000.0
    return times


def cmd_bench(args, argv) -> int:
    from .head import SegmentationHead
    from .synthetic import generate_pairs

    if args.passes < 1 or args.warmup < 0:
        raise UsageError("--passes must be >= 1 and --warmup >= 0")
    if args.checkpoint:
        config, head = _load(args.checkpoint)
        config = build_config(args, base=config)
        if config != head.config:
            state = head.state_dict()
            head = SegmentationHead(config)
            head.load_state_dict(state, strict=False)
    else:
        config = build_config(args)
        head = SegmentationHead(config)
    head.eval()
    pair = generate_pairs(1, "medium", config.seed, config.image_size)[0]
    times = bench_forward(head, _encoder_for(config), pair, args.warmup, args.passes)
    lines = [
        f"image_size={config.image_size} refine_iters={config.effective_refine_iters} "
        f"blocks={config.decoder_blocks} points={config.k_points} fusion={config.use_fusion} "
        f"warmup={args.warmup} passes={len(times)} mean_ms={times.mean():.3f} std_ms={times.std():.3f}"
    ]
    print(lines[0])
    if args.report:
        body = lines + [f"sample={i} ms={t:.4f}" for i, t in enumerate(times)]
        atomic_write_text(args.report, "\n".join(body) + "\n")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def make_parser() -> Parser:
    p = Parser(prog="xview-seg", description="Cross-view object mask transfer on synthetic two-view data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gen", help="generate a synthetic two-view dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--difficulty", choices=["easy", "medium", "hard"], default="medium")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", type=float, default=0.9, help="train fraction")
    g.add_argument("--image-size", type=int, default=70)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train the segmentation head")
    _add_model_flags(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)

    e = sub.add_parser("eval", help="mean IoU with a bootstrap interval")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--direction", choices=["s2t", "t2s", "both"], default="s2t")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report")

    i = sub.add_parser("infer", help="predict one target mask and write overlays")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--source-image", required=True)
    i.add_argument("--source-mask", required=True)
    i.add_argument("--target-image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench", help="time end-to-end forward passes")
    _add_model_flags(b)
    b.add_argument("--checkpoint")
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--passes", type=int, default=100)
    b.add_argument("--report")
    return p


COMMANDS = dict(gen=cmd_gen, train=cmd_train, eval=cmd_eval, infer=cmd_infer, bench=cmd_bench)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
