"""Self-supervised and paired training of the segmentation head."""

from __future__ import annotations

import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .core import RunConfig, atomic_write_text, clamp_points, iou, binarize
from .encoder import (
    FeatureCorrelationTracker,
    GroundTruthTracker,
    ToyEncoder,
    param_checksum,
    to_tensor_images,
    track_points,
)
from .head import SegmentationHead
from .prediction import sample_points
from .refinement import refine_schedule

log = logging.getLogger(__name__)

EPS = 1e-7


class NonFiniteLossError(RuntimeError):
    pass


class AugmentationError(RuntimeError):
    pass


# ------------------------------------------------------------------ losses


def focal_loss(pred: torch.Tensor, gt: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Mean over pixels (then over the batch) of -a_t (1 - p_t)^g log p_t."""
    p = pred.clamp(EPS, 1 - EPS)
    gt = gt.to(p.dtype)
    p_t = p * gt + (1 - p) * (1 - gt)
    a_t = alpha * gt + (1 - alpha) * (1 - gt)
    per_pixel = -a_t * (1 - p_t) ** gamma * torch.log(p_t)
    if per_pixel.dim() >= 3:
        return per_pixel.flatten(1).mean(dim=1).mean()
    return per_pixel.mean()


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    gt = gt.to(pred.dtype)
    if pred.dim() >= 3:
        inter = (pred * gt).flatten(1).sum(dim=1)
        denom = pred.flatten(1).sum(dim=1) + gt.flatten(1).sum(dim=1)
        return (1 - (2 * inter + smooth) / (denom + smooth)).mean()
    return 1 - (2 * (pred * gt).sum() + smooth) / (pred.sum() + gt.sum() + smooth)


@dataclass
class LossReport:
    focal: torch.Tensor
    dice: torch.Tensor
    total: torch.Tensor
    focal_weight: float = 20.0
    dice_weight: float = 1.0

    def as_floats(self) -> dict[str, float]:
        return dict(focal=self.focal.item(), dice=self.dice.item(), total=self.total.item())


def total_loss(pred: torch.Tensor, gt: torch.Tensor, config: RunConfig | None = None) -> LossReport:
    cfg = config or RunConfig.toy()
    f = focal_loss(pred, gt, cfg.focal_alpha, cfg.focal_gamma)
    d = dice_loss(pred, gt)
    return LossReport(f, d, cfg.focal_weight * f + cfg.dice_weight * d, cfg.focal_weight, cfg.dice_weight)


# ------------------------------------------------------------------ augmentation


@dataclass
class AugmentRecord:
    family: str  # adaptive | non_adaptive
    matrix: np.ndarray  # 3x3, source pixel (x, y) -> augmented pixel
    scale: float = 1.0
    angle: float = 0.0
    flip: bool = False
    crop: tuple[float, float, float] = (0.0, 0.0, 1.0)  # (x0, y0, side fraction)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        h = np.concatenate([p, np.ones((len(p), 1))], axis=1) @ self.matrix.T
        return h[:, :2] / h[:, 2:3]


@dataclass
class AugmentedPair:
    image_s: np.ndarray
    image_t: np.ndarray
    mask_s: np.ndarray
    mask_t: np.ndarray
    record: AugmentRecord

    @property
    def family(self) -> str:
        return self.record.family


def _rotation(size_hw, angle_deg: float, scale: float = 1.0) -> np.ndarray:
    h, w = size_hw
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    th = np.deg2rad(angle_deg)
    r = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]) * scale
    m = np.eye(3)
    m[:2, :2] = r
    m[:2, 2] = c - r @ c
    return m


def _clean(m: np.ndarray) -> np.ndarray:
    r = np.round(m)
    return np.where(np.abs(m - r) < 1e-12, r, m)


def warp(array: np.ndarray, matrix: np.ndarray, order: int) -> np.ndarray:
    """out(p) = array(matrix^-1 p) with (x, y) pixel convention; zero outside."""
    inv = _clean(np.linalg.inv(matrix))
    # scipy works in (row, col) = (y, x) index order
    swap = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=np.float64)
    m = swap @ inv @ swap
    if array.ndim == 2:
        return ndimage.affine_transform(array, m[:2, :2], offset=m[:2, 2], order=order, mode="constant", cval=0)
    out = np.empty_like(array)
    for ch in range(array.shape[2]):
        out[..., ch] = ndimage.affine_transform(
            array[..., ch], m[:2, :2], offset=m[:2, 2], order=order, mode="constant", cval=0
        )
    return out


def apply_augmentation(image: np.ndarray, mask: np.ndarray, record: AugmentRecord) -> tuple[np.ndarray, np.ndarray]:
    if np.allclose(record.matrix, np.eye(3), atol=0, rtol=0):
        return image.copy(), mask.copy()
    img = np.clip(warp(image.astype(np.float32), record.matrix, order=1), 0.0, 1.0)
    return img.astype(np.float32), warp(mask.astype(np.uint8), record.matrix, order=0)


def _random_record(shape_hw, mask: np.ndarray, family: str, rng: np.random.Generator) -> AugmentRecord:
    h, w = shape_hw
    if family == "adaptive":
        scale = float(rng.uniform(0.7, 1.3))
        angle = float(rng.uniform(-15.0, 15.0))
        m = _rotation(shape_hw, angle, scale)
        side = float(np.sqrt(rng.uniform(0.6, 1.0)))
        cw, ch = side * w, side * h
        ys, xs = np.nonzero(mask)
        box = AugmentRecord("adaptive", m).apply_points(
            np.array([[xs.min(), ys.min()], [xs.max(), ys.min()], [xs.min(), ys.max()], [xs.max(), ys.max()]])
        )
        lo, hi = box.min(axis=0), box.max(axis=0)
        # keep the whole object in the crop where the window allows it
        x_lo, x_hi = max(0.0, hi[0] - cw + 1), min(w - cw, lo[0])
        y_lo, y_hi = max(0.0, hi[1] - ch + 1), min(h - ch, lo[1])
        x0 = float(rng.uniform(x_lo, x_hi)) if x_lo <= x_hi else float(rng.uniform(0, w - cw))
        y0 = float(rng.uniform(y_lo, y_hi)) if y_lo <= y_hi else float(rng.uniform(0, h - ch))
        zoom = np.diag([1.0 / side, 1.0 / side, 1.0])
        shift = np.eye(3)
        shift[:2, 2] = [-x0, -y0]
        return AugmentRecord("adaptive", zoom @ shift @ m, scale, angle, False, (x0, y0, side))
    if family == "non_adaptive":
        if rng.random() < 0.5:
            m = np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
            return AugmentRecord("non_adaptive", m, flip=True)
        angle = float(90 * rng.integers(1, 4) + rng.uniform(-15.0, 15.0))
        return AugmentRecord("non_adaptive", _rotation(shape_hw, angle), angle=angle)
    raise ValueError(f"unknown augmentation family {family!r}")


def augment(
    image: np.ndarray, mask: np.ndarray, family: str, rng: np.random.Generator, retries: int = 20
) -> AugmentedPair:
    """Random view of a single image; resampled while the object falls out of frame."""
    if not np.any(mask):
        raise ValueError("empty mask")
    for _ in range(retries):
        rec = _random_record(mask.shape, mask, family, rng)
        img_t, m_t = apply_augmentation(image, mask, rec)
        if m_t.any():
            return AugmentedPair(image, img_t, np.asarray(mask, dtype=np.uint8), m_t, rec)
    raise AugmentationError("object lost under augmentation")


def synthesize_prompts(
    pair: AugmentedPair,
    k: int,
    rng: np.random.Generator,
    tracker=None,
    noise: float = 0.02,
) -> tuple[np.ndarray, np.ndarray]:
    """Source points by k-means; target points tracked (adaptive) or perturbed (non-adaptive)."""
    p_s = sample_points(pair.mask_s, k, rng).points
    h, w = pair.image_t.shape[:2]
    if pair.family == "adaptive":
        tr = tracker or GroundTruthTracker(pair.record.apply_points)
        return p_s, track_points(p_s, pair.image_s, pair.image_t, tr)
    p_t = pair.record.apply_points(p_s)
    sigma = noise * float(np.hypot(h, w))
    if sigma > 0:
        p_t = p_t + rng.normal(0.0, sigma, p_t.shape)
    return p_s, clamp_points(p_t, h, w)


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    f_s: torch.Tensor
    f_t: torch.Tensor
    m_s: torch.Tensor
    m_t: torch.Tensor
    p_s: torch.Tensor
    p_t: torch.Tensor
    families: list[str] = field(default_factory=list)


def _tracker_for(config: RunConfig, encoder, transform_fn, f_s=None, f_t=None):
    if config.tracker == "ground_truth":
        return GroundTruthTracker(transform_fn)
    if config.tracker == "feature_correlation":
        return FeatureCorrelationTracker(encoder).with_features(f_s, f_t)
    raise ValueError(f"unknown tracker {config.tracker!r}")


def make_batch(
    samples: Sequence[Any],
    encoder: ToyEncoder,
    config: RunConfig,
    rng: np.random.Generator,
    mode: str | None = None,
    dtype=torch.float32,
) -> Batch:
    """Assemble encoder features, masks and prompts for a list of pairs.

    ``mode='paired'`` uses the pair's own target view and transform;
    ``mode='ssl'`` discards the target view and builds one by augmenting the
    source image (family chosen per sample).
    """
    mode = mode or config.train_mode
    views = []
    for s in samples:
        if mode == "ssl":
            fam = "adaptive" if rng.random() < config.family_mix else "non_adaptive"
            views.append(augment(s.image_s, s.mask_s, fam, rng))
        elif mode == "paired":
            views.append(s)
        else:
            raise ValueError(f"unknown training mode {mode!r}")
    enc_dtype = next(encoder.parameters()).dtype
    i_s = to_tensor_images(np.stack([v.image_s for v in views]), enc_dtype)
    i_t = to_tensor_images(np.stack([v.image_t for v in views]), enc_dtype)
    families = [getattr(v, "family", "paired") for v in views]
    joint = torch.tensor([f != "non_adaptive" for f in families])
    f_s, f_t = encoder(i_s, i_t, joint=joint)
    ps, pt = [], []
    for i, v in enumerate(views):
        if mode == "ssl":
            tracker = None
            if v.family == "adaptive" and config.tracker != "ground_truth":
                tracker = _tracker_for(config, encoder, None, f_s[i : i + 1], f_t[i : i + 1])
            a, b = synthesize_prompts(v, config.k_points, rng, tracker, config.prompt_noise)
        else:
            tracker = _tracker_for(config, encoder, v.transform.apply, f_s[i : i + 1], f_t[i : i + 1])
            a = sample_points(v.mask_s, config.k_points, rng).points
            b = track_points(a, v.image_s, v.image_t, tracker)
        ps.append(a)
        pt.append(b)
    return Batch(
        f_s.to(dtype),
        f_t.to(dtype),
        torch.from_numpy(np.stack([v.mask_s for v in views]).astype(np.float64)).to(dtype),
        torch.from_numpy(np.stack([v.mask_t for v in views]).astype(np.float64)).to(dtype),
        torch.from_numpy(np.stack(ps)).to(dtype),
        torch.from_numpy(np.stack(pt)).to(dtype),
        families,
    )


def batch_loss(head: SegmentationHead, batch: Batch, plan, training: bool, cached=None):
    out = head(batch.f_s, batch.f_t, batch.m_s, batch.p_s, batch.p_t, plan=plan, training=training, cached=cached)
    return total_loss(out.mask, batch.m_t, head.config), out


# ------------------------------------------------------------------ training


def lr_at(epoch: int, config: RunConfig) -> float:
    """Learning rate for 1-based ``epoch``."""
    passed = sum(epoch > e for e in config.decay_epochs)
    return config.lr * config.decay_factor**passed


def grad_norm(params) -> float:
    sq = [p.grad.detach().pow(2).sum() for p in params if p.grad is not None]
    if not sq:
        return 0.0
    return float(torch.stack(sq).sum().sqrt())


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    loss: float
    focal: float
    dice: float
    grad_norm: float
    clipped_norm: float


@dataclass
class TrainState:
    head: SegmentationHead
    optimizer: torch.optim.Optimizer
    config: RunConfig
    epoch: int = 0
    steps: list[StepRecord] = field(default_factory=list)
    encoder_checksum: str = ""
    rng_state: dict = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]


def train(
    config: RunConfig,
    dataset: Sequence[Any],
    encoder: ToyEncoder | None = None,
    out_dir: str | os.PathLike | None = None,
    head: SegmentationHead | None = None,
    max_steps: int | None = None,
    on_step: Callable[[TrainState, StepRecord], None] | None = None,
) -> TrainState:
    """AdamW with global-norm clipping and a step-decay schedule over ``config.epochs``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    encoder = encoder or ToyEncoder(config)
    if not encoder.frozen:
        raise ValueError("encoder must be frozen")
    torch.manual_seed(config.seed)
    head = head or SegmentationHead(config)
    params = [p for p in head.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.lr, betas=(0.9, 0.999), weight_decay=config.weight_decay)
    state = TrainState(head, opt, config, encoder_checksum=encoder.checksum())
    # separate streams so ablations that skip refinement still see identical batches
    order_ss, batch_ss, refine_ss = np.random.SeedSequence(config.seed).spawn(3)
    rng = np.random.default_rng(order_ss)
    batch_rng = np.random.default_rng(batch_ss)
    refine_rng = np.random.default_rng(refine_ss)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.log").write_text("")
    step = 0
    for epoch in range(1, config.epochs + 1):
        lr = lr_at(epoch, config)
        for g in opt.param_groups:
            g["lr"] = lr
        head.train()
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = make_batch([dataset[i] for i in idx], encoder, config, batch_rng)
            plan = refine_schedule(len(idx), config.effective_refine_iters, True, refine_rng)
            report, _ = batch_loss(head, batch, plan, training=True)
            if not torch.isfinite(report.total):
                _dump_batch(out, batch, idx)
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}: {report.as_floats()}")
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            pre = float(torch.nn.utils.clip_grad_norm_(params, config.clip_norm))
            post = grad_norm(params)
            opt.step()
            step += 1
            vals = report.as_floats()
            rec = StepRecord(epoch, step, lr, vals["total"], vals["focal"], vals["dice"], pre, post)
            state.steps.append(rec)
            if out is not None:
                _append_metrics(out / "metrics.log", rec)
            if on_step is not None:
                on_step(state, rec)
            if max_steps is not None and step >= max_steps:
                break
        state.epoch = epoch
        if out is not None:
            save_checkpoint(head, config, out / "checkpoint", extra={"epoch": epoch, "encoder_checksum": state.encoder_checksum})
        if max_steps is not None and step >= max_steps:
            break
        log.info("epoch %d done: lr=%g last loss=%.4f", epoch, lr, state.steps[-1].loss if state.steps else float("nan"))
    head.eval()
    state.rng_state = dict(
        order=rng.bit_generator.state, batch=batch_rng.bit_generator.state, refine=refine_rng.bit_generator.state
    )
    if encoder.checksum() != state.encoder_checksum:
        raise RuntimeError("encoder parameters changed during training")
    if out is not None and config.epochs == 0:
        save_checkpoint(head, config, out / "checkpoint", extra={"epoch": 0, "encoder_checksum": state.encoder_checksum})
    return state


def _append_metrics(path: Path, rec: StepRecord) -> None:
    with open(path, "a") as fh:
        fh.write(
            f"epoch={rec.epoch} step={rec.step} lr={rec.lr!r} loss={rec.loss!r} focal={rec.focal!r} "
            f"dice={rec.dice!r} grad_norm={rec.grad_norm!r} clipped_norm={rec.clipped_norm!r}\n"
        )


def _dump_batch(out: Path | None, batch: Batch, idx) -> None:
    target = out if out is not None else Path(tempfile.mkdtemp(prefix="xview_nonfinite_"))
    target.mkdir(parents=True, exist_ok=True)
    path = target / "nonfinite_batch.npz"
    np.savez(
        path,
        indices=np.asarray(idx),
        f_s=batch.f_s.numpy(),
        f_t=batch.f_t.numpy(),
        m_s=batch.m_s.numpy(),
        m_t=batch.m_t.numpy(),
        p_s=batch.p_s.numpy(),
        p_t=batch.p_t.numpy(),
    )
    log.error("non-finite loss; batch dumped to %s", path)


# ------------------------------------------------------------------ evaluation


def predict(
    head: SegmentationHead,
    encoder: ToyEncoder,
    pairs: Sequence[Any],
    config: RunConfig | None = None,
    seed: int = 0,
    batch_size: int = 16,
    refine_iters: int | None = None,
) -> list[np.ndarray]:
    """Probability masks for each pair (query source -> target)."""
    cfg = config or head.config
    rng = np.random.default_rng(seed)
    preds = []
    head.eval()
    for start in range(0, len(pairs), batch_size):
        chunk = list(pairs[start : start + batch_size])
        batch = make_batch(chunk, encoder, cfg, rng, mode="paired")
        n_iter = cfg.effective_refine_iters if refine_iters is None else refine_iters
        plan = refine_schedule(len(chunk), n_iter, training=False)
        with torch.no_grad():
            out = head(batch.f_s, batch.f_t, batch.m_s, batch.p_s, batch.p_t, plan=plan)
        preds.extend(m.numpy() for m in out.mask)
    return preds


@dataclass
class EvalReport:
    ious: np.ndarray
    mean: float
    ci_low: float
    ci_high: float

    def lines(self, prefix: str = "") -> list[str]:
        return [
            f"{prefix}n={len(self.ious)} mean_iou={self.mean!r} ci95_low={self.ci_low!r} ci95_high={self.ci_high!r}"
        ]


def bootstrap_ci(values: np.ndarray, seed: int = 0, n_boot: int = 1000) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return float("nan"), float("nan")
    rng = np.random.default_rng(seed)
    means = values[rng.integers(0, len(values), (n_boot, len(values)))].mean(axis=1)
    lo, hi = np.percentile(means, [2.5, 97.5])
    return float(lo), float(hi)


def evaluate(
    head: SegmentationHead,
    encoder: ToyEncoder,
    pairs: Sequence[Any],
    config: RunConfig | None = None,
    seed: int = 0,
    direction: str = "s2t",
    refine_iters: int | None = None,
) -> EvalReport:
    if direction == "t2s":
        pairs = [p.swapped() for p in pairs]
    elif direction != "s2t":
        raise ValueError(f"unknown direction {direction!r}")
    preds = predict(head, encoder, pairs, config, seed, refine_iters=refine_iters)
    return score(preds, [p.mask_t for p in pairs], seed)


def score(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], seed: int = 0) -> EvalReport:
    ious = np.array([iou(binarize(p), g) for p, g in zip(preds, gts)])
    lo, hi = bootstrap_ci(ious, seed)
    return EvalReport(ious, float(ious.mean()), lo, hi)


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(
    head: SegmentationHead, config: RunConfig, directory: str | os.PathLike, extra: dict | None = None
) -> Path:
    """Directory with manifest.txt, params.bin (little-endian), config.ini and seed."""
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    offset = 0
    lines = []
    with open(tmp / "params.bin", "wb") as fh:
        for name, t in head.state_dict().items():
            arr = t.detach().cpu().numpy()
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            data = np.ascontiguousarray(le).tobytes()
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"{name} {shape} {arr.dtype.name} {offset}")
            fh.write(data)
            offset += len(data)
    (tmp / "manifest.txt").write_text("\n".join(lines) + "\n")
    config.write(tmp / "config.ini")
    (tmp / "seed").write_text(f"{config.seed}\n")
    if extra:
        (tmp / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in sorted(extra.items())))
    if directory.exists():
        shutil.rmtree(directory)
    os.replace(tmp, directory)
    return directory


def load_checkpoint(directory: str | os.PathLike) -> tuple[RunConfig, SegmentationHead]:
    directory = Path(directory)
    if not (directory / "manifest.txt").exists():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    config = RunConfig.read(directory / "config.ini")
    head = SegmentationHead(config)
    blob = (directory / "params.bin").read_bytes()
    state = {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        name, shape, dtype, offset = line.split()
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=int(offset)).reshape(dims)
        state[name] = torch.from_numpy(arr.astype(np.dtype(dtype)))
    head.load_state_dict(state)
    head.eval()
    return config, head


def checkpoint_bytes(directory: str | os.PathLike) -> bytes:
    d = Path(directory)
    return (d / "manifest.txt").read_bytes() + (d / "params.bin").read_bytes()


# ------------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    tolerance: float
    per_module: dict[str, dict[str, float]]

    @property
    def passed(self) -> bool:
        return all(m["pass_fraction"] >= 0.99 for m in self.per_module.values())


def relative_error(a: float, b: float, floor: float = 1e-7) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(
    loss_fn: Callable[[], torch.Tensor],
    groups: dict[str, list[tuple[str, torch.nn.Parameter]]],
    n_samples: int = 200,
    tolerance: float = 1e-4,
    rel_step: float = 1e-3,
    seed: int = 0,
    analytic: Callable[[dict[str, torch.Tensor]], dict[str, torch.Tensor]] | None = None,
) -> GradCheckReport:
    """Compare autograd against central differences on sampled scalar parameters.

    The step for a parameter value v is rel_step * max(|v|, 1e-2).
    ``analytic`` may post-process the autograd gradients (negative controls).
    """
    all_params = [p for g in groups.values() for _, p in g]
    for p in all_params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = {name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for g in groups.values() for name, p in g}
    if analytic is not None:
        grads = analytic(grads)
    rng = np.random.default_rng(seed)
    per_module = {}
    with torch.no_grad():
        for module, plist in groups.items():
            sizes = np.array([p.numel() for _, p in plist])
            total = int(sizes.sum())
            picks = rng.choice(total, size=min(n_samples, total), replace=False)
            bounds = np.cumsum(sizes)
            errs = []
            for flat in picks:
                j = int(np.searchsorted(bounds, flat, side="right"))
                local = int(flat - (bounds[j - 1] if j else 0))
                name, p = plist[j]
                view = p.view(-1)
                v0 = float(view[local])
                h = rel_step * max(abs(v0), 1e-2)
                view[local] = v0 + h
                lp = float(loss_fn())
                view[local] = v0 - h
                lm = float(loss_fn())
                view[local] = v0
                numeric = (lp - lm) / (2 * h)
                errs.append(relative_error(float(grads[name].view(-1)[local]), numeric))
            errs = np.array(errs)
            per_module[module] = dict(
                n=float(len(errs)),
                max_rel_error=float(errs.max()),
                pass_fraction=float(np.mean(errs < tolerance)),
            )
    return GradCheckReport(tolerance, per_module)


def grad_check(
    head: SegmentationHead,
    config: RunConfig,
    tolerance: float = 1e-4,
    n_samples: int = 200,
    seed: int = 0,
    pairs: Sequence[Any] | None = None,
    analytic=None,
) -> GradCheckReport:
    """Gradient check of the total loss in double precision on a fixed small batch.

    The batch mixes one refined and one unrefined sample; severed refinement
    inputs are held fixed while differencing, matching what autograd sees.
    """
    from .synthetic import generate_pairs

    head64 = SegmentationHead(config).double()
    head64.load_state_dict(head.state_dict())
    encoder = ToyEncoder(config).double()
    pairs = pairs or generate_pairs(2, "medium", seed, config.image_size)
    rng = np.random.default_rng(seed)
    batch = make_batch(list(pairs[:2]), encoder, config, rng, mode="paired", dtype=torch.float64)
    n = len(batch.f_s)
    iters = np.zeros(n, dtype=np.int64)
    iters[0] = config.effective_refine_iters
    from .refinement import RefinePlan

    plan = RefinePlan(iters, iters > 0)
    _, out = batch_loss(head64, batch, plan, training=True)
    cached = out.final_inputs or None

    def loss_fn():
        report, _ = batch_loss(head64, batch, plan, training=True, cached=cached)
        return report.total

    return check_gradients(loss_fn, head64.param_groups(), n_samples, tolerance, seed=seed, analytic=analytic)


def encoder_checksum(encoder: ToyEncoder) -> str:
    return param_checksum(encoder)
