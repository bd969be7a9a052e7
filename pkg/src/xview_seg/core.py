"""Shared value types, mask/image I/O, the IoU metric and RNG plumbing."""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

THRESHOLD = 0.5


class MaskFileError(OSError):
    """The mask file could not be opened or written."""


class MaskFormatError(ValueError):
    """The file is not a decodable raster."""


class NonBinaryMaskError(ValueError):
    """The raster holds values other than background/foreground."""


@dataclass
class RunConfig:
    patch_size: int = 14
    image_size: int = 518
    channels: int = 64
    k_points: int = 5
    fusion_ratio: int = 7
    decoder_blocks: int = 2
    refine_iters: int = 2
    heads: int = 8
    encoder_heads: int = 8

    # ablation switches (Plain Head = all three off)
    use_fusion: bool = True
    use_points: bool = True
    use_refinement: bool = True

    # open readings, exposed as knobs
    target_null_mask: bool = False
    point_features_from_injected: bool = False
    upsample_logits: bool = False
    separate_refine_weights: bool = False
    encoder_image_skip: bool = True

    tracker: str = "ground_truth"
    encoder: str = "toy"
    external_dir: str = ""

    focal_weight: float = 20.0
    dice_weight: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    lr: float = 5e-5
    weight_decay: float = 1e-4
    epochs: int = 12
    decay_epochs: tuple[int, ...] = (8, 11)
    decay_factor: float = 0.1
    clip_norm: float = 1.0
    batch_size: int = 8

    family_mix: float = 0.5
    prompt_noise: float = 0.02
    train_mode: str = "paired"
    seed: int = 0

    def __post_init__(self) -> None:
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.image_size % 2 or (self.image_size // 2) % self.fusion_ratio:
            raise ValueError(
                f"feature resolution {self.image_size // 2} not divisible by "
                f"fusion_ratio {self.fusion_ratio}"
            )
        if self.k_points < 1:
            raise ValueError("k_points must be >= 1")
        if self.decoder_blocks < 1:
            raise ValueError("decoder_blocks must be >= 1")
        if self.refine_iters < 0:
            raise ValueError("refine_iters must be >= 0")
        if self.channels % self.heads or self.channels % self.encoder_heads:
            raise ValueError("channels must be divisible by the head counts")

    @classmethod
    def toy(cls, **overrides: Any) -> "RunConfig":
        """Desk-scale preset: 70x70 images, C=64, single-head attention.

        The head is trained from scratch on top of a randomly initialised
        frozen encoder, so the toy preset uses a larger learning rate than
        the fine-tuning default, decayed once before the last epoch.
        """
        base = dict(
            image_size=70, channels=64, heads=1, encoder_heads=1, lr=1e-3, epochs=3, decay_epochs=(2,)
        )
        base.update(overrides)
        return cls(**base)

    @property
    def feature_size(self) -> int:
        return self.image_size // 2

    @property
    def token_grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def fusion_grid(self) -> int:
        return self.feature_size // self.fusion_ratio

    @property
    def effective_refine_iters(self) -> int:
        return self.refine_iters if self.use_refinement else 0

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    # key = value config files, one [run] section
    def write(self, path: str | os.PathLike) -> None:
        cp = configparser.ConfigParser()
        cp["run"] = {k: _fmt(v) for k, v in self.to_dict().items()}
        with open(path, "w") as fh:
            cp.write(fh)

    @classmethod
    def read(cls, path: str | os.PathLike, **overrides: Any) -> "RunConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        values: dict[str, Any] = {}
        for section in cp.sections():
            for key, raw in cp[section].items():
                values[key] = raw
        values = coerce_fields(values)
        values.update(overrides)
        return cls(**values)


def _fmt(v: Any) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def coerce_fields(raw: dict[str, Any]) -> dict[str, Any]:
    """Convert string values to the declared RunConfig field types."""
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    out: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in types:
            raise KeyError(f"unknown config key {key!r}")
        t = types[key]
        if not isinstance(value, str):
            out[key] = value
        elif t == "bool":
            out[key] = value.strip().lower() in ("1", "true", "yes", "on")
        elif t == "int":
            out[key] = int(value)
        elif t == "float":
            out[key] = float(value)
        elif t.startswith("tuple"):
            out[key] = tuple(int(x) for x in value.split(",") if x.strip())
        else:
            out[key] = value
    return out


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    return np.random.default_rng(seed)


def _check_binary(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if not np.all((a == 0) | (a == 1)):
        raise NonBinaryMaskError(f"{name} is not a binary mask")
    return a.astype(bool)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; two empty masks score 1."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = _check_binary(a, "a")
    b = _check_binary(b, "b")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def binarize(m: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    return (np.asarray(m) >= threshold).astype(np.uint8)


def write_mask(mask: np.ndarray, path: str | os.PathLike) -> None:
    m = _check_binary(mask, "mask")
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    try:
        PILImage.fromarray(m.astype(np.uint8) * 255, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise MaskFileError(f"cannot write mask to {path}: {exc}") from exc


def read_mask(path: str | os.PathLike) -> np.ndarray:
    """Read a 0/255 single-channel PNG as a uint8 {0,1} array."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise MaskFileError(f"cannot read {path}: {exc}") from exc
    import io

    try:
        img = PILImage.open(io.BytesIO(data))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise MaskFormatError(f"malformed raster {path}: {exc}") from exc
    if img.mode not in ("L", "1"):
        raise NonBinaryMaskError(f"non-binary mask: {path} has mode {img.mode}")
    arr = np.asarray(img.convert("L"))
    if not np.all((arr == 0) | (arr == 255)):
        raise NonBinaryMaskError(f"non-binary mask: {path} has values outside {{0,255}}")
    return (arr == 255).astype(np.uint8)


def read_image(path: str | os.PathLike) -> np.ndarray:
    """8-bit RGB raster -> float32 H x W x 3 array in [0, 1]."""
    with PILImage.open(path) as img:
        arr = np.asarray(img.convert("RGB"))
    return arr.astype(np.float32) / 255.0


def write_image(image: np.ndarray, path: str | os.PathLike) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Round-trip an image through 8-bit storage."""
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8).astype(np.float32) / 255.0


def check_image(image: np.ndarray, patch_size: int = 14) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
        raise ValueError("image values must be finite and in [0, 1]")
    return image


@dataclass
class PointSet:
    """Ordered pixel coordinates (x, y) in one frame."""

    points: np.ndarray
    frame: str = "source"
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.points)


def clamp_points(points: np.ndarray, height: int, width: int) -> np.ndarray:
    p = np.array(points, dtype=np.float64, copy=True)
    p[:, 0] = np.clip(p[:, 0], 0.0, width - 1)
    p[:, 1] = np.clip(p[:, 1], 0.0, height - 1)
    return p


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
