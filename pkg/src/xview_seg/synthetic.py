"""Procedural two-view scenes with exact instance masks and correspondences.

Scenes live in source-pixel coordinates. A view is rendered by mapping each
view pixel centre back through the inverse view transform and rasterising
the analytic shapes there, so the target view is re-rendered rather than
warped from the source pixels.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import atomic_write_text, iou, quantize_image, read_image, read_mask, write_image, write_mask

DIFFICULTIES = ("easy", "medium", "hard")
KINDS = ("ellipse", "polygon", "capsule")


@dataclass
class Instance:
    kind: str
    params: dict
    color: np.ndarray
    texture: np.ndarray  # (fx, fy, phase, amplitude)

    def inside(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == "ellipse":
            c, s = np.cos(p["theta"]), np.sin(p["theta"])
            dx, dy = x - p["cx"], y - p["cy"]
            u = (c * dx + s * dy) / p["a"]
            v = (-s * dx + c * dy) / p["b"]
            return u * u + v * v <= 1.0
        if self.kind == "polygon":
            verts = p["verts"]  # convex, counter-clockwise
            out = np.ones(np.shape(x), dtype=bool)
            for i in range(len(verts)):
                x0, y0 = verts[i]
                x1, y1 = verts[(i + 1) % len(verts)]
                out &= (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0
            return out
        if self.kind == "capsule":
            x0, y0, x1, y1, r = p["x0"], p["y0"], p["x1"], p["y1"], p["r"]
            vx, vy = x1 - x0, y1 - y0
            t = np.clip(((x - x0) * vx + (y - y0) * vy) / (vx * vx + vy * vy), 0.0, 1.0)
            dx, dy = x - (x0 + t * vx), y - (y0 + t * vy)
            return dx * dx + dy * dy <= r * r
        raise ValueError(f"unknown shape kind {self.kind}")

    def shade(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        fx, fy, phase, amp = self.texture
        g = 1.0 + amp * np.sin(fx * x + fy * y + phase)
        return np.clip(self.color[None, :] * g[:, None], 0.0, 1.0)

    def shifted(self, dx: float, dy: float) -> "Instance":
        p = dict(self.params)
        if self.kind == "ellipse":
            p["cx"] += dx
            p["cy"] += dy
        elif self.kind == "polygon":
            p["verts"] = p["verts"] + np.array([dx, dy])
        else:
            for k in ("x0", "x1"):
                p[k] += dx
            for k in ("y0", "y1"):
                p[k] += dy
        return Instance(self.kind, p, self.color.copy(), self.texture.copy())


@dataclass
class Scene:
    size: int
    instances: list[Instance]  # back to front
    occluders: list[Instance]
    background: np.ndarray  # (base rgb, grating params)
    query: int
    difficulty: str

    def labels(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Index of the visible layer at each point (-1 background)."""
        lab = np.full(np.shape(x), -1, dtype=np.int64)
        for i, inst in enumerate(self.instances + self.occluders):
            lab[inst.inside(x, y)] = i
        return lab


@dataclass
class ViewTransform:
    """Source pixel coords -> target pixel coords, as a 3x3 homography."""

    matrix: np.ndarray
    scale: float = 1.0
    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    corners: np.ndarray | None = None

    @classmethod
    def identity(cls) -> "ViewTransform":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "ViewTransform":
        m = np.eye(3)
        m[0, 2], m[1, 2] = dx, dy
        return cls(m, tx=dx, ty=dy)

    @classmethod
    def similarity(cls, size: int, scale: float, rotation: float, tx: float, ty: float,
                   corners: np.ndarray | None = None) -> "ViewTransform":
        c = (size - 1) / 2.0
        th = np.deg2rad(rotation)
        r = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]]) * scale
        m = np.eye(3)
        m[:2, :2] = r
        m[:2, 2] = np.array([c + tx, c + ty]) - r @ np.array([c, c])
        if corners is not None:
            src = np.array([[0, 0], [size - 1, 0], [size - 1, size - 1], [0, size - 1]], dtype=np.float64)
            m = homography(src, src + corners) @ m
        return cls(m, scale, rotation, tx, ty, corners)

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        h = np.concatenate([p, np.ones((len(p), 1))], axis=1) @ self.matrix.T
        return h[:, :2] / h[:, 2:3]

    def inverse(self) -> "ViewTransform":
        return ViewTransform(np.linalg.inv(self.matrix))

    def jacobian_det(self, points: np.ndarray) -> np.ndarray:
        """Local area scale of the map at ``points``."""
        m = self.matrix
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        w = p @ m[2, :2] + m[2, 2]
        return np.linalg.det(m) / w**3


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear transform from four point correspondences."""
    rows = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    h = vt[-1].reshape(3, 3)
    return h / h[2, 2]


# ------------------------------------------------------------------ scenes

_COUNTS = {"easy": (1, 3), "medium": (3, 6), "hard": (5, 9)}


def _random_instance(rng: np.random.Generator, size: int, center, radius: float, kind=None, color=None) -> Instance:
    kind = kind or KINDS[rng.integers(len(KINDS))]
    cx, cy = center
    if kind == "ellipse":
        a = radius * rng.uniform(0.75, 1.0)
        params = dict(cx=cx, cy=cy, a=a, b=a * rng.uniform(0.55, 1.0), theta=rng.uniform(0, np.pi))
    elif kind == "polygon":
        n = int(rng.integers(3, 7))
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        ang = np.linspace(0, 2 * np.pi, n, endpoint=False) + rng.uniform(0, 2 * np.pi) if n == 3 else ang
        gaps = np.diff(np.concatenate([ang, ang[:1] + 2 * np.pi]))
        if gaps.max() >= np.pi:  # keep the centre inside a convex hull
            ang = np.linspace(0, 2 * np.pi, n, endpoint=False) + rng.uniform(0, 2 * np.pi)
        rad = radius * rng.uniform(0.8, 1.05, n)
        verts = np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)
        params = dict(verts=verts)
    else:
        th = rng.uniform(0, np.pi)
        half = radius * rng.uniform(0.45, 0.7)
        r = radius * rng.uniform(0.35, 0.5)
        params = dict(
            x0=cx - half * np.cos(th), y0=cy - half * np.sin(th),
            x1=cx + half * np.cos(th), y1=cy + half * np.sin(th), r=r,
        )
    if color is None:
        color = rng.uniform(0.1, 0.95, 3)
    freq = rng.uniform(0.15, 0.6) * 70.0 / size
    ang = rng.uniform(0, 2 * np.pi)
    texture = np.array([freq * np.cos(ang), freq * np.sin(ang), rng.uniform(0, 2 * np.pi), rng.uniform(0.05, 0.2)])
    return Instance(kind, params, np.asarray(color, dtype=np.float64), texture)


def _area(inst: Instance, size: int, exclude=()) -> tuple[int, int]:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    m = inst.inside(xs, ys)
    full = int(m.sum())
    for other in exclude:
        m &= ~other.inside(xs, ys)
    return full, int(m.sum())


def generate_scene(rng: np.random.Generator, difficulty: str = "medium", size: int = 70) -> Scene:
    """Random layered scene; the query instance is kept mostly visible."""
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
    lo, hi = _COUNTS[difficulty]
    n = int(rng.integers(lo, hi + 1))
    q_radius = size * rng.uniform(0.17, 0.25)
    q_center = size * rng.uniform(0.38, 0.62, 2)
    query = _random_instance(rng, size, q_center, q_radius)
    others = []
    for _ in range(n - 1):
        others.append(_random_instance(rng, size, size * rng.uniform(0.1, 0.9, 2), size * rng.uniform(0.08, 0.2)))
    distractors = []
    if difficulty != "easy":
        for _ in range(int(rng.integers(1, 3))):
            ang = rng.uniform(0, 2 * np.pi)
            dist = q_radius * rng.uniform(2.1, 2.8)
            dup = query.shifted(dist * np.cos(ang), dist * np.sin(ang))
            dup.color = np.clip(dup.color + rng.normal(0, 0.03, 3), 0, 1)
            distractors.append(dup)
    layers = others + distractors
    q_z = int(rng.integers(0, len(layers) + 1))
    instances = layers[:q_z] + [query] + layers[q_z:]
    above = instances[q_z + 1:]
    full, vis = _area(query, size, above)
    if vis < 0.5 * full:
        instances = layers + [query]
        q_z = len(instances) - 1

    occluders: list[Instance] = []
    if difficulty == "hard":
        occluders = _occluding_bars(rng, query, size, instances[q_z + 1:])
    bg = np.concatenate([rng.uniform(0.2, 0.8, 3), rng.uniform(0.05, 0.3, 2) * 70.0 / size, rng.uniform(0, 2 * np.pi, 1)])
    return Scene(size, instances, occluders, bg, q_z, difficulty)


def _occluding_bars(rng, query: Instance, size: int, above: list[Instance]) -> list[Instance]:
    full, vis = _area(query, size, above)
    ys, xs = np.nonzero(query.inside(*np.mgrid[0:size, 0:size][::-1].astype(np.float64)))
    cx, cy = xs.mean(), ys.mean()
    extent = max(np.ptp(xs), np.ptp(ys)) + 1
    bars: list[Instance] = []
    for _ in range(int(rng.integers(1, 3))):
        th = rng.uniform(0, np.pi)
        off = rng.uniform(-0.4, 0.4) * extent
        width = extent * rng.uniform(0.15, 0.3)
        for _ in range(8):
            bar = _bar(cx, cy, th, off, width, 3 * size, rng)
            _, v = _area(query, size, above + bars + [bar])
            if full - v <= 0.4 * full:
                bars.append(bar)
                break
            width *= 0.6
    return bars


def _bar(cx, cy, th, off, width, length, rng) -> Instance:
    d = np.array([np.cos(th), np.sin(th)])
    nrm = np.array([-d[1], d[0]])
    c = np.array([cx, cy]) + off * nrm
    hw, hl = width / 2, length / 2
    verts = np.array([c - hl * d - hw * nrm, c + hl * d - hw * nrm, c + hl * d + hw * nrm, c - hl * d + hw * nrm])
    color = np.array([0.85, 0.65, 0.5]) * rng.uniform(0.8, 1.1)
    return Instance("polygon", dict(verts=verts), np.clip(color, 0, 1), np.array([0.0, 0.0, 0.0, 0.0]))


# ------------------------------------------------------------------ views

_TRANSFORM_RANGES = {
    "easy": dict(scale=(0.9, 1.1), rot=10.0, shift=0.08, corners=0.0),
    "medium": dict(scale=(0.75, 1.3), rot=25.0, shift=0.12, corners=0.0),
    "hard": dict(scale=(0.65, 1.45), rot=40.0, shift=0.15, corners=0.06),
}


def random_transform(rng: np.random.Generator, difficulty: str, size: int, shrink: float = 1.0) -> ViewTransform:
    r = _TRANSFORM_RANGES[difficulty]
    lo, hi = r["scale"]
    scale = float(np.exp(rng.uniform(np.log(lo), np.log(hi)) * shrink))
    rot = float(rng.uniform(-r["rot"], r["rot"]) * shrink)
    tx, ty = (rng.uniform(-r["shift"], r["shift"], 2) * size * shrink).tolist()
    corners = None
    if r["corners"] > 0:
        corners = rng.uniform(-r["corners"], r["corners"], (4, 2)) * size * shrink
    return ViewTransform.similarity(size, scale, rot, tx, ty, corners)


def render_view(scene: Scene, t: ViewTransform) -> tuple[np.ndarray, np.ndarray]:
    """Rasterise the scene through ``t``; returns (image, layer labels)."""
    s = scene.size
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    q = t.inverse().apply(np.stack([xs.ravel(), ys.ravel()], axis=1))
    x, y = q[:, 0], q[:, 1]
    lab = scene.labels(x, y)
    bg = scene.background
    grating = 1.0 + 0.12 * np.sin(bg[3] * x + bg[4] * y + bg[5])
    img = np.clip(bg[None, :3] * grating[:, None], 0, 1)
    layers = scene.instances + scene.occluders
    for i, inst in enumerate(layers):
        sel = lab == i
        if sel.any():
            img[sel] = inst.shade(x[sel], y[sel])
    return quantize_image(img.reshape(s, s, 3).astype(np.float32)), lab.reshape(s, s)


@dataclass
class Pair:
    image_s: np.ndarray
    image_t: np.ndarray
    mask_s: np.ndarray
    mask_t: np.ndarray
    transform: ViewTransform
    query: int
    difficulty: str = "medium"
    pair_id: str = ""
    meta: dict = field(default_factory=dict)

    def correspondences(self, points: np.ndarray) -> np.ndarray:
        return self.transform.apply(points)

    def swapped(self) -> "Pair":
        """The same pair queried in the opposite direction."""
        return Pair(self.image_t, self.image_s, self.mask_t, self.mask_s, self.transform.inverse(),
                    self.query, self.difficulty, self.pair_id, dict(self.meta))


def render_pair(scene: Scene, t: ViewTransform, query_index: int | None = None) -> Pair:
    q = scene.query if query_index is None else query_index
    if not 0 <= q < len(scene.instances):
        raise IndexError(f"query index {q} out of range")
    img_s, lab_s = render_view(scene, ViewTransform.identity())
    img_t, lab_t = render_view(scene, t)
    m_s = (lab_s == q).astype(np.uint8)
    m_t = (lab_t == q).astype(np.uint8)
    return Pair(img_s, img_t, m_s, m_t, t, q, scene.difficulty)


def _fits(scene: Scene, t: ViewTransform, q: int) -> bool:
    s = scene.size
    ys, xs = np.nonzero(scene.instances[q].inside(*np.mgrid[0:s, 0:s][::-1].astype(np.float64)))
    if len(xs) == 0:
        return False
    p = t.apply(np.stack([xs, ys], axis=1).astype(np.float64))
    return bool(np.all((p >= 1) & (p <= s - 2)))


def sample_pair(rng: np.random.Generator, difficulty: str = "medium", size: int = 70, retries: int = 40) -> Pair:
    """Scene + transform that keeps the query instance inside both frames."""
    for _ in range(retries):
        scene = generate_scene(rng, difficulty, size)
        if not _fits(scene, ViewTransform.identity(), scene.query):
            continue
        for attempt in range(retries):
            t = random_transform(rng, difficulty, size, shrink=1.0 - attempt / retries)
            if _fits(scene, t, scene.query):
                pair = render_pair(scene, t)
                if pair.mask_s.any() and pair.mask_t.any():
                    return pair
    raise RuntimeError("could not place the queried instance inside the target frame")


def generate_pairs(n: int, difficulty: str = "medium", seed: int = 0, size: int = 70) -> list[Pair]:
    seqs = np.random.SeedSequence(seed).spawn(n)
    pairs = []
    for i, ss in enumerate(seqs):
        pair = sample_pair(np.random.default_rng(ss), difficulty, size)
        pair.pair_id = f"{i:06d}"
        pairs.append(pair)
    return pairs


def warp_mask(mask: np.ndarray, t: ViewTransform) -> np.ndarray:
    """Nearest-neighbour image of a source mask under ``t`` on the same canvas."""
    h, w = mask.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    q = np.rint(t.inverse().apply(np.stack([xs.ravel(), ys.ravel()], axis=1))).astype(np.int64)
    ok = (q[:, 0] >= 0) & (q[:, 0] < w) & (q[:, 1] >= 0) & (q[:, 1] < h)
    out = np.zeros(h * w, dtype=np.uint8)
    out[ok] = mask[q[ok, 1], q[ok, 0]]
    return out.reshape(h, w)


def transfer_iou(pair: Pair) -> float:
    return iou(warp_mask(pair.mask_s, pair.transform), pair.mask_t)


# ------------------------------------------------------------------ disk layout


def _manifest_line(pair: Pair, split: str) -> str:
    t = pair.transform
    h = ",".join(repr(float(v)) for v in t.matrix.ravel())
    return (
        f"id={pair.pair_id} split={split} difficulty={pair.difficulty} query={pair.query} "
        f"scale={t.scale!r} rotation={t.rotation!r} tx={t.tx!r} ty={t.ty!r} H={h}"
    )


def export_dataset(
    n: int,
    directory: str | os.PathLike,
    split: float = 0.9,
    difficulty: str = "medium",
    seed: int = 0,
    size: int = 70,
) -> Path:
    """Write n pairs as PNGs plus a manifest; the first round(n*split) are train."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= split <= 1.0:
        raise ValueError("split must be in [0, 1]")
    root = Path(directory)
    try:
        for kind in ("images", "masks"):
            for part in ("train", "val"):
                (root / kind / part).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc
    n_train = int(round(n * split))
    lines = []
    for i, pair in enumerate(generate_pairs(n, difficulty, seed, size)):
        part = "train" if i < n_train else "val"
        for view, img, m in (("s", pair.image_s, pair.mask_s), ("t", pair.image_t, pair.mask_t)):
            write_image(img, root / "images" / part / f"{pair.pair_id}_{view}.png")
            write_mask(m, root / "masks" / part / f"{pair.pair_id}_{view}.png")
        lines.append(_manifest_line(pair, part))
    manifest = root / "manifest.txt"
    atomic_write_text(manifest, "\n".join(lines) + "\n")
    return manifest


def parse_manifest(path: str | os.PathLike) -> list[dict[str, str]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append(dict(tok.split("=", 1) for tok in line.split()))
    return rows


def load_dataset(directory: str | os.PathLike, split: str | None = None) -> list[Pair]:
    root = Path(directory)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest in {root}")
    pairs = []
    for row in parse_manifest(manifest):
        if split is not None and row["split"] != split:
            continue
        part, pid = row["split"], row["id"]
        m = np.array([float(v) for v in row["H"].split(",")]).reshape(3, 3)
        t = ViewTransform(m, float(row["scale"]), float(row["rotation"]), float(row["tx"]), float(row["ty"]))
        pairs.append(
            Pair(
                read_image(root / "images" / part / f"{pid}_s.png"),
                read_image(root / "images" / part / f"{pid}_t.png"),
                read_mask(root / "masks" / part / f"{pid}_s.png"),
                read_mask(root / "masks" / part / f"{pid}_t.png"),
                t,
                int(row["query"]),
                row["difficulty"],
                pid,
            )
        )
    return pairs
