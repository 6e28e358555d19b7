"""Synthetic two-view scenes with exact ground truth.

Every scene is rendered in the query frame. The target view samples the same
scene through the inverse of a known affine transform, so the correspondence
between the two views is exact and can serve as an oracle.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import Mask, PointSet, load_image, load_mask, save_image, save_mask


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    n_objects: int = 3
    texture_granularity: float = 3.0
    rotation_range: float = 10.0
    scale_range: float = 1.1
    translation_range: float = 8.0
    photometric_jitter: float = 0.05
    seed: int = 0
    # Radius bounds of the objects, in pixels.
    min_radius: float = 8.0
    max_radius: float = 13.0
    # Fraction of the query-object area that must stay visible in the target view.
    min_visible_fraction: float = 0.5

    def __post_init__(self):
        if self.scale_range <= 0:
            raise ValueError("scale_range must be > 0")
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.min_radius <= 0 or self.max_radius < self.min_radius:
            raise ValueError("invalid object radius bounds")


@dataclass(eq=False)
class ViewPair:
    query_image: np.ndarray
    target_image: np.ndarray
    query_mask: Mask
    target_mask: Mask
    transform: np.ndarray
    seed: int

    def __eq__(self, other):
        if not isinstance(other, ViewPair):
            return NotImplemented
        return (
            np.array_equal(self.query_image, other.query_image)
            and np.array_equal(self.target_image, other.target_image)
            and self.query_mask == other.query_mask
            and self.target_mask == other.target_mask
            and np.array_equal(self.transform, other.transform)
            and self.seed == other.seed
        )

    def to_bytes(self) -> bytes:
        return b"".join(
            [
                self.query_image.tobytes(),
                self.target_image.tobytes(),
                self.query_mask.data.tobytes(),
                self.target_mask.data.tobytes(),
                self.transform.tobytes(),
                int(self.seed).to_bytes(8, "little", signed=True),
            ]
        )


# --- affine helpers -----------------------------------------------------------


def affine_matrix(rotation_deg=0.0, scale=1.0, translation=(0.0, 0.0), center=(0.0, 0.0)) -> np.ndarray:
    """2x3 matrix: rotate/scale about ``center`` then translate."""
    th = math.radians(rotation_deg)
    lin = scale * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    c = np.asarray(center, dtype=np.float64)
    offset = c + np.asarray(translation, dtype=np.float64) - lin @ c
    return np.hstack([lin, offset[:, None]])


def invert_affine(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    lin = t[:, :2]
    if abs(np.linalg.det(lin)) < 1e-12:
        raise ValueError("affine transform is not invertible")
    inv = np.linalg.inv(lin)
    return np.hstack([inv, (-inv @ t[:, 2])[:, None]])


def warp_points(pts: PointSet, t: np.ndarray) -> PointSet:
    t = np.asarray(t, dtype=np.float64)
    return PointSet(pts.xy @ t[:, :2].T + t[:, 2], pts.frame)


def warp_mask(m: Mask, t: np.ndarray, out_shape: Optional[tuple[int, int]] = None) -> Mask:
    """Nearest-neighbour warp of a mask through ``t`` (source -> destination)."""
    h, w = out_shape or m.shape
    ys, xs = np.mgrid[0:h, 0:w]
    src = warp_points(PointSet(np.stack([xs.ravel(), ys.ravel()], axis=1)), invert_affine(t)).xy
    sx = np.rint(src[:, 0]).astype(np.int64)
    sy = np.rint(src[:, 1]).astype(np.int64)
    ok = (sx >= 0) & (sx < m.width) & (sy >= 0) & (sy < m.height)
    out = np.zeros(h * w, dtype=bool)
    out[ok] = m.data[sy[ok], sx[ok]]
    return Mask(out.reshape(h, w))


# --- scene rendering -------------------------------------------------------------


@dataclass
class _Shape:
    kind: str
    cx: float
    cy: float
    rx: float
    ry: float
    angle: float

    def inside(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        u = (x - self.cx) * ca + (y - self.cy) * sa
        v = -(x - self.cx) * sa + (y - self.cy) * ca
        if self.kind == "ellipse":
            return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0
        if self.kind == "rect":
            return (np.abs(u) <= self.rx) & (np.abs(v) <= self.ry)
        # diamond
        return np.abs(u) / self.rx + np.abs(v) / self.ry <= 1.0

    def bbox_radius(self) -> float:
        return math.hypot(self.rx, self.ry) if self.kind == "rect" else max(self.rx, self.ry)


class _Texture:
    """Smooth noise field over an extended canvas, sampled at arbitrary coordinates."""

    def __init__(self, rng: np.random.Generator, size: int, granularity: float, base: np.ndarray, amplitude: float):
        self.pad = size
        n = 3 * size
        noise = rng.standard_normal((3, n, n))
        if granularity > 0:
            noise = np.stack([ndimage.gaussian_filter(c, granularity, mode="wrap") for c in noise])
        noise /= noise.std(axis=(1, 2), keepdims=True) + 1e-12
        self.field = base[:, None, None] + amplitude * noise

    def sample(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        coords = np.stack([y + self.pad, x + self.pad])
        return np.stack([ndimage.map_coordinates(c, coords, order=1, mode="nearest") for c in self.field], axis=-1)


def _distinct_colors(rng: np.random.Generator, n: int) -> np.ndarray:
    hues = (rng.uniform() + np.arange(n) / n) % 1.0
    rng.shuffle(hues)
    return np.array([colorsys.hsv_to_rgb(h, rng.uniform(0.5, 0.8), rng.uniform(0.6, 0.9)) for h in hues])


def _render(shapes, textures, background, x, y, out_shape):
    img = background.sample(x, y)
    for shape, tex in zip(shapes, textures):
        inside = shape.inside(x, y)
        if inside.any():
            img[inside] = tex.sample(x[inside], y[inside])
    return img.reshape(*out_shape, 3)


def _sample_transform(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    c = (cfg.image_size - 1) / 2.0
    lo, hi = sorted((cfg.scale_range, 1.0 / cfg.scale_range))
    rot = rng.uniform(-cfg.rotation_range, cfg.rotation_range) if cfg.rotation_range else 0.0
    scale = math.exp(rng.uniform(math.log(lo), math.log(hi))) if hi > lo else 1.0
    tr = rng.uniform(-cfg.translation_range, cfg.translation_range, size=2) if cfg.translation_range else (0.0, 0.0)
    return affine_matrix(rot, scale, tr, (c, c))


def _jitter(img: np.ndarray, amp: float, rng: np.random.Generator) -> np.ndarray:
    if amp <= 0:
        return img
    gain = rng.uniform(1 - amp, 1 + amp, size=3)
    bias = rng.uniform(-amp / 2, amp / 2, size=3)
    noise = rng.standard_normal(img.shape) * (amp / 5)
    return np.clip(img * gain + bias + noise, 0.0, 1.0)


def _place_scene(cfg: SceneConfig, rng: np.random.Generator):
    """Sample shapes and textures; object 0 lies fully inside the frame and is drawn last."""
    size = cfg.image_size
    shapes = []
    for i in range(cfg.n_objects):
        rx = rng.uniform(cfg.min_radius, cfg.max_radius)
        ry = rng.uniform(cfg.min_radius, cfg.max_radius)
        kind = ("ellipse", "rect", "diamond")[rng.integers(3)]
        s = _Shape(kind, 0.0, 0.0, rx, ry, rng.uniform(0, math.pi))
        margin = s.bbox_radius() + 1.0
        if i == 0:
            if 2 * margin >= size - 1:
                raise GenerationError("object radius too large for the image size")
            s.cx = rng.uniform(margin, size - 1 - margin)
            s.cy = rng.uniform(margin, size - 1 - margin)
        else:
            s.cx = rng.uniform(0, size - 1)
            s.cy = rng.uniform(0, size - 1)
        shapes.append(s)

    colors = _distinct_colors(rng, cfg.n_objects + 1)
    background = _Texture(rng, size, cfg.texture_granularity * 2, colors[-1] * 0.6 + 0.2, 0.12)
    textures = [_Texture(rng, size, cfg.texture_granularity, colors[i], 0.15) for i in range(cfg.n_objects)]
    order = list(range(1, cfg.n_objects)) + [0]
    return shapes, [shapes[i] for i in order], [textures[i] for i in order], background


def generate_single_view(cfg: SceneConfig) -> tuple[np.ndarray, list[Mask]]:
    """One rendered view and the visible mask of every object (index 0 = annotated object).

    Used for point-prompt pretraining, where every object is a valid target.
    """
    size = cfg.image_size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    x, y = xs.ravel(), ys.ravel()
    rng = np.random.default_rng([cfg.seed, 0])
    _, draw_shapes, draw_tex, background = _place_scene(cfg, rng)
    image = _render(draw_shapes, draw_tex, background, x, y, (size, size))
    covered = np.zeros(size * size, dtype=bool)
    visible = []
    for shape in reversed(draw_shapes):
        inside = shape.inside(x, y)
        visible.append(Mask((inside & ~covered).reshape(size, size)))
        covered |= inside
    # reversed draw order is (0, n-1, ..., 1)
    masks = [visible[0]] + visible[1:][::-1]
    return np.clip(image, 0.0, 1.0), masks


def generate_pair(cfg: SceneConfig, transform: Optional[np.ndarray] = None, max_attempts: int = 100) -> ViewPair:
    """Render a query/target pair; object 0 is the annotated object.

    ``transform`` overrides the sampled affine transform. Placements whose
    annotated object leaves either view (or keeps less than
    ``cfg.min_visible_fraction`` of its area in the target) are redrawn.
    """
    size = cfg.image_size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    qx, qy = xs.ravel(), ys.ravel()

    for attempt in range(max_attempts):
        rng = np.random.default_rng([cfg.seed, attempt])
        t = np.asarray(transform, dtype=np.float64) if transform is not None else _sample_transform(cfg, rng)
        t_inv = invert_affine(t)

        shapes, draw_shapes, draw_tex, background = _place_scene(cfg, rng)

        query_mask = Mask(shapes[0].inside(qx, qy).reshape(size, size))
        target_mask = warp_mask(query_mask, t)
        if query_mask.is_empty() or target_mask.area() < cfg.min_visible_fraction * query_mask.area():
            continue

        query_image = _render(draw_shapes, draw_tex, background, qx, qy, (size, size))
        src = np.stack([qx, qy], axis=1) @ t_inv[:, :2].T + t_inv[:, 2]
        target_image = _render(draw_shapes, draw_tex, background, src[:, 0], src[:, 1], (size, size))
        target_image = _jitter(target_image, cfg.photometric_jitter, np.random.default_rng([cfg.seed, attempt, 1]))
        return ViewPair(
            query_image=np.clip(query_image, 0.0, 1.0),
            target_image=np.clip(target_image, 0.0, 1.0),
            query_mask=query_mask,
            target_mask=target_mask,
            transform=t,
            seed=cfg.seed,
        )
    raise GenerationError(f"no valid placement after {max_attempts} attempts (seed={cfg.seed})")


def pair_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_dataset(cfg: SceneConfig, n: int, split: str = "train") -> list[ViewPair]:
    base = cfg.seed if split == "train" else cfg.seed + 1_000_003
    return [generate_pair(replace(cfg, seed=pair_seed(base, i))) for i in range(n)]


# --- on-disk layout ------------------------------------------------------------------


def save_pair(pair: ViewPair, directory, extra_meta: Optional[dict] = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_image(d / "query.ppm", pair.query_image)
    save_image(d / "target.ppm", pair.target_image)
    save_mask(d / "query_mask.pgm", pair.query_mask)
    save_mask(d / "target_mask.pgm", pair.target_mask)
    (d / "transform.txt").write_text(" ".join(f"{v:.6f}" for v in pair.transform.ravel()) + "\n")
    meta = {"seed": pair.seed, "height": pair.query_mask.height, "width": pair.query_mask.width}
    meta.update(extra_meta or {})
    (d / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def load_pair(directory) -> ViewPair:
    d = Path(directory)
    meta = read_key_values(d / "meta.txt")
    t = np.array([float(v) for v in (d / "transform.txt").read_text().split()], dtype=np.float64)
    if t.size != 6:
        raise ValueError(f"{d / 'transform.txt'}: expected 6 values, got {t.size}")
    return ViewPair(
        query_image=load_image(d / "query.ppm"),
        target_image=load_image(d / "target.ppm"),
        query_mask=load_mask(d / "query_mask.pgm"),
        target_mask=load_mask(d / "target_mask.pgm"),
        transform=t.reshape(2, 3),
        seed=int(meta.get("seed", 0)),
    )


def read_key_values(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def scene_config_from_dict(values: dict[str, str], base: SceneConfig = SceneConfig()) -> SceneConfig:
    """Build a config from string values; unknown keys raise ``KeyError`` naming the key."""
    types = {f.name: f.type for f in fields(SceneConfig)}
    kwargs = {}
    for k, v in values.items():
        if k not in types:
            raise KeyError(k)
        kwargs[k] = int(v) if types[k] in ("int", int) else float(v)
    return replace(base, **kwargs)


def scene_config_to_dict(cfg: SceneConfig) -> dict:
    return asdict(cfg)
