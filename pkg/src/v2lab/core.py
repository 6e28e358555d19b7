"""Shared domain types, raster I/O and evaluation metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FRAMES = ("patch-grid", "image-pixels", "canonical")


class DimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary raster stored dense, row-major, shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.dtype != bool:
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")
            arr = arr.astype(bool)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def area(self) -> int:
        return int(self.data.sum())

    def is_empty(self) -> bool:
        return not self.data.any()

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    @classmethod
    def empty(cls, height: int, width: int) -> "Mask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def from_logits(cls, logits, threshold: float = 0.0) -> "Mask":
        """Binarize logits; ``threshold=0`` is probability 0.5."""
        return cls(np.asarray(logits) > threshold)


@dataclass(frozen=True)
class Point2D:
    x: float
    y: float
    frame: str = "image-pixels"

    def __post_init__(self):
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}")
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("point coordinates must be finite")


@dataclass
class PointSet:
    """N points as an (N, 2) array of (x, y), all in one frame."""

    xy: np.ndarray
    frame: str = "image-pixels"

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}")
        if not np.isfinite(self.xy).all():
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.xy)

    def __getitem__(self, i) -> Point2D:
        x, y = self.xy[i]
        return Point2D(float(x), float(y), self.frame)

    @classmethod
    def from_points(cls, pts: Iterable[Point2D]) -> "PointSet":
        pts = list(pts)
        frame = pts[0].frame if pts else "image-pixels"
        if any(p.frame != frame for p in pts):
            raise ValueError("mixed frames in point set")
        return cls(np.array([[p.x, p.y] for p in pts]).reshape(-1, 2), frame)


@dataclass
class MatchSet:
    """Query patch -> target patch correspondences with similarity scores."""

    query_idx: np.ndarray
    target_idx: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.query_idx)


@dataclass
class MetricReport:
    iou: float
    loc_e: float
    per_instance: list[tuple[str, float, float]] = field(default_factory=list)

    @classmethod
    def from_instances(cls, rows: Sequence[tuple[str, float, float]]) -> "MetricReport":
        rows = list(rows)
        if not rows:
            return cls(0.0, 0.0, [])
        return cls(
            iou=float(np.mean([r[1] for r in rows])),
            loc_e=float(np.mean([r[2] for r in rows])),
            per_instance=rows,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "iou", "loc_e"])
        for rid, iou, loc in self.per_instance:
            w.writerow([rid, f"{iou:.6f}", f"{loc:.6f}"])
        return buf.getvalue()


def _check_same_dims(a: Mask, b: Mask):
    if a.shape != b.shape:
        raise DimensionError(f"mask dimensions differ: {a.shape} vs {b.shape}")


def compute_iou(a: Mask, b: Mask) -> float:
    _check_same_dims(a, b)
    union = np.logical_or(a.data, b.data).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.data, b.data).sum() / union)


def mask_centroid(m: Mask) -> Point2D:
    ys, xs = np.nonzero(m.data)
    if len(xs) == 0:
        raise ValueError("centroid of an empty mask is undefined")
    return Point2D(float(xs.mean()), float(ys.mean()), "image-pixels")


def localization_error(pred: Mask, gt: Mask) -> float:
    """Centroid distance normalized by the image diagonal; 1.0 for an empty prediction."""
    _check_same_dims(pred, gt)
    if gt.is_empty():
        raise ValueError("ground-truth mask is empty")
    if pred.is_empty():
        return 1.0
    return normalized_distance(mask_centroid(pred), mask_centroid(gt), gt.width, gt.height)


def normalized_distance(p: Point2D, q: Point2D, width: int, height: int) -> float:
    return math.hypot(p.x - q.x, p.y - q.y) / math.hypot(width, height)


# --- Netpbm I/O -------------------------------------------------------------


def _read_pnm(path) -> tuple[str, np.ndarray]:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(raw[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise ValueError(f"{path}: unsupported netpbm variant {magic} maxval={maxval}")
    channels = 3 if magic == "P6" else 1
    payload = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return magic, payload.reshape(shape)


def write_pgm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def write_ppm(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def save_mask(path, m: Mask) -> None:
    write_pgm(path, m.data.astype(np.uint8) * 255)


def load_mask(path) -> Mask:
    _, arr = _read_pnm(path)
    if arr.ndim != 2:
        raise ValueError(f"{path}: mask must be single-channel PGM")
    return Mask(arr >= 128)


def image_to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, img: np.ndarray) -> None:
    """Float image in [0,1]; 3-channel -> PPM, single channel -> PGM."""
    u8 = image_to_uint8(img)
    if u8.ndim == 3:
        write_ppm(path, u8)
    else:
        write_pgm(path, u8)


def load_image(path) -> np.ndarray:
    _, arr = _read_pnm(path)
    return arr.astype(np.float64) / 255.0
