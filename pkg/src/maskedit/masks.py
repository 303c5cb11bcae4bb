"""Binary masks: random-walk degradation, parametric mask families, RLE wire format.

All randomness goes through PCG64 with explicit 64-bit seeds so every mask is
reproducible across runs and platforms. Rasterization rule everywhere: a pixel
is set iff its center (x + 0.5, y + 0.5) lies inside the shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from PIL import Image

from .errors import (
    DegenerateShape,
    DimensionMismatch,
    EmptySourceMask,
    MalformedRLE,
)

__all__ = [
    "BinaryMask",
    "RandomWalkParams",
    "ParametricMaskSpec",
    "MaskFamily",
    "StartPolicy",
    "MaskRLE",
    "random_walk_mask",
    "make_parametric_mask",
    "overlap_ratio",
    "rle_encode",
    "rle_decode",
    "dilate",
    "DEFAULT_WALK_PARAMS",
]


@dataclass(frozen=True)
class BinaryMask:
    """Rasterized {0,1} grid. `data` is row-major with shape (height, width)."""

    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DimensionMismatch("mask dimensions must be positive")
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.uint8))
        if arr.shape != (self.height, self.width):
            raise DimensionMismatch(
                f"data shape {arr.shape} != (height, width) = "
                f"({self.height}, {self.width})"
            )
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "BinaryMask":
        arr = np.asarray(arr)
        return cls(width=arr.shape[1], height=arr.shape[0], data=arr.astype(np.uint8))

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        return cls(width, height, np.zeros((height, width), dtype=np.uint8))

    def popcount(self) -> int:
        return int(self.data.sum())

    def is_empty(self) -> bool:
        return self.popcount() == 0

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BinaryMask)
            and self.width == other.width
            and self.height == other.height
            and np.array_equal(self.data, other.data)
        )

    def to_png(self, path) -> None:
        Image.fromarray((self.data * 255).astype(np.uint8), mode="L").convert("1").save(path)

    @classmethod
    def from_png(cls, path) -> "BinaryMask":
        img = Image.open(path).convert("L")
        arr = (np.asarray(img) > 127).astype(np.uint8)
        return cls.from_array(arr)


class StartPolicy(str, Enum):
    CENTROID = "centroid"
    UNIFORM_IN_MASK = "uniform_in_mask"


@dataclass(frozen=True)
class RandomWalkParams:
    num_walkers: int = 2
    steps_per_walker: int = 60
    brush_radius: int = 2
    start_policy: StartPolicy = StartPolicy.UNIFORM_IN_MASK
    seed: int = 0

    def __post_init__(self):
        if self.num_walkers < 1:
            raise ValueError("num_walkers must be >= 1")
        if self.steps_per_walker < 0:
            raise ValueError("steps_per_walker must be >= 0")
        if self.brush_radius < 1:
            raise ValueError("brush_radius must be >= 1")


DEFAULT_WALK_PARAMS = RandomWalkParams()

# Axis steps drawn as rng.integers(4); order is part of the determinism contract.
_STEPS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def _walker_rng(seed: int, walker: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64((seed ^ walker) & 0xFFFFFFFFFFFFFFFF))


def brush_offsets(radius: int) -> list[tuple[int, int]]:
    """Integer offsets (dx, dy) with dx^2 + dy^2 <= radius^2."""
    out = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy <= radius * radius:
                out.append((dx, dy))
    return out


def _centroid_start(m: np.ndarray) -> tuple[int, int]:
    ys, xs = np.nonzero(m)
    cx = int(np.floor(xs.mean() + 0.5))
    cy = int(np.floor(ys.mean() + 0.5))
    if 0 <= cy < m.shape[0] and 0 <= cx < m.shape[1] and m[cy, cx]:
        return cx, cy
    # Centroid may fall outside the region (e.g. a ring); snap to nearest set
    # pixel, ties broken row-major.
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    i = int(np.argmin(d2))
    return int(xs[i]), int(ys[i])


def random_walk_mask(m_o: BinaryMask, params: RandomWalkParams) -> BinaryMask:
    """Degrade a full mask into a free-shape mask by brush-stamped random walks.

    Each walker starts inside `m_o`, takes unit steps in one of 4 axis
    directions (clamped to bounds, allowed to leave the source region), and a
    disc of `brush_radius` is stamped at every visited position including the
    start. Walker i consumes its own PCG64 stream seeded with seed XOR i.
    """
    if m_o.is_empty():
        raise EmptySourceMask("source mask has no set pixels")
    h, w = m_o.height, m_o.width
    src = m_o.data
    out = np.zeros((h, w), dtype=np.uint8)
    offsets = brush_offsets(params.brush_radius)
    ys, xs = np.nonzero(src)

    for walker in range(params.num_walkers):
        rng = _walker_rng(params.seed, walker)
        if params.start_policy is StartPolicy.CENTROID:
            x, y = _centroid_start(src)
        else:
            i = int(rng.integers(len(xs)))
            x, y = int(xs[i]), int(ys[i])
        for step in range(params.steps_per_walker + 1):
            if step > 0:
                dx, dy = _STEPS[int(rng.integers(4))]
                x = min(max(x + dx, 0), w - 1)
                y = min(max(y + dy, 0), h - 1)
            for dx, dy in offsets:
                px, py = x + dx, y + dy
                if 0 <= px < w and 0 <= py < h:
                    out[py, px] = 1
    return BinaryMask(w, h, out)


class MaskFamily(str, Enum):
    CIRCLE = "circle"
    RECTANGLE = "rectangle"
    TRIANGLE = "triangle"
    IRREGULAR = "irregular"


@dataclass(frozen=True)
class ParametricMaskSpec:
    """One of the 8 (family, open_hole) benchmark mask types, with orientation."""

    family: MaskFamily
    open_hole: bool = False
    orientation: float = 0.0
    center: tuple[float, float] = (0.5, 0.5)
    scale: float = 0.5
    hole_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.scale <= 1.0):
            raise ValueError("scale must be in (0, 1]")
        if self.open_hole and not (0.0 < self.hole_scale < 1.0):
            raise ValueError("hole_scale must be in (0, 1)")


_IRREGULAR_VERTICES = 12
_IRREGULAR_JITTER = 0.4


def _polygon_vertices(spec: ParametricMaskSpec, cx: float, cy: float, r: float):
    if spec.family is MaskFamily.RECTANGLE:
        # Half extents (r/2, r): a 1:2 box, long side 2r.
        corners = [(-r / 2, -r), (r / 2, -r), (r / 2, r), (-r / 2, r)]
        angles_r = None
    elif spec.family is MaskFamily.TRIANGLE:
        corners = None
        angles_r = [(spec.orientation + 2 * np.pi * k / 3, r) for k in range(3)]
    elif spec.family is MaskFamily.IRREGULAR:
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        corners = None
        angles_r = [
            (
                spec.orientation + 2 * np.pi * k / _IRREGULAR_VERTICES,
                r * (1.0 + float(rng.uniform(-_IRREGULAR_JITTER, _IRREGULAR_JITTER))),
            )
            for k in range(_IRREGULAR_VERTICES)
        ]
    else:
        raise ValueError(spec.family)

    verts = []
    if corners is not None:
        c, s = np.cos(spec.orientation), np.sin(spec.orientation)
        for ux, uy in corners:
            verts.append((cx + c * ux - s * uy, cy + s * ux + c * uy))
    else:
        for ang, rad in angles_r:
            verts.append((cx + rad * np.cos(ang), cy + rad * np.sin(ang)))
    return np.array(verts, dtype=np.float64)


def _points_in_polygon(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd crossing test, vectorized over pixel centers."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        cond = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= cond & (px < xint)
    return inside


def _rasterize(spec: ParametricMaskSpec, width: int, height: int, r: float) -> np.ndarray:
    cx = spec.center[0] * width
    cy = spec.center[1] * height
    yy, xx = np.mgrid[0:height, 0:width]
    px = xx + 0.5
    py = yy + 0.5
    if spec.family is MaskFamily.CIRCLE:
        return ((px - cx) ** 2 + (py - cy) ** 2) <= r * r
    verts = _polygon_vertices(spec, cx, cy, r)
    return _points_in_polygon(px, py, verts)


def make_parametric_mask(spec: ParametricMaskSpec, width: int, height: int) -> BinaryMask:
    """Rasterize one of the parametric mask families at the given resolution."""
    if width < 8 or height < 8:
        raise DimensionMismatch("width and height must be >= 8")
    r = spec.scale * min(width, height) / 2.0
    filled = _rasterize(spec, width, height, r)
    if spec.open_hole:
        filled &= ~_rasterize(spec, width, height, r * spec.hole_scale)
    arr = filled.astype(np.uint8)
    if arr.sum() == 0:
        raise DegenerateShape(f"spec {spec} rasterized to an empty mask")
    return BinaryMask(width, height, arr)


def overlap_ratio(a: BinaryMask, b: BinaryMask) -> float:
    """|a AND b| / |a|."""
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatch("masks have different dimensions")
    na = a.popcount()
    if na == 0:
        raise EmptySourceMask("first mask is empty")
    return float(np.logical_and(a.data, b.data).sum()) / na


def dilate(m: BinaryMask, radius: int) -> BinaryMask:
    """Binary dilation with a Euclidean disc structuring element."""
    if radius <= 0:
        return m
    from scipy import ndimage

    offs = brush_offsets(radius)
    size = 2 * radius + 1
    struct = np.zeros((size, size), dtype=bool)
    for dx, dy in offs:
        struct[dy + radius, dx + radius] = True
    return BinaryMask(m.width, m.height, ndimage.binary_dilation(m.data, struct).astype(np.uint8))


@dataclass(frozen=True)
class MaskRLE:
    """Run-length encoding: alternating 0-run/1-run lengths, starting with a 0-run."""

    width: int
    height: int
    runs: tuple[int, ...]

    def to_json_obj(self) -> dict:
        return {"w": self.width, "h": self.height, "runs": list(self.runs)}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "MaskRLE":
        try:
            w, h, runs = int(obj["w"]), int(obj["h"]), [int(r) for r in obj["runs"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedRLE(f"bad RLE object: {exc}") from exc
        if any(r < 0 for r in runs):
            raise MalformedRLE("negative run length")
        if sum(runs) != w * h:
            raise MalformedRLE("run lengths do not cover width*height")
        return cls(w, h, tuple(runs))

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "MaskRLE":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedRLE(str(exc)) from exc
        return cls.from_json_obj(obj)


def rle_encode(m: BinaryMask) -> MaskRLE:
    flat = m.data.reshape(-1)
    if flat.size == 0:
        return MaskRLE(m.width, m.height, ())
    change = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = list(np.diff(bounds))
    if flat[0] == 1:
        runs = [0] + runs
    return MaskRLE(m.width, m.height, tuple(int(r) for r in runs))


def rle_decode(r: MaskRLE) -> BinaryMask:
    total = r.width * r.height
    if sum(r.runs) != total:
        raise MalformedRLE("run lengths do not cover width*height")
    flat = np.zeros(total, dtype=np.uint8)
    pos = 0
    val = 0
    for run in r.runs:
        if val:
            flat[pos : pos + run] = 1
        pos += run
        val ^= 1
    return BinaryMask(r.width, r.height, flat.reshape(r.height, r.width))
