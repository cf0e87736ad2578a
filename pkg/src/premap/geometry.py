"""Boxes, half-spaces, polytopes and their unions.

Volumes in more than two dimensions are only ever estimated by uniform
sampling; :func:`polygon_area_2d` gives exact areas in the plane and is used
as a cross-check.
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np


class Mode(str, enum.Enum):
    UNDER = "under"
    OVER = "over"


class EmptyPreimageError(ValueError):
    """No sample falls in the preimage, so a coverage ratio is undefined."""


def derive_rng(seed: int, purpose: str, node_id: str = "") -> np.random.Generator:
    """Independent generator for ``(seed, purpose, node_id)``.

    Stable across processes, so concurrent or repeated runs draw the same
    points for the same tree node.
    """
    key = zlib.crc32(f"{purpose}/{node_id}".encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key]))


@dataclass(frozen=True, eq=False)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=np.float64).reshape(-1)
        hi = np.array(self.upper, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("box bounds have different lengths")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lower) & (x <= self.upper), axis=1)

    def bisect(self, feature: int) -> tuple["Box", "Box"]:
        mid = 0.5 * (self.lower[feature] + self.upper[feature])
        left_hi = self.upper.copy()
        left_hi[feature] = mid
        right_lo = self.lower.copy()
        right_lo[feature] = mid
        return Box(self.lower, left_hi), Box(right_lo, self.upper)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Box":
        return cls(data["lower"], data["upper"])

    def __eq__(self, other):
        return (isinstance(other, Box) and np.array_equal(self.lower, other.lower)
                and np.array_equal(self.upper, other.upper))

    def __repr__(self):
        return f"Box({self.lower.tolist()}, {self.upper.tolist()})"


@dataclass(frozen=True, eq=False)
class HalfSpace:
    """The closed set ``a . x + b >= 0``."""

    a: np.ndarray
    b: float

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(a)) or not np.isfinite(self.b):
            raise ValueError("half-space coefficients must be finite")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))

    @property
    def is_constant(self) -> bool:
        """All-zero normal: the set is either everything or empty."""
        return not np.any(self.a)

    def value(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.a + self.b

    def contains(self, x: np.ndarray) -> np.ndarray:
        return self.value(x) >= 0

    def negated(self) -> "HalfSpace":
        return HalfSpace(-self.a, -self.b)

    def to_dict(self) -> dict:
        return {"a": self.a.tolist(), "b": self.b}

    @classmethod
    def from_dict(cls, data: dict) -> "HalfSpace":
        return cls(data["a"], data["b"])

    def __repr__(self):
        return f"HalfSpace({self.a.tolist()}, {self.b})"


def _halfspace_matrix(halfspaces: Sequence[HalfSpace], dim: int):
    if not halfspaces:
        return np.zeros((0, dim)), np.zeros(0)
    return (np.stack([h.a for h in halfspaces]),
            np.array([h.b for h in halfspaces]))


@dataclass(frozen=True, eq=False)
class Polytope:
    box: Box
    halfspaces: tuple[HalfSpace, ...] = ()

    def __post_init__(self):
        hs = tuple(self.halfspaces)
        for h in hs:
            if h.a.shape[0] != self.box.dim:
                raise ValueError("half-space dimension does not match box")
        object.__setattr__(self, "halfspaces", hs)

    @property
    def dim(self) -> int:
        return self.box.dim

    @cached_property
    def _matrix(self):
        return _halfspace_matrix(self.halfspaces, self.dim)

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Closed membership for a batch of points ``(n, d)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ValueError(f"points have dimension {x.shape[1]}, polytope {self.dim}")
        inside = self.box.contains(x)
        a, b = self._matrix
        if a.shape[0]:
            inside &= np.all(x @ a.T + b >= 0, axis=1)
        return inside

    def with_halfspaces(self, extra: Iterable[HalfSpace]) -> "Polytope":
        return Polytope(self.box, self.halfspaces + tuple(extra))

    def to_dict(self) -> dict:
        return {"box": self.box.to_dict(),
                "halfspaces": [h.to_dict() for h in self.halfspaces]}

    @classmethod
    def from_dict(cls, data: dict) -> "Polytope":
        return cls(Box.from_dict(data["box"]),
                   tuple(HalfSpace.from_dict(h) for h in data.get("halfspaces", [])))


def membership(p: Polytope, x: np.ndarray) -> bool:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.dim,):
        raise ValueError(f"point has shape {x.shape}, polytope dimension is {p.dim}")
    return bool(p.contains(x[None, :])[0])


@dataclass(frozen=True, eq=False)
class PolytopeUnion:
    polytopes: tuple[Polytope, ...]
    mode: Mode

    def __post_init__(self):
        object.__setattr__(self, "polytopes", tuple(self.polytopes))
        object.__setattr__(self, "mode", Mode(self.mode))

    def __len__(self):
        return len(self.polytopes)

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Union membership; a point inside several members counts once."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        inside = np.zeros(x.shape[0], dtype=bool)
        for p in self.polytopes:
            inside |= p.contains(x)
        return inside

    def membership_counts(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        counts = np.zeros(x.shape[0], dtype=np.int64)
        for p in self.polytopes:
            counts += p.contains(x)
        return counts

    def to_dict(self) -> dict:
        return {"mode": self.mode.value,
                "polytopes": [p.to_dict() for p in self.polytopes]}

    @classmethod
    def from_dict(cls, data: dict) -> "PolytopeUnion":
        return cls(tuple(Polytope.from_dict(p) for p in data["polytopes"]),
                   Mode(data["mode"]))


def sample_box(box: Box, n: int, seed: int | np.random.Generator) -> np.ndarray:
    """``n`` points uniform in ``box``, shape ``(n, d)``."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.random((n, box.dim))
    return box.lower + u * box.widths


def estimate_volume(indicator: Callable[[np.ndarray], np.ndarray], box: Box,
                    samples: np.ndarray) -> float:
    samples = np.atleast_2d(samples)
    if samples.shape[0] == 0:
        raise ValueError("cannot estimate a volume from zero samples")
    hits = np.count_nonzero(indicator(samples))
    return box.volume * hits / samples.shape[0]


def coverage_ratio(union: PolytopeUnion,
                   preimage_indicator: Callable[[np.ndarray], np.ndarray],
                   box: Box, samples: np.ndarray) -> float:
    """vol(union) / vol(preimage), both counted on the same samples."""
    samples = np.atleast_2d(samples)
    if samples.shape[0] == 0:
        raise ValueError("cannot estimate coverage from zero samples")
    pre = np.count_nonzero(preimage_indicator(samples))
    if pre == 0:
        raise EmptyPreimageError("no sample lies in the preimage")
    return np.count_nonzero(union.contains(samples)) / pre


def box_polygon(box: Box) -> np.ndarray:
    (x0, y0), (x1, y1) = box.lower, box.upper
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


def clip_polygon(poly: np.ndarray, h: HalfSpace) -> np.ndarray:
    """Sutherland-Hodgman step: keep the part of ``poly`` with ``a.x + b >= 0``."""
    n = len(poly)
    if n == 0:
        return poly
    vals = poly @ h.a + h.b
    out = []
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        vp, vq = vals[i], vals[(i + 1) % n]
        if vp >= 0:
            out.append(p)
        if (vp >= 0) != (vq >= 0):
            t = vp / (vp - vq)
            out.append(p + t * (q - p))
    if not out:
        return np.zeros((0, 2))
    return np.array(out)


def shoelace_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clipped_polygon(box: Box, halfspaces: Sequence[HalfSpace]) -> np.ndarray:
    """Vertices of ``box`` intersected with ``halfspaces`` (2-D only)."""
    if box.dim != 2:
        raise ValueError("exact clipping is only available in two dimensions")
    poly = box_polygon(box)
    for h in halfspaces:
        poly = clip_polygon(poly, h)
        if len(poly) == 0:
            break
    return poly


def polygon_area_2d(box: Box, halfspaces: Sequence[HalfSpace]) -> float:
    return shoelace_area(clipped_polygon(box, halfspaces))


def interval_clip_1d(box: Box, halfspaces: Sequence[HalfSpace]) -> tuple[float, float] | None:
    """Exact intersection of a 1-D box with half-lines, or ``None`` if empty."""
    if box.dim != 1:
        raise ValueError("interval clipping needs a 1-D box")
    lo, hi = float(box.lower[0]), float(box.upper[0])
    for h in halfspaces:
        a = float(h.a[0])
        if a > 0:
            lo = max(lo, -h.b / a)
        elif a < 0:
            hi = min(hi, -h.b / a)
        elif h.b < 0:
            return None
        if lo > hi:
            return None
    return lo, hi


def exact_volume(p: Polytope) -> float:
    """Exact measure of a polytope of dimension one or two."""
    if p.dim == 2:
        return polygon_area_2d(p.box, p.halfspaces)
    if p.dim == 1:
        iv = interval_clip_1d(p.box, p.halfspaces)
        return 0.0 if iv is None else iv[1] - iv[0]
    raise ValueError("exact volume is only available for d <= 2")
