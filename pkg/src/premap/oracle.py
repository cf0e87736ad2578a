"""Exact preimages of small networks by activation-pattern enumeration.

On each activation pattern the network is affine, so the preimage restricted
to that piece is a polytope.  Enumeration is a depth-first search over
neuron signs that drops branches whose region is empty.  Emptiness is exact
in one and two dimensions; above that it is decided on a fixed sample set
and the result is flagged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (Box, HalfSpace, Mode, Polytope, PolytopeUnion, clip_polygon,
                       box_polygon, derive_rng, interval_clip_1d, sample_box, shoelace_area)
from .model import Network, OutputSpec, compose_spec
from .relax import interval_bounds

MAX_UNSTABLE = 24


class OracleCapError(RuntimeError):
    """Too many unstable neurons for exhaustive enumeration."""


@dataclass(frozen=True)
class ActivationPattern:
    """Activity bit per hidden neuron, in layer then neuron order."""

    active: tuple[bool, ...]

    def __len__(self):
        return len(self.active)


@dataclass(frozen=True, eq=False)
class Piece:
    pattern: ActivationPattern
    region: Polytope
    weights: np.ndarray
    bias: np.ndarray

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.weights.T + self.bias


@dataclass(frozen=True)
class ExactPreimage:
    union: PolytopeUnion
    area: float | None
    sampling_decided: bool
    num_pieces: int

    def to_dict(self) -> dict:
        out = self.union.to_dict()
        out.update({"area": self.area, "exact": not self.sampling_decided,
                    "num_pieces": self.num_pieces})
        return out


class _Region:
    """Half-space list plus whatever is needed to decide emptiness."""

    def __init__(self, box: Box, samples: np.ndarray | None):
        self.box = box
        self.halfspaces: tuple[HalfSpace, ...] = ()
        self.samples = samples
        self.poly = box_polygon(box) if box.dim == 2 else None
        self.interval = (float(box.lower[0]), float(box.upper[0])) if box.dim == 1 else None

    def with_halfspace(self, h: HalfSpace) -> "_Region | None":
        new = _Region.__new__(_Region)
        new.box = self.box
        new.halfspaces = self.halfspaces + (h,)
        new.samples, new.poly, new.interval = self.samples, self.poly, self.interval
        if self.box.dim == 2:
            new.poly = clip_polygon(self.poly, h)
            if shoelace_area(new.poly) <= 0.0:
                return None
        elif self.box.dim == 1:
            sub = Box([self.interval[0]], [self.interval[1]])
            iv = interval_clip_1d(sub, [h])
            if iv is None or iv[1] <= iv[0]:
                return None
            new.interval = iv
        else:
            new.samples = self.samples[h.contains(self.samples)]
            if new.samples.shape[0] == 0:
                return None
        return new

    def value_range(self, a: np.ndarray, b: float) -> tuple[float, float]:
        """Range of ``a.x + b`` over the region, or a superset of it."""
        if self.box.dim == 2:
            v = self.poly @ a + b
            return float(v.min()), float(v.max())
        if self.box.dim == 1:
            v = a[0] * np.array(self.interval) + b
            return float(v.min()), float(v.max())
        lo = np.where(a >= 0, self.box.lower, self.box.upper) @ a + b
        hi = np.where(a >= 0, self.box.upper, self.box.lower) @ a + b
        return float(lo), float(hi)


def count_unstable(net: Network, box: Box) -> int:
    nb = interval_bounds(net, box)
    return int(sum(np.count_nonzero((nb.lower[i] < 0) & (nb.upper[i] > 0)) for i in nb.lower))


def enumerate_pieces(net: Network, box: Box, max_unstable: int = MAX_UNSTABLE,
                     n_samples: int = 100_000, seed: int = 0) -> list[Piece]:
    """All activation patterns with a non-empty region, in DFS order (active first)."""
    if box.dim != net.input_dim:
        raise ValueError("box and network dimensions disagree")
    unstable = count_unstable(net, box)
    if unstable > max_unstable:
        raise OracleCapError(f"{unstable} unstable neurons exceed the cap of {max_unstable}")
    samples = sample_box(box, n_samples, derive_rng(seed, "oracle")) if box.dim > 2 else None
    layers = net.layers
    pieces: list[Piece] = []

    def descend(k: int, j: int, w: np.ndarray, b: np.ndarray, z_w, z_b, mask: list,
                bits: tuple, region: _Region):
        # w, b: affine map from the input to layer k's input
        if k == len(layers):
            pieces.append(Piece(ActivationPattern(bits), Polytope(box, region.halfspaces),
                                w.copy(), b.copy()))
            return
        layer = layers[k]
        if z_w is None:
            z_w = layer.weights @ w
            z_b = layer.weights @ b + layer.bias
        if not layer.relu:
            descend(k + 1, 0, z_w, z_b, None, None, [], bits, region)
            return
        if j == layer.out_dim:
            d = np.array(mask, dtype=np.float64)
            descend(k + 1, 0, d[:, None] * z_w, d * z_b, None, None, [], bits, region)
            return
        a, c = z_w[j], float(z_b[j])
        lo, hi = region.value_range(a, c)
        if lo >= 0:
            branches = [(True, region)]
        elif hi <= 0:
            branches = [(False, region)]
        else:
            branches = [(True, region.with_halfspace(HalfSpace(a, c))),
                        (False, region.with_halfspace(HalfSpace(-a, -c)))]
        for active, child in branches:
            if child is not None:
                descend(k, j + 1, w, b, z_w, z_b, mask + [active], bits + (active,), child)

    root = _Region(box, samples)
    descend(0, 0, np.eye(box.dim), np.zeros(box.dim), None, None, [], (), root)
    return pieces


def exact_preimage(net: Network, box: Box, spec: OutputSpec,
                   max_unstable: int = MAX_UNSTABLE, n_samples: int = 100_000,
                   seed: int = 0,
                   input_halfspaces: tuple[HalfSpace, ...] = ()) -> ExactPreimage:
    """Exact restricted preimage as one polytope per surviving piece.

    ``input_halfspaces`` further restrict the input set and are added to
    every emitted polytope.
    """
    composed = compose_spec(net, spec)
    samples = sample_box(box, n_samples, derive_rng(seed, "oracle")) if box.dim > 2 else None
    polytopes, area = [], 0.0
    for piece in enumerate_pieces(composed, box, max_unstable, n_samples, seed):
        region = _Region(box, samples)
        for h in piece.region.halfspaces:
            region = region.with_halfspace(h)
        extra = []
        spec_planes = [HalfSpace(a, c) for a, c in zip(piece.weights, piece.bias)]
        for h in tuple(input_halfspaces) + tuple(spec_planes):
            if h.is_constant:
                if h.b < 0:
                    region = None
                    break
                continue
            extra.append(h)
            region = region.with_halfspace(h)
            if region is None:
                break
        if region is None:
            continue
        polytopes.append(piece.region.with_halfspaces(extra))
        if box.dim == 2:
            area += shoelace_area(region.poly)
        elif box.dim == 1:
            area += region.interval[1] - region.interval[0]
    return ExactPreimage(PolytopeUnion(tuple(polytopes), Mode.UNDER),
                         area if box.dim <= 2 else None, box.dim > 2,
                         len(polytopes))
