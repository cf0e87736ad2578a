"""Backward linear bound propagation for ReLU networks.

Affine lower/upper bounds on each network output are obtained by walking the
layers from the output back to the input, replacing every ReLU with a pair
of linear bounding functions.  Two kinds of parameters enter the pass:

* ``alpha`` -- the lower-bound slope of each unstable ReLU, any value in
  ``[0, 1]`` is sound;
* ``beta`` -- a non-negative multiplier per neuron split, which folds the
  split's sign constraint into the propagated coefficients.

The pass is written with torch tensors so the same code yields both plain
bounds and gradients with respect to ``alpha``/``beta``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .geometry import Box, HalfSpace, Mode
from .model import Network

DTYPE = torch.float64
DEGENERATE_WIDTH = 1e-12


class Sign(str, enum.Enum):
    NONNEG = "nonneg"
    NEG = "neg"


class BoundMode(str, enum.Enum):
    LOWER = "lower"
    UPPER = "upper"

    @classmethod
    def for_mode(cls, mode: Mode) -> "BoundMode":
        return cls.LOWER if Mode(mode) is Mode.UNDER else cls.UPPER


@dataclass(frozen=True)
class Split:
    layer: int
    neuron: int
    sign: Sign


@dataclass(frozen=True, eq=False)
class Subregion:
    """Node of the refinement tree.

    ``halfspaces`` are extra constraints emitted into the node's polytope
    (split planes, input-set planes); ``hull`` holds planes that every point
    of the true region satisfies, used to prove a region empty.
    """

    box: Box
    splits: tuple[Split, ...] = ()
    id: str = "root"
    halfspaces: tuple[HalfSpace, ...] = ()
    hull: tuple[HalfSpace, ...] = ()

    def __post_init__(self):
        seen = set()
        for s in self.splits:
            key = (s.layer, s.neuron)
            if key in seen:
                raise ValueError(f"neuron {key} is split twice")
            seen.add(key)
        object.__setattr__(self, "splits", tuple(self.splits))
        object.__setattr__(self, "halfspaces", tuple(self.halfspaces))
        object.__setattr__(self, "hull", tuple(self.hull))

    def is_split(self, layer: int, neuron: int) -> bool:
        return any(s.layer == layer and s.neuron == neuron for s in self.splits)

    def split_mask(self, layer: int, width: int) -> np.ndarray:
        mask = np.zeros(width, dtype=bool)
        for s in self.splits:
            if s.layer == layer:
                mask[s.neuron] = True
        return mask

    def true_region_mask(self, net: Network, x: np.ndarray) -> np.ndarray:
        """Points of ``x`` inside the box whose activations honour every split."""
        x = np.atleast_2d(x)
        inside = self.box.contains(x)
        if self.splits:
            pre = net.pre_activations(x)
            for s in self.splits:
                z = pre[s.layer][:, s.neuron]
                inside &= (z >= 0) if s.sign is Sign.NONNEG else (z <= 0)
        return inside


@dataclass
class RelaxParams:
    """Per-spec relaxation parameters.

    ``alpha[r]`` has shape ``(K, n)`` for the r-th ReLU layer of the network;
    ``beta`` has shape ``(K, S)`` with one column per split of the region.
    """

    alpha: tuple[np.ndarray, ...]
    beta: np.ndarray

    def copy(self) -> "RelaxParams":
        return RelaxParams(tuple(a.copy() for a in self.alpha), self.beta.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.alpha] + [self.beta.ravel()])

    def size(self) -> int:
        return self.flat().size


@dataclass
class NeuronBounds:
    """Concrete pre-activation bounds of every ReLU layer on a subregion.

    ``linear[i]`` holds ``(A_lo, b_lo, A_up, b_up)``, the affine bounds of the
    layer's pre-activations in terms of the input; ``slopes[i]`` the lower
    relaxation slopes used when bounding deeper layers.
    """

    lower: dict[int, np.ndarray]
    upper: dict[int, np.ndarray]
    linear: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = field(
        default_factory=dict)
    slopes: dict[int, np.ndarray] = field(default_factory=dict)
    infeasible: bool = False

    def unstable(self, layer: int) -> np.ndarray:
        return (self.lower[layer] < 0) & (self.upper[layer] > 0)

    def num_unstable(self) -> int:
        return int(sum(np.count_nonzero(self.unstable(i)) for i in self.lower))


@dataclass
class LinearSpecBounds:
    """One affine function ``A[k] . x + b[k]`` per spec output."""

    A: np.ndarray
    b: np.ndarray
    mode: BoundMode

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.A.T + self.b

    def halfspaces(self) -> tuple[HalfSpace, ...]:
        """Constraints ``g_k(x) >= 0``; constant ones that always hold are dropped."""
        out = (HalfSpace(a, b) for a, b in zip(self.A, self.b))
        return tuple(h for h in out if not (h.is_constant and h.b >= 0))

    def concrete_min(self, box: Box) -> np.ndarray:
        return _concretize(self.A, self.b, box, lower=True)

    def concrete_max(self, box: Box) -> np.ndarray:
        return _concretize(self.A, self.b, box, lower=False)


def relu_relaxation(l: float, u: float, alpha: float) -> tuple[float, float, float, float]:
    """``(lower_slope, lower_bias, upper_slope, upper_bias)`` for ``max(z, 0)`` on ``[l, u]``."""
    if l > u:
        raise ValueError(f"lower bound {l} exceeds upper bound {u}")
    if u <= 0:
        return 0.0, 0.0, 0.0, 0.0
    if l >= 0:
        return 1.0, 0.0, 1.0, 0.0
    if u - l < DEGENERATE_WIDTH:
        return (1.0, 0.0, 1.0, 0.0) if l + u >= 0 else (0.0, 0.0, 0.0, 0.0)
    slope = u / (u - l)
    return float(alpha), 0.0, slope, -slope * l


def _concretize(A: np.ndarray, b: np.ndarray, box: Box, lower: bool) -> np.ndarray:
    pos, neg = np.maximum(A, 0.0), np.minimum(A, 0.0)
    if lower:
        return pos @ box.lower + neg @ box.upper + b
    return pos @ box.upper + neg @ box.lower + b


class _LayerRelax:
    """Fixed parts of the ReLU relaxation of one layer, as tensors."""

    def __init__(self, l: np.ndarray, u: np.ndarray):
        width = u - l
        active = l >= 0
        inactive = (u <= 0) & ~active
        unstable = ~active & ~inactive
        degenerate = unstable & (width < DEGENERATE_WIDTH)
        active |= degenerate & (l + u >= 0)
        unstable &= ~degenerate
        safe = np.where(unstable, width, 1.0)
        up_slope = np.where(active, 1.0, np.where(unstable, u / safe, 0.0))
        up_bias = np.where(unstable, -u * l / safe, 0.0)
        self.unstable = unstable
        self.fixed_lo = torch.as_tensor(active.astype(np.float64), dtype=DTYPE)
        self.unstable_t = torch.as_tensor(unstable.astype(np.float64), dtype=DTYPE)
        self.up_slope = torch.as_tensor(up_slope, dtype=DTYPE)
        self.up_bias = torch.as_tensor(up_bias, dtype=DTYPE)

    def lower_slope(self, alpha):
        if alpha is None:
            return self.fixed_lo
        return self.fixed_lo + self.unstable_t * alpha


def _layer_tensors(net: Network):
    cache = getattr(net, "_premap_tensors", None)
    if cache is None:
        cache = [(torch.tensor(np.array(layer.weights), dtype=DTYPE),
                  torch.tensor(np.array(layer.bias), dtype=DTYPE)) for layer in net.layers]
        # networks are immutable, so the tensor copy can live on the instance
        net._premap_tensors = cache
    return cache


def _propagate(net: Network, top: int, lam, relaxes: dict[int, _LayerRelax],
               alphas: dict, mode: BoundMode, beta_terms: dict | None = None):
    """Walk from pre-activation ``z^(top)`` back to the input.

    ``lam`` holds coefficients on ``z^(top)``; returns ``(A, c)`` with
    ``lam . z^(top) >= A x + c`` (lower) or ``<=`` (upper).
    """
    tensors = _layer_tensors(net)
    layers = net.layers
    const = torch.zeros(lam.shape[0], dtype=DTYPE)
    for i in range(top, -1, -1):
        if beta_terms is not None and i in beta_terms:
            lam = lam + beta_terms[i]
        w, b = tensors[i]
        const = const + lam @ b
        lam = lam @ w
        if i > 0 and layers[i - 1].relu:
            rel = relaxes[i - 1]
            lo = rel.lower_slope(alphas.get(i - 1))
            lam_pos = torch.clamp(lam, min=0.0)
            lam_neg = torch.clamp(lam, max=0.0)
            if mode is BoundMode.LOWER:
                const = const + lam_neg @ rel.up_bias
                lam = lam_pos * lo + lam_neg * rel.up_slope
            else:
                const = const + lam_pos @ rel.up_bias
                lam = lam_pos * rel.up_slope + lam_neg * lo
    return lam, const


def _clip_to_splits(l: np.ndarray, u: np.ndarray, region: Subregion, layer: int):
    l, u = l.copy(), u.copy()
    infeasible = False
    for s in region.splits:
        if s.layer != layer:
            continue
        j = s.neuron
        if s.sign is Sign.NONNEG:
            l[j] = max(l[j], 0.0)
            if u[j] < 0:
                infeasible = True
                u[j] = l[j] = 0.0
        else:
            u[j] = min(u[j], 0.0)
            if l[j] > 0:
                infeasible = True
                u[j] = l[j] = 0.0
    return l, u, infeasible


def interval_bounds(net: Network, box: Box, region: Subregion | None = None) -> NeuronBounds:
    """Plain interval arithmetic through the layers."""
    lo, hi = box.lower, box.upper
    lower, upper = {}, {}
    infeasible = False
    for i, layer in enumerate(net.layers):
        w_pos, w_neg = np.maximum(layer.weights, 0), np.minimum(layer.weights, 0)
        zl = w_pos @ lo + w_neg @ hi + layer.bias
        zu = w_pos @ hi + w_neg @ lo + layer.bias
        if not layer.relu:
            lo, hi = zl, zu
            continue
        if region is not None:
            zl, zu, bad = _clip_to_splits(zl, zu, region, i)
            infeasible |= bad
        lower[i], upper[i] = zl, zu
        lo, hi = np.maximum(zl, 0), np.maximum(zu, 0)
    return NeuronBounds(lower, upper, infeasible=infeasible)


def concrete_bounds(net: Network, region: Subregion,
                    slopes: dict[int, np.ndarray] | None = None,
                    method: str = "backward") -> NeuronBounds:
    """Pre-activation bounds of every ReLU layer, valid on the region.

    Each layer is bounded by a backward pass that treats it as the output.
    ``slopes`` fixes the lower relaxation slope per ReLU layer; missing layers
    get the area-minimising choice (1 when ``u > -l``, else 0).  Bounds of
    split neurons are clipped to the split sign.
    """
    if region.box.dim != net.input_dim:
        raise ValueError("region and network dimensions disagree")
    if method == "interval":
        nb = interval_bounds(net, region.box, region)
        for i in nb.lower:
            nb.slopes[i] = (slopes or {}).get(i, _default_slope(nb.lower[i], nb.upper[i]))
        return nb
    if method != "backward":
        raise ValueError(f"unknown bound method {method!r}")
    lower, upper, linear, used = {}, {}, {}, {}
    relaxes: dict[int, _LayerRelax] = {}
    alphas: dict[int, torch.Tensor] = {}
    infeasible = False
    with torch.no_grad():
        for m in net.relu_layers:
            eye = torch.eye(net.layers[m].out_dim, dtype=DTYPE)
            a_lo, c_lo = _propagate(net, m, eye, relaxes, alphas, BoundMode.LOWER)
            a_up, c_up = _propagate(net, m, eye, relaxes, alphas, BoundMode.UPPER)
            a_lo, c_lo = a_lo.numpy(), c_lo.numpy()
            a_up, c_up = a_up.numpy(), c_up.numpy()
            l = _concretize(a_lo, c_lo, region.box, lower=True)
            u = _concretize(a_up, c_up, region.box, lower=False)
            u = np.maximum(u, l)
            l, u, bad = _clip_to_splits(l, u, region, m)
            infeasible |= bad
            lower[m], upper[m] = l, u
            linear[m] = (a_lo, c_lo, a_up, c_up)
            s = None if slopes is None else slopes.get(m)
            used[m] = _default_slope(l, u) if s is None else np.asarray(s, dtype=np.float64)
            relaxes[m] = _LayerRelax(l, u)
            alphas[m] = torch.as_tensor(used[m], dtype=DTYPE)
    return NeuronBounds(lower, upper, linear, used, infeasible)


def _default_slope(l: np.ndarray, u: np.ndarray) -> np.ndarray:
    return (u > -l).astype(np.float64)


def init_params(net_with_spec: Network, region: Subregion, bounds: NeuronBounds,
                num_specs: int | None = None) -> RelaxParams:
    """Area-minimising alpha per unstable neuron, zero beta."""
    k = num_specs if num_specs is not None else net_with_spec.output_dim
    alpha = tuple(np.tile(_default_slope(bounds.lower[i], bounds.upper[i]), (k, 1))
                  for i in net_with_spec.relu_layers)
    return RelaxParams(alpha, np.zeros((k, len(region.splits))))


def _beta_scatter(net: Network, region: Subregion, mode: BoundMode) -> dict[int, torch.Tensor]:
    """Per layer, an ``(S, n)`` matrix placing signed beta onto split neurons."""
    out = {}
    flip = 1.0 if mode is BoundMode.LOWER else -1.0
    for s_idx, s in enumerate(region.splits):
        if s.layer not in out:
            out[s.layer] = torch.zeros(len(region.splits), net.layers[s.layer].out_dim,
                                       dtype=DTYPE)
        sign = 1.0 if s.sign is Sign.NEG else -1.0
        out[s.layer][s_idx, s.neuron] = flip * sign
    return out


class SpecBounder:
    """Differentiable final backward pass for one subregion.

    Relaxations of intermediate layers are frozen at construction; calling
    :meth:`bounds` with alpha/beta tensors returns ``(A, b)`` tensors of
    shape ``(K, d)`` and ``(K,)`` that carry gradients.
    """

    def __init__(self, net_with_spec: Network, region: Subregion,
                 bounds: NeuronBounds, mode: BoundMode):
        self.net = net_with_spec
        self.region = region
        self.mode = BoundMode(mode)
        self.relu_layers = net_with_spec.relu_layers
        self.relaxes = {i: _LayerRelax(bounds.lower[i], bounds.upper[i])
                        for i in self.relu_layers}
        self.scatter = _beta_scatter(net_with_spec, region, self.mode)
        self.top = len(net_with_spec.layers) - 1
        self.k = net_with_spec.output_dim

    def bounds(self, alpha: Sequence[torch.Tensor], beta: torch.Tensor | None):
        alphas = dict(zip(self.relu_layers, alpha))
        terms = None
        if beta is not None and self.scatter:
            terms = {i: beta @ m for i, m in self.scatter.items()}
        eye = torch.eye(self.k, dtype=DTYPE)
        return _propagate(self.net, self.top, eye, self.relaxes, alphas, self.mode, terms)

    def unstable_masks(self) -> tuple[np.ndarray, ...]:
        return tuple(self.relaxes[i].unstable for i in self.relu_layers)

    def evaluate(self, params: RelaxParams) -> LinearSpecBounds:
        with torch.no_grad():
            alpha = [torch.as_tensor(a, dtype=DTYPE) for a in params.alpha]
            beta = torch.as_tensor(params.beta, dtype=DTYPE)
            A, b = self.bounds(alpha, beta)
        return LinearSpecBounds(A.numpy().copy(), b.numpy().copy(), self.mode)


def backward_bounds(net_with_spec: Network, region: Subregion, params: RelaxParams | None,
                    mode: BoundMode, bounds: NeuronBounds | None = None) -> LinearSpecBounds:
    """Affine bounds on every output of ``net_with_spec`` valid on ``region``."""
    if bounds is None:
        bounds = concrete_bounds(net_with_spec, region)
    if params is None:
        params = init_params(net_with_spec, region, bounds)
    return SpecBounder(net_with_spec, region, bounds, mode).evaluate(params)


def neuron_linear_bounds(net: Network, region: Subregion, bounds: NeuronBounds,
                         layer: int, neuron: int):
    """``(lower HalfSpace-free affine, upper affine)`` of one pre-activation.

    Returned as ``((a_lo, b_lo), (a_up, b_up))``.
    """
    if layer in bounds.linear:
        a_lo, c_lo, a_up, c_up = bounds.linear[layer]
        return (a_lo[neuron], float(c_lo[neuron])), (a_up[neuron], float(c_up[neuron]))
    relaxes = {i: _LayerRelax(bounds.lower[i], bounds.upper[i]) for i in bounds.lower if i < layer}
    alphas = {i: torch.as_tensor(bounds.slopes[i], dtype=DTYPE) for i in relaxes}
    row = torch.zeros(1, net.layers[layer].out_dim, dtype=DTYPE)
    row[0, neuron] = 1.0
    with torch.no_grad():
        a_lo, c_lo = _propagate(net, layer, row, relaxes, alphas, BoundMode.LOWER)
        a_up, c_up = _propagate(net, layer, row, relaxes, alphas, BoundMode.UPPER)
    return ((a_lo[0].numpy().copy(), float(c_lo[0])), (a_up[0].numpy().copy(), float(c_up[0])))
