"""Anytime refinement of preimage approximations.

Leaves of a binary partition tree are kept in a priority queue ordered by the
estimated volume still missing (under) or in excess (over).  Each iteration
pops the worst leaf, splits it either along an input feature or on the sign
of an unstable ReLU, and approximates both children.  The union of leaf
polytopes is a valid approximation after every iteration.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .approx import ApproxConfig, RegionApprox, approximate_region
from .geometry import (Box, EmptyPreimageError, HalfSpace, Mode, Polytope, PolytopeUnion,
                       derive_rng, exact_volume, sample_box)
from .model import Network, OutputSpec, compose_spec
from .relax import (DTYPE, BoundMode, RelaxParams, Sign, SpecBounder, Split, Subregion,
                    init_params, neuron_linear_bounds)

log = logging.getLogger(__name__)

TIE_TOL = 1e-9


class SplitStrategy(str, enum.Enum):
    INPUT = "input"
    RELU = "relu"


class InputHeuristic(str, enum.Enum):
    SMOOTHED = "smoothed"
    LONGEST_EDGE = "longest_edge"


class Status(str, enum.Enum):
    TARGET_MET = "target_met"
    BUDGET_EXHAUSTED = "budget_exhausted"
    ALL_RELU_SPLIT = "all_relu_split"
    EMPTY_PREIMAGE = "empty_preimage"


class AllReLUSplit(Exception):
    """No unstable, unsplit neuron is left in a subregion."""


@dataclass(frozen=True)
class RefineConfig:
    target_coverage: float = 0.9
    max_iterations: int = 100
    split_strategy: SplitStrategy = SplitStrategy.INPUT
    approx: ApproxConfig = field(default_factory=ApproxConfig)
    seed: int = 0
    input_heuristic: InputHeuristic = InputHeuristic.SMOOTHED
    greedy_feature_cap: int = 32
    coverage_factor: int = 4
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "split_strategy", SplitStrategy(self.split_strategy))
        object.__setattr__(self, "input_heuristic", InputHeuristic(self.input_heuristic))
        r = self.target_coverage
        if self.approx.mode is Mode.UNDER and not 0 < r <= 1:
            raise ValueError("under-approximation needs 0 < target_coverage <= 1")
        if self.approx.mode is Mode.OVER and r < 1:
            raise ValueError("over-approximation needs target_coverage >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")

    @property
    def mode(self) -> Mode:
        return self.approx.mode


@dataclass
class DomainNode:
    region: Subregion
    approx: RegionApprox
    samples: np.ndarray
    volume: float
    preimage_flags: np.ndarray
    polytope_flags: np.ndarray
    priority: float = 0.0
    raw_priority: float = 0.0
    polytope: Polytope | None = None
    candidates: np.ndarray | None = None
    hits: np.ndarray | None = None
    closed: str | None = None

    def __post_init__(self):
        if self.polytope is None:
            self.polytope = self.approx.polytope

    @property
    def params(self) -> RelaxParams:
        return self.approx.params


@dataclass
class RunStats:
    iterations: int
    coverage_trace: list[float]
    num_polytopes: int
    wall_ms: int
    status: Status

    def to_dict(self) -> dict:
        return {"iterations": self.iterations,
                "coverage_trace": [float(c) for c in self.coverage_trace],
                "num_polytopes": self.num_polytopes,
                "wall_ms": self.wall_ms,
                "status": Status(self.status).value}


@dataclass
class RefineResult:
    union: PolytopeUnion
    stats: RunStats
    leaves: list[DomainNode]


def calc_priority(node: DomainNode, mode: Mode) -> float:
    """Estimated volume gap between the node's polytope and its preimage."""
    n = node.samples.shape[0]
    if n == 0:
        return 0.0
    pre = np.count_nonzero(node.preimage_flags)
    poly = np.count_nonzero(node.polytope_flags)
    diff = pre - poly if Mode(mode) is Mode.UNDER else poly - pre
    return node.volume / n * diff


def select_relu_node(node: DomainNode, net: Network) -> tuple[int, int]:
    """Unstable, unsplit neuron whose sign splits the node's samples most evenly."""
    bounds = node.approx.bounds
    pre = net.pre_activations(node.samples) if node.samples.shape[0] else None
    best, best_key = None, None
    for layer in net.relu_layers:
        cand = bounds.unstable(layer) & ~node.region.split_mask(layer, len(bounds.lower[layer]))
        if not cand.any():
            continue
        if pre is None:
            diff = np.zeros(len(cand))
        else:
            pos = np.count_nonzero(pre[layer] >= 0, axis=0)
            diff = np.abs(2 * pos - pre[layer].shape[0])
        for j in np.flatnonzero(cand):
            if best_key is None or diff[j] < best_key:
                best, best_key = (layer, int(j)), diff[j]
    if best is None:
        raise AllReLUSplit(node.region.id)
    return best


def split_halfspaces(lower: tuple[np.ndarray, float], upper: tuple[np.ndarray, float],
                     mode: Mode) -> tuple[HalfSpace, HalfSpace]:
    """Planes added to the (+, -) children of a ReLU split.

    Under: each plane implies the true sign, so the children stay sound and
    disjoint.  Over: each plane is implied by the true sign.
    """
    (a_lo, b_lo), (a_up, b_up) = lower, upper
    if Mode(mode) is Mode.UNDER:
        return HalfSpace(a_lo, b_lo), HalfSpace(-np.asarray(a_up), -b_up)
    return HalfSpace(a_up, b_up), HalfSpace(-np.asarray(a_lo), -b_lo)


def split_subregion(region: Subregion, choice, net: Network | None = None,
                    planes: tuple[HalfSpace, HalfSpace] | None = None,
                    hull: tuple[HalfSpace, HalfSpace] | None = None
                    ) -> tuple[Subregion, Subregion]:
    """Bisect along an input feature (``int``) or split on a ``(layer, neuron)``."""
    if isinstance(choice, (int, np.integer)):
        left, right = region.box.bisect(int(choice))
        return (replace(region, box=left, id=region.id + ".0"),
                replace(region, box=right, id=region.id + ".1"))
    layer, neuron = choice
    if region.is_split(layer, neuron):
        raise ValueError(f"neuron ({layer}, {neuron}) is already split")
    planes = planes or ()
    hull = hull or ()
    children = []
    for k, sign in enumerate((Sign.NONNEG, Sign.NEG)):
        children.append(Subregion(
            region.box, region.splits + (Split(layer, neuron, sign),),
            f"{region.id}.{k}",
            region.halfspaces + ((planes[k],) if planes else ()),
            region.hull + ((hull[k],) if hull else ())))
    return children[0], children[1]


def _extend_beta(params: RelaxParams) -> RelaxParams:
    k = params.beta.shape[0]
    return RelaxParams(tuple(a.copy() for a in params.alpha),
                       np.concatenate([params.beta, np.zeros((k, 1))], axis=1))


class Refiner:
    """State of one refinement run; :meth:`step` performs one iteration."""

    def __init__(self, net: Network, spec: OutputSpec, box: Box, config: RefineConfig,
                 input_halfspaces: tuple[HalfSpace, ...] = ()):
        self.net = net
        self.spec = spec
        self.config = config
        self.mode = config.mode
        self.composed = compose_spec(net, spec)
        self.input_halfspaces = tuple(input_halfspaces)
        self.root_box = box
        n = config.approx.n_samples
        self.cov_x = sample_box(box, config.coverage_factor * n,
                                derive_rng(config.seed, "coverage", "root"))
        self.cov_in_input = self._in_input(self.cov_x)
        self.cov_pre = self._preimage(self.cov_x)
        self.cover = np.zeros(self.cov_x.shape[0], dtype=np.int64)
        self.leaves: dict[str, DomainNode] = {}
        self._heap: list = []
        self._seq = itertools.count()
        self.iterations = 0
        self._pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None

        root = Subregion(box, (), "root", self.input_halfspaces, ())
        samples = sample_box(box, n, derive_rng(config.seed, "node", "root"))
        node = self._make_node(root, samples, box.volume, None, None,
                               np.arange(self.cov_x.shape[0]))
        self._add_leaf(node)

    # -- helpers ---------------------------------------------------------
    def _in_input(self, x: np.ndarray) -> np.ndarray:
        mask = np.ones(x.shape[0], dtype=bool)
        for h in self.input_halfspaces:
            mask &= h.contains(x)
        return mask

    def _preimage(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] == 0:
            return np.zeros(0, dtype=bool)
        return np.all(self.composed.forward(x) >= 0, axis=1) & self._in_input(x)

    def _static_mask(self, region: Subregion, x: np.ndarray) -> np.ndarray:
        mask = np.ones(x.shape[0], dtype=bool)
        for h in region.halfspaces:
            mask &= h.contains(x)
        return mask

    def _region_empty(self, region: Subregion) -> bool:
        if not region.hull or region.box.dim > 2:
            return False
        return exact_volume(Polytope(region.box, region.hull)) <= 0.0

    def _make_node(self, region: Subregion, samples: np.ndarray, volume: float,
                   initial: RelaxParams | None, slopes: dict | None,
                   candidates: np.ndarray | None,
                   inherited: Polytope | None = None) -> DomainNode:
        """Approximate ``region`` and wrap it as a leaf.

        ``inherited`` is the parent's polytope cut down to this child.  In
        under mode it is still sound, so it replaces the fresh polytope when
        it covers more of the coverage samples; this keeps the coverage
        trace non-decreasing even where looser child bounds would shrink it.
        """
        cfg = self.config.approx
        static = self._static_mask(region, samples)
        ra = approximate_region(self.composed, region, cfg, samples, volume,
                                initial=initial, slopes=slopes, static_mask=static)
        cand = np.arange(self.cov_x.shape[0]) if candidates is None else candidates
        polytope, hits = ra.polytope, self._hits(ra.polytope, cand)
        if inherited is not None and self.mode is Mode.UNDER:
            old_hits = self._hits(inherited, cand)
            if old_hits.size > hits.size:
                polytope, hits = inherited, old_hits
        node = DomainNode(region, ra, samples, volume, self._preimage(samples),
                          polytope.contains(samples) if samples.shape[0]
                          else np.zeros(0, dtype=bool),
                          polytope=polytope, candidates=candidates, hits=hits)
        node.raw_priority = calc_priority(node, self.mode)
        node.priority = max(node.raw_priority, 0.0)
        node.closed = self._closure(node)
        return node

    def _hits(self, polytope: Polytope, cand: np.ndarray) -> np.ndarray:
        if cand.size == 0:
            return cand
        return cand[polytope.contains(self.cov_x[cand])]

    def _closure(self, node: DomainNode) -> str | None:
        """Reason a leaf can never benefit from splitting, if any."""
        bounds = node.approx.bounds
        if bounds.infeasible or self._region_empty(node.region):
            return "empty_region"
        region = node.region
        opposite = BoundMode.UPPER if self.mode is Mode.UNDER else BoundMode.LOWER
        other = SpecBounder(self.composed, region, bounds, opposite).evaluate(
            init_params(self.composed, region, bounds))
        mine = node.approx.spec_bounds
        lower = mine if self.mode is Mode.UNDER else other
        upper = other if self.mode is Mode.UNDER else mine
        if np.any(upper.concrete_max(region.box) < 0):
            return "no_preimage"
        if np.all(lower.concrete_min(region.box) >= 0):
            return "all_preimage"
        if bounds.num_unstable() == 0:
            return "stable"
        if self.config.split_strategy is SplitStrategy.RELU:
            try:
                select_relu_node(node, self.net)
            except AllReLUSplit:
                return "all_relu_split"
        return None

    def _add_leaf(self, node: DomainNode) -> None:
        self.cover[node.hits] += 1
        self.leaves[node.region.id] = node
        if node.closed is None:
            heapq.heappush(self._heap, (-node.priority, next(self._seq), node.region.id))

    def _remove_leaf(self, node: DomainNode) -> None:
        self.cover[node.hits] -= 1
        del self.leaves[node.region.id]

    # -- public state ----------------------------------------------------
    @property
    def exhausted(self) -> bool:
        return not self._heap

    def union(self) -> PolytopeUnion:
        return PolytopeUnion(tuple(n.polytope for n in self.leaves.values()), self.mode)

    def covered_count(self) -> int:
        return int(np.count_nonzero(self.cover > 0))

    def coverage(self) -> float:
        pre = int(np.count_nonzero(self.cov_pre))
        if pre == 0:
            raise EmptyPreimageError("no coverage sample lies in the preimage")
        return self.covered_count() / pre

    def target_met(self, coverage: float) -> bool:
        r = self.config.target_coverage
        return coverage >= r if self.mode is Mode.UNDER else coverage <= r

    # -- splitting -------------------------------------------------------
    def select_input_feature(self, node: DomainNode) -> int:
        box = node.region.box
        widths = box.widths
        usable = np.flatnonzero(widths > 0)
        if usable.size == 0:
            raise ValueError(f"subregion {node.region.id} has no splittable feature")
        if (self.config.input_heuristic is InputHeuristic.LONGEST_EDGE
                or box.dim > self.config.greedy_feature_cap or usable.size == 1):
            return int(usable[np.argmax(widths[usable])])
        quick = replace(self.config.approx, opt_steps=0)
        sign = 1.0 if self.mode is Mode.UNDER else -1.0
        best, best_score = None, None
        for f in usable:
            score = 0.0
            for child in split_subregion(node.region, int(f)):
                inside = child.box.contains(node.samples)
                x = node.samples[inside]
                if x.shape[0] == 0:
                    continue
                ra = approximate_region(self.composed, child, quick, x, child.box.volume,
                                        initial=node.params,
                                        slopes=node.approx.bounds.slopes)
                A = torch.as_tensor(ra.spec_bounds.A, dtype=DTYPE)
                b = torch.as_tensor(ra.spec_bounds.b, dtype=DTYPE)
                g = torch.as_tensor(x, dtype=DTYPE) @ A.T + b
                soft = torch.sigmoid(g.min(dim=1).values)
                score += child.box.volume / x.shape[0] * float(soft.sum())
            score *= sign
            # scores within TIE_TOL count as equal so the lower index wins
            if best_score is None or score > best_score + TIE_TOL:
                best, best_score = int(f), score
        return best

    def _children_regions(self, node: DomainNode, choice):
        if isinstance(choice, int):
            return split_subregion(node.region, choice)
        layer, neuron = choice
        region, bounds = node.region, node.approx.bounds
        lower, upper = neuron_linear_bounds(self.composed, region, bounds, layer, neuron)
        planes = split_halfspaces(lower, upper, self.mode)
        hull = split_halfspaces(lower, upper, Mode.OVER)
        region = self._retighten(region, bounds)
        return split_subregion(region, choice, planes=planes, hull=hull)

    def _retighten(self, region: Subregion, bounds) -> Subregion:
        """Recompute the planes of earlier splits from the current bounds.

        A plane fixed when its neuron was split used the bounds of that time;
        splits made since then tighten the neuron's linear bounds.  The new
        plane still implies (under) or is implied by (over) the true sign.
        """
        if not region.splits:
            return region
        k = len(self.input_halfspaces)
        planes, hull = [], []
        for s in region.splits:
            lower, upper = neuron_linear_bounds(self.composed, region, bounds,
                                                s.layer, s.neuron)
            idx = 0 if s.sign is Sign.NONNEG else 1
            planes.append(split_halfspaces(lower, upper, self.mode)[idx])
            hull.append(split_halfspaces(lower, upper, Mode.OVER)[idx])
        return replace(region, halfspaces=region.halfspaces[:k] + tuple(planes),
                       hull=tuple(hull))

    def _child_inputs(self, node: DomainNode, child: Subregion, relu: bool):
        n = self.config.approx.n_samples
        rng = derive_rng(self.config.seed, "node", child.id)
        parent_n = node.samples.shape[0]
        if relu:
            keep = child.true_region_mask(self.net, node.samples)
            x = node.samples[keep]
            volume = node.volume * x.shape[0] / parent_n if parent_n else 0.0
            extra = []
            have = x.shape[0]
            for _ in range(20):
                if have >= n or volume == 0.0:
                    break
                fresh = sample_box(child.box, n, rng)
                fresh = fresh[child.true_region_mask(self.net, fresh)]
                extra.append(fresh)
                have += fresh.shape[0]
            x = np.concatenate([x] + extra)[:n]
            candidates = node.candidates
        else:
            keep = child.box.contains(node.samples)
            x = node.samples[keep]
            if x.shape[0] < n:
                x = np.concatenate([x, sample_box(child.box, n - x.shape[0], rng)])
            volume = child.box.volume
            cand = node.candidates
            candidates = cand[child.box.contains(self.cov_x[cand])]
        return x, volume, candidates

    def step(self) -> bool:
        """Split the highest-priority leaf; ``False`` when nothing is splittable."""
        while self._heap:
            _, _, node_id = heapq.heappop(self._heap)
            node = self.leaves[node_id]
            relu = self.config.split_strategy is SplitStrategy.RELU
            try:
                choice = select_relu_node(node, self.net) if relu \
                    else self.select_input_feature(node)
            except AllReLUSplit:
                node.closed = "all_relu_split"
                continue
            children = self._children_regions(node, choice)
            initial = _extend_beta(node.params) if relu else node.params
            slopes = node.approx.bounds.slopes

            def build(child: Subregion) -> DomainNode:
                x, vol, cand = self._child_inputs(node, child, relu)
                inherited = Polytope(child.box, node.polytope.halfspaces
                                     + child.halfspaces[len(node.region.halfspaces):])
                return self._make_node(child, x, vol, initial, slopes, cand, inherited)

            if self._pool is not None:
                new = list(self._pool.map(build, children))
            else:
                new = [build(c) for c in children]
            self._remove_leaf(node)
            for child in new:
                self._add_leaf(child)
            self.iterations += 1
            log.debug("iteration %d: split %s on %s", self.iterations, node_id, choice)
            return True
        return False

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def refine_preimage(net: Network, spec: OutputSpec, region: Box | Subregion,
                    config: RefineConfig,
                    input_halfspaces: tuple[HalfSpace, ...] = ()) -> RefineResult:
    """Refine until the coverage target, the iteration budget, or exhaustion."""
    start = time.perf_counter()
    box = region.box if isinstance(region, Subregion) else region
    if box.dim != net.input_dim:
        raise ValueError("input region and network dimensions disagree")
    ref = Refiner(net, spec, box, config, input_halfspaces)
    trace: list[float] = []
    try:
        try:
            cov = ref.coverage()
        except EmptyPreimageError:
            status = Status.EMPTY_PREIMAGE
        else:
            trace.append(cov)
            while True:
                if ref.target_met(cov):
                    status = Status.TARGET_MET
                    break
                if ref.iterations >= config.max_iterations:
                    status = Status.BUDGET_EXHAUSTED
                    break
                if not ref.step():
                    status = (Status.ALL_RELU_SPLIT
                              if config.split_strategy is SplitStrategy.RELU
                              else Status.BUDGET_EXHAUSTED)
                    break
                cov = ref.coverage()
                trace.append(cov)
    finally:
        ref.close()
    union = ref.union()
    stats = RunStats(ref.iterations, trace, len(union),
                     int(round((time.perf_counter() - start) * 1000)), status)
    return RefineResult(union, stats, list(ref.leaves.values()))
