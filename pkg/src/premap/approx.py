"""Single-polytope approximation of a restricted preimage.

For every subregion the network composed with the output constraints is
bounded by a backward pass; each affine bound gives one half-space and the
conjunction (plus the region's own constraints) is the polytope.  The
relaxation parameters are tuned by projected gradient descent on a
sigmoid/log-sum-exp surrogate of the polytope's sampled volume.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .geometry import Mode, Polytope, derive_rng, sample_box
from .model import Network, OutputSpec, compose_spec
from .relax import (DTYPE, BoundMode, LinearSpecBounds, NeuronBounds, RelaxParams,
                    SpecBounder, Subregion, concrete_bounds, init_params)


@dataclass(frozen=True)
class ApproxConfig:
    n_samples: int = 10000
    mode: Mode = Mode.UNDER
    opt_steps: int = 20
    learning_rate: float = 0.1
    lse_temperature: float = 1.0
    optimize_alpha: bool = True
    optimize_beta: bool = True
    bound_method: str = "backward"

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if self.opt_steps < 0:
            raise ValueError("opt_steps must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lse_temperature <= 0:
            raise ValueError("lse_temperature must be positive")


def _soft_membership(A, b, x, temperature: float):
    """sigma(-LSE(-g_1, ..., -g_K)) per sample, with a temperature on the LSE."""
    g = x @ A.T + b
    soft_min = -temperature * torch.logsumexp(-g / temperature, dim=1)
    return torch.sigmoid(soft_min)


def _loss_tensor(A, b, x, volume: float, mode: Mode, temperature: float):
    soft = _soft_membership(A, b, x, temperature)
    est = volume * soft.sum() / x.shape[0]
    return -est if mode is Mode.UNDER else est


def smoothed_loss(bounds: LinearSpecBounds, samples: np.ndarray, box_volume: float,
                  mode: Mode, temperature: float = 1.0) -> float:
    """Differentiable surrogate of the (negated, for under) polytope volume."""
    samples = np.atleast_2d(samples)
    if samples.shape[0] == 0:
        raise ValueError("smoothed loss needs at least one sample")
    with torch.no_grad():
        loss = _loss_tensor(torch.as_tensor(bounds.A, dtype=DTYPE),
                            torch.as_tensor(bounds.b, dtype=DTYPE),
                            torch.as_tensor(samples, dtype=DTYPE),
                            box_volume, Mode(mode), temperature)
    return float(loss)


def objective(bounder: SpecBounder, params: RelaxParams, samples: np.ndarray,
              volume: float, config: ApproxConfig) -> tuple[float, RelaxParams]:
    """Loss value and its gradient with respect to alpha and beta."""
    alpha = [torch.tensor(a, dtype=DTYPE, requires_grad=True) for a in params.alpha]
    beta = torch.tensor(params.beta, dtype=DTYPE, requires_grad=True)
    A, b = bounder.bounds(alpha, beta)
    loss = _loss_tensor(A, b, torch.as_tensor(samples, dtype=DTYPE), volume,
                        config.mode, config.lse_temperature)
    leaves = [t for t in alpha + [beta] if t.numel()]
    grads = torch.autograd.grad(loss, leaves, allow_unused=True) if leaves else []
    grads_iter = iter(grads)
    out = []
    for t in alpha + [beta]:
        g = next(grads_iter) if t.numel() else None
        out.append(np.zeros(tuple(t.shape)) if g is None else g.numpy().copy())
    return loss.item(), RelaxParams(tuple(out[:-1]), out[-1])


def _count_inside(A: np.ndarray, b: np.ndarray, samples: np.ndarray,
                  static_mask: np.ndarray | None) -> int:
    inside = np.all(samples @ A.T + b >= 0, axis=1)
    if static_mask is not None:
        inside &= static_mask
    return int(np.count_nonzero(inside))


def optimize_parameters(net_with_spec: Network, region: Subregion, config: ApproxConfig,
                        initial: RelaxParams, *, samples: np.ndarray, volume: float,
                        bounds: NeuronBounds | None = None,
                        static_mask: np.ndarray | None = None,
                        bounder: SpecBounder | None = None) -> RelaxParams:
    """Projected gradient descent on alpha/beta, keeping the best iterate.

    Iterates are ranked by the hard sample count inside the polytope (larger
    is better for under-approximations, smaller for over), ties broken by the
    smoothed loss.  ``static_mask`` marks samples that satisfy the region's
    fixed constraints.  The initial point always competes, so the result is
    never worse than ``initial`` on ``samples``.
    """
    if bounder is None:
        if bounds is None:
            bounds = concrete_bounds(net_with_spec, region, method=config.bound_method)
        bounder = SpecBounder(net_with_spec, region, bounds, BoundMode.for_mode(config.mode))
    samples = np.atleast_2d(samples)
    if config.opt_steps == 0 or samples.shape[0] == 0:
        return initial.copy()
    if not (config.optimize_alpha or config.optimize_beta):
        return initial.copy()
    under = config.mode is Mode.UNDER
    x = torch.as_tensor(samples, dtype=DTYPE)
    alpha = [torch.tensor(a, dtype=DTYPE, requires_grad=config.optimize_alpha)
             for a in initial.alpha]
    beta = torch.tensor(initial.beta, dtype=DTYPE,
                        requires_grad=config.optimize_beta and initial.beta.size > 0)
    trainable = [t for t in alpha if t.requires_grad and t.numel()]
    if beta.requires_grad:
        trainable.append(beta)
    if not trainable:
        return initial.copy()

    best_key, best = None, initial.copy()
    for step in range(config.opt_steps + 1):
        A, b = bounder.bounds(alpha, beta)
        loss = _loss_tensor(A, b, x, volume, config.mode, config.lse_temperature)
        count = _count_inside(A.detach().numpy(), b.detach().numpy(), samples, static_mask)
        key = (count if under else -count, -loss.item())
        if best_key is None or key > best_key:
            best_key = key
            best = RelaxParams(tuple(a.detach().numpy().copy() for a in alpha),
                               beta.detach().numpy().copy())
        if step == config.opt_steps:
            break
        grads = torch.autograd.grad(loss, trainable, allow_unused=True)
        with torch.no_grad():
            for t, g in zip(trainable, grads):
                if g is None:
                    continue
                t -= config.learning_rate * g
                if t is beta:
                    t.clamp_(min=0.0)
                else:
                    t.clamp_(0.0, 1.0)
    return best


@dataclass
class RegionApprox:
    """Everything produced while approximating one subregion."""

    region: Subregion
    polytope: Polytope
    params: RelaxParams
    bounds: NeuronBounds
    spec_bounds: LinearSpecBounds


def approximate_region(net_with_spec: Network, region: Subregion, config: ApproxConfig,
                       samples: np.ndarray, volume: float,
                       initial: RelaxParams | None = None,
                       slopes: dict | None = None,
                       static_mask: np.ndarray | None = None) -> RegionApprox:
    """Bound, optimise and emit the polytope of one subregion.

    ``initial`` seeds the optimiser (children inherit their parent's
    parameters); ``slopes`` fixes intermediate relaxation slopes.
    """
    bounds = concrete_bounds(net_with_spec, region, slopes, method=config.bound_method)
    bounder = SpecBounder(net_with_spec, region, bounds, BoundMode.for_mode(config.mode))
    if initial is None:
        initial = init_params(net_with_spec, region, bounds)
    if not config.optimize_beta:
        initial = RelaxParams(initial.alpha, np.zeros_like(initial.beta))
    params = optimize_parameters(net_with_spec, region, config, initial, samples=samples,
                                 volume=volume, static_mask=static_mask, bounder=bounder)
    spec_bounds = bounder.evaluate(params)
    polytope = Polytope(region.box, spec_bounds.halfspaces() + region.halfspaces)
    return RegionApprox(region, polytope, params, bounds, spec_bounds)


def region_samples(net: Network, region: Subregion, n: int, rng: np.random.Generator,
                   max_rounds: int = 20) -> tuple[np.ndarray, float]:
    """Uniform samples of the region's true set and its estimated volume.

    Points are drawn from the box and rejected unless every split sign holds.
    """
    if not region.splits:
        return sample_box(region.box, n, rng), region.box.volume
    kept, drawn = [], 0
    have = 0
    for _ in range(max_rounds):
        x = sample_box(region.box, n, rng)
        drawn += n
        x = x[region.true_region_mask(net, x)]
        kept.append(x)
        have += x.shape[0]
        if have >= n:
            break
    pts = np.concatenate(kept)[:n]
    return pts, region.box.volume * have / drawn


def gen_approx(subregions: Sequence[Subregion], spec: OutputSpec, net: Network,
               config: ApproxConfig, seed: int = 0, threads: int = 1) -> list[Polytope]:
    """One polytope per subregion, in input order."""
    composed = compose_spec(net, spec)
    for r in subregions:
        if r.box.dim != net.input_dim:
            raise ValueError(f"subregion {r.id} has dimension {r.box.dim}, "
                             f"network expects {net.input_dim}")

    def work(region: Subregion) -> Polytope:
        pts, vol = region_samples(net, region, config.n_samples,
                                  derive_rng(seed, "approx", region.id))
        mask = np.ones(pts.shape[0], dtype=bool)
        for h in region.halfspaces:
            mask &= h.contains(pts)
        return approximate_region(composed, region, config, pts, vol,
                                  static_mask=mask).polytope

    if threads > 1 and len(subregions) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, subregions))
    return [work(r) for r in subregions]

