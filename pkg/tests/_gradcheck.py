"""Central finite-difference check of the approximation loss gradient."""

from __future__ import annotations

import numpy as np

from premap.approx import objective
from premap.relax import RelaxParams

# gradients below this magnitude are compared absolutely; see the decisions ledger
GRAD_FLOOR = 1e-5


def _with_entry(params: RelaxParams, block: int, index, value: float) -> RelaxParams:
    p = params.copy()
    target = p.beta if block == len(p.alpha) else p.alpha[block]
    target[index] = value
    return p


def max_relative_error(bounder, params, samples, volume, config, h=1e-5):
    """Largest |analytic - FD| / max(|analytic|, |FD|, floor) over alpha and beta."""
    _, grad = objective(bounder, params, samples, volume, config)
    blocks = list(params.alpha) + [params.beta]
    grads = list(grad.alpha) + [grad.beta]
    worst, checked = 0.0, 0
    for k, (block, g) in enumerate(zip(blocks, grads)):
        for index in np.ndindex(block.shape):
            v = block[index]
            plus, _ = objective(bounder, _with_entry(params, k, index, v + h), samples,
                                volume, config)
            minus, _ = objective(bounder, _with_entry(params, k, index, v - h), samples,
                                 volume, config)
            fd = (plus - minus) / (2 * h)
            err = abs(g[index] - fd) / max(abs(g[index]), abs(fd), GRAD_FLOOR)
            worst = max(worst, err)
            checked += 1
    return worst, checked
