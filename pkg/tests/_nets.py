"""Seeded fixture networks shared by the test modules."""

from __future__ import annotations

import numpy as np

from premap.geometry import Box, sample_box
from premap.model import AffineLayer, Network, OutputSpec


def random_net(widths, seed, bias_scale=0.3, feature_scale=None) -> Network:
    """He-initialised ReLU net; ``feature_scale`` multiplies first-layer columns."""
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(len(widths) - 1):
        w = rng.normal(0.0, np.sqrt(2.0 / widths[k]), (widths[k + 1], widths[k]))
        if k == 0 and feature_scale is not None:
            w = w * np.asarray(feature_scale)[None, :]
        b = rng.normal(0.0, bias_scale, widths[k + 1])
        layers.append(AffineLayer(w, b, relu=k < len(widths) - 2))
    return Network(layers)


def unit_box(d: int) -> Box:
    return Box(-np.ones(d), np.ones(d))


def balanced_spec(net: Network, box: Box, target: float = 0.35, seed: int = 0) -> OutputSpec:
    """Argmax spec for the class whose preimage fraction is closest to ``target``.

    Classes holding under 5% of the box are skipped unless none is larger.
    """
    x = sample_box(box, 20000, seed)
    counts = np.bincount(np.argmax(net.forward(x), axis=1), minlength=net.output_dim)
    frac = counts / x.shape[0]
    dist = np.where(frac >= 0.05, np.abs(frac - target), np.inf)
    label = int(np.argmin(dist)) if np.isfinite(dist).any() else int(np.argmax(frac))
    return OutputSpec.argmax(label, net.output_dim)


# (widths, seed) of the soundness fixtures: 2-8 inputs, 1-3 hidden layers, <= 64 wide
SOUNDNESS_NETS = [
    ([2, 16, 3], 0), ([2, 32, 4], 1), ([2, 20, 20, 3], 2), ([2, 12, 12, 12, 2], 3),
    ([3, 24, 3], 4), ([3, 16, 16, 4], 5), ([3, 64, 3], 6), ([4, 20, 3], 7),
    ([4, 16, 16, 3], 8), ([4, 10, 10, 10, 2], 9), ([5, 32, 4], 10), ([5, 16, 16, 3], 11),
    ([6, 24, 3], 12), ([6, 12, 12, 12, 3], 13), ([7, 32, 2], 14), ([7, 16, 16, 4], 15),
    ([8, 20, 3], 16), ([8, 32, 16, 3], 17), ([8, 8, 8, 8, 2], 21), ([2, 64, 64, 4], 19),
]


def soundness_fixture(i: int):
    widths, seed = SOUNDNESS_NETS[i]
    net = random_net(widths, seed)
    box = unit_box(widths[0])
    return net, box, balanced_spec(net, box)
