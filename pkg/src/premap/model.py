"""Feed-forward ReLU networks: loading, exact evaluation, spec composition."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class NetworkFormatError(ValueError):
    """Raised when a network file or layer list violates the format."""


@dataclass(frozen=True, eq=False)
class AffineLayer:
    weights: np.ndarray
    bias: np.ndarray
    relu: bool = False

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2:
            raise NetworkFormatError("weights must be a 2-D matrix")
        if w.shape[0] != b.shape[0]:
            raise NetworkFormatError(
                f"weights have {w.shape[0]} rows but bias has length {b.shape[0]}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NetworkFormatError("non-finite entry")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class OutputSpec:
    """Conjunction of output half-spaces ``c . y + d >= 0``."""

    c: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.array(self.c, dtype=np.float64))
        d = np.array(self.d, dtype=np.float64).reshape(-1)
        if c.shape[0] == 0:
            raise ValueError("output spec needs at least one constraint")
        if c.shape[0] != d.shape[0]:
            raise ValueError("output spec: c and d disagree on constraint count")
        c.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "d", d)

    @classmethod
    def from_constraints(cls, constraints: Sequence[tuple[Sequence[float], float]]):
        return cls(np.array([c for c, _ in constraints], dtype=np.float64),
                   np.array([d for _, d in constraints], dtype=np.float64))

    @classmethod
    def argmax(cls, label: int, n_outputs: int) -> "OutputSpec":
        """``y_label >= y_i`` for every other output ``i``."""
        rows = []
        for i in range(n_outputs):
            if i == label:
                continue
            row = np.zeros(n_outputs)
            row[label], row[i] = 1.0, -1.0
            rows.append(row)
        return cls(np.array(rows), np.zeros(len(rows)))

    @property
    def num_constraints(self) -> int:
        return self.c.shape[0]

    @property
    def output_dim(self) -> int:
        return self.c.shape[1]

    def satisfied(self, y: np.ndarray) -> np.ndarray:
        """Row-wise membership of outputs ``y`` (shape ``(n, m)``) in the set."""
        return np.all(np.atleast_2d(y) @ self.c.T + self.d >= 0, axis=1)


class Network:
    """Sequential affine layers; every layer but the last may carry a ReLU.

    Immutable after construction.
    """

    def __init__(self, layers: Sequence[AffineLayer], input_dim: int | None = None):
        layers = tuple(layers)
        if not layers:
            raise NetworkFormatError("network needs at least one layer")
        if input_dim is None:
            input_dim = layers[0].in_dim
        if input_dim < 1:
            raise NetworkFormatError("input_dim must be positive")
        if layers[0].in_dim != input_dim:
            raise NetworkFormatError(
                f"layer 0 expects {layers[0].in_dim} inputs but input_dim is {input_dim}")
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                raise NetworkFormatError(
                    f"layer {k - 1} outputs {layers[k - 1].out_dim} values but "
                    f"layer {k} expects {layers[k].in_dim}")
        if layers[-1].relu:
            raise NetworkFormatError("final layer must not have an activation")
        self._layers = layers
        self._input_dim = int(input_dim)

    @property
    def layers(self) -> tuple[AffineLayer, ...]:
        return self._layers

    @property
    def input_dim(self) -> int:
        return self._input_dim

    @property
    def output_dim(self) -> int:
        return self._layers[-1].out_dim

    @property
    def relu_layers(self) -> tuple[int, ...]:
        """Indices of layers whose pre-activations feed a ReLU."""
        return tuple(i for i, layer in enumerate(self._layers) if layer.relu)

    @property
    def num_hidden_neurons(self) -> int:
        return sum(self._layers[i].out_dim for i in self.relu_layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the network on one point ``(d,)`` or a batch ``(n, d)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self._input_dim:
            raise ValueError(
                f"input has length {x.shape[-1]}, network expects {self._input_dim}")
        h = x
        for layer in self._layers:
            h = h @ layer.weights.T + layer.bias
            if layer.relu:
                h = np.maximum(h, 0.0)
        return h

    def pre_activations(self, x: np.ndarray) -> dict[int, np.ndarray]:
        """Pre-activation values of every ReLU layer for a batch ``(n, d)``."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = {}
        for i, layer in enumerate(self._layers):
            h = h @ layer.weights.T + layer.bias
            if layer.relu:
                out[i] = h
                h = np.maximum(h, 0.0)
        return out

    def __repr__(self):
        widths = [self._input_dim] + [layer.out_dim for layer in self._layers]
        return f"Network({'x'.join(map(str, widths))})"


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def compose_spec(net: Network, spec: OutputSpec) -> Network:
    """Append ``y -> C y + d`` so output ``i`` of the result is ``g_i``."""
    if spec.output_dim != net.output_dim:
        raise ValueError(
            f"spec constraints have length {spec.output_dim}, "
            f"network has {net.output_dim} outputs")
    return Network(net.layers + (AffineLayer(spec.c, spec.d, relu=False),),
                   net.input_dim)


def network_from_dict(data: dict) -> Network:
    if not isinstance(data, dict) or "layers" not in data:
        raise NetworkFormatError("network JSON needs a 'layers' list")
    raw_layers = data["layers"]
    if not isinstance(raw_layers, list) or not raw_layers:
        raise NetworkFormatError("'layers' must be a non-empty list")
    layers = []
    for k, raw in enumerate(raw_layers):
        kind = raw.get("type", "dense")
        if kind != "dense":
            raise NetworkFormatError(f"layer {k}: unsupported layer type {kind!r}")
        act = raw.get("activation", "none")
        if act not in ("relu", "none"):
            raise NetworkFormatError(f"layer {k}: unsupported activation {act!r}")
        last = k == len(raw_layers) - 1
        if last and act != "none":
            raise NetworkFormatError(f"layer {k}: final layer must declare 'none'")
        if not last and act != "relu":
            raise NetworkFormatError(f"layer {k}: hidden layers must declare 'relu'")
        try:
            w = np.array(raw["weights"], dtype=np.float64)
            b = np.array(raw["bias"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkFormatError(f"layer {k}: {exc}") from exc
        try:
            layers.append(AffineLayer(w, b, relu=act == "relu"))
        except NetworkFormatError as exc:
            raise NetworkFormatError(f"layer {k}: {exc}") from exc
    input_dim = data.get("input_dim", layers[0].in_dim)
    return Network(layers, int(input_dim))


def network_to_dict(net: Network) -> dict:
    return {
        "input_dim": net.input_dim,
        "layers": [
            {"weights": layer.weights.tolist(), "bias": layer.bias.tolist(),
             "activation": "relu" if layer.relu else "none"}
            for layer in net.layers
        ],
    }


def load_network(path: str | Path) -> Network:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: {exc}") from exc
    return network_from_dict(data)


def save_network(net: Network, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net)))
