"""Quantitative verification of ``(I, O, p)``: does at least a fraction ``p``
of the input set map into ``O``?

The under-approximating refinement loop runs until the covered fraction of
``I`` (estimated on the fixed root sample set) reaches ``p``.
"""

from __future__ import annotations

import enum
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import Box, HalfSpace, Mode
from .model import Network, OutputSpec
from .refine import RefineConfig, Refiner, RunStats, SplitStrategy, Status


class DegenerateInputError(ValueError):
    """No verification sample satisfies the input half-spaces."""


class VerdictKind(str, enum.Enum):
    TRUE = "True"
    FALSE = "False"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class QuantProperty:
    input_box: Box
    input_halfspaces: tuple[HalfSpace, ...]
    output_spec: OutputSpec
    threshold: float

    def __post_init__(self):
        object.__setattr__(self, "input_halfspaces", tuple(self.input_halfspaces))
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold p must lie in [0, 1]")
        for h in self.input_halfspaces:
            if h.a.shape[0] != self.input_box.dim:
                raise ValueError("input half-space dimension does not match the box")

    @classmethod
    def from_dict(cls, data: dict) -> "QuantProperty":
        box, halfspaces, spec = problem_from_dict(data)
        return cls(box, halfspaces, spec, float(data["p"]))

    @classmethod
    def load(cls, path: str | Path) -> "QuantProperty":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"input_box": self.input_box.to_dict(),
                "input_halfspaces": [h.to_dict() for h in self.input_halfspaces],
                "output_constraints": [{"c": c.tolist(), "d": float(d)}
                                       for c, d in zip(self.output_spec.c, self.output_spec.d)],
                "p": self.threshold}


def problem_from_dict(data: dict) -> tuple[Box, tuple[HalfSpace, ...], OutputSpec]:
    """Box, input half-spaces and output spec shared by problem and property files."""
    box = Box.from_dict(data["input_box"])
    halfspaces = tuple(HalfSpace.from_dict(h) for h in data.get("input_halfspaces", []))
    cons = data["output_constraints"]
    spec = OutputSpec.from_constraints([(c["c"], c["d"]) for c in cons])
    return box, halfspaces, spec


@dataclass
class Verdict:
    result: VerdictKind
    achieved_proportion: float
    threshold: float
    std_error: float
    stats: RunStats
    residual_gap: float | None = None

    def to_dict(self) -> dict:
        return {"verdict": self.result.value,
                "achieved_proportion": self.achieved_proportion,
                "threshold": self.threshold,
                "std_error": self.std_error,
                "residual_gap": self.residual_gap,
                "stats": self.stats.to_dict()}


def verify(net: Network, prop: QuantProperty, config: RefineConfig) -> Verdict:
    """Sound check of ``vol(preimage within I) >= p * vol(I)``.

    ``False`` is only reported with ReLU splitting once every leaf is
    decided and the sampled preimage fraction is below ``p`` too; the
    remaining gap to ``p`` is attached.  Exhausting the iteration budget
    gives ``Unknown``.
    """
    start = time.perf_counter()
    config = replace(config, target_coverage=1.0,
                     approx=replace(config.approx, mode=Mode.UNDER))
    ref = Refiner(net, prop.output_spec, prop.input_box, config, prop.input_halfspaces)
    try:
        n_input = int(np.count_nonzero(ref.cov_in_input))
        if n_input == 0:
            raise DegenerateInputError("no sample of the input box satisfies the input half-spaces")
        p = prop.threshold

        def proportion() -> float:
            return ref.covered_count() / n_input

        trace = [proportion()]
        gap = None
        while True:
            if trace[-1] >= p:
                kind, status = VerdictKind.TRUE, Status.TARGET_MET
                break
            if ref.iterations >= config.max_iterations:
                kind, status = VerdictKind.UNKNOWN, Status.BUDGET_EXHAUSTED
                break
            if not ref.step():
                # planes of deeper neurons may drop a slab of the preimage, so
                # the exhausted union is only trusted when sampling agrees
                relu = config.split_strategy is SplitStrategy.RELU
                status = Status.ALL_RELU_SPLIT if relu else Status.BUDGET_EXHAUSTED
                if relu and np.count_nonzero(ref.cov_pre) / n_input < p:
                    kind, gap = VerdictKind.FALSE, p - trace[-1]
                else:
                    kind = VerdictKind.UNKNOWN
                break
            trace.append(proportion())
    finally:
        ref.close()
    achieved = trace[-1]
    std_error = math.sqrt(max(achieved * (1.0 - achieved), 0.0) / n_input)
    stats = RunStats(ref.iterations, trace, len(ref.leaves),
                     int(round((time.perf_counter() - start) * 1000)), status)
    return Verdict(kind, achieved, p, std_error, stats, gap)
