"""``premap`` command line: approx, verify and oracle subcommands.

Exit codes
    approx: 0 target met, 2 budget exhausted or every ReLU split, 3 empty preimage
    verify: 0 True, 4 False, 5 Unknown
    oracle: 0 done, 6 neuron cap exceeded
    any:    1 usage or I/O error
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .approx import ApproxConfig
from .geometry import Box, HalfSpace, Mode, derive_rng, sample_box
from .model import Network, NetworkFormatError, OutputSpec, load_network
from .quant import DegenerateInputError, QuantProperty, VerdictKind, problem_from_dict, verify
from .refine import RefineConfig, SplitStrategy, Status, refine_preimage

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BUDGET = 2
EXIT_EMPTY = 3
EXIT_FALSE = 4
EXIT_UNKNOWN = 5
EXIT_CAP = 6

APPROX_EXIT = {Status.TARGET_MET: EXIT_OK, Status.BUDGET_EXHAUSTED: EXIT_BUDGET,
               Status.ALL_RELU_SPLIT: EXIT_BUDGET, Status.EMPTY_PREIMAGE: EXIT_EMPTY}
VERIFY_EXIT = {VerdictKind.TRUE: EXIT_OK, VerdictKind.FALSE: EXIT_FALSE,
               VerdictKind.UNKNOWN: EXIT_UNKNOWN}

log = logging.getLogger("premap")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_json(path: str | Path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def _threads(value: int | None) -> int:
    if value is None:
        env = os.environ.get("PREMAP_THREADS")
        if not env:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"PREMAP_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise UsageError("thread count must be at least 1")
    return value


def _load_problem(path: str) -> tuple[Box, tuple[HalfSpace, ...], OutputSpec]:
    try:
        return problem_from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed problem file ({exc})") from exc


def _check_dims(net: Network, box: Box, spec: OutputSpec) -> None:
    if box.dim != net.input_dim:
        raise ValueError(f"input box has dimension {box.dim}, network expects {net.input_dim}")
    if spec.output_dim != net.output_dim:
        raise ValueError(f"output constraints have length {spec.output_dim}, "
                         f"network has {net.output_dim} outputs")


def _preimage_points(net: Network, box: Box, halfspaces, spec: OutputSpec, seed: int,
                     count: int = 2000) -> np.ndarray:
    x = sample_box(box, 20 * count, derive_rng(seed, "plot"))
    keep = spec.satisfied(net.forward(x))
    for h in halfspaces:
        keep &= h.contains(x)
    return x[keep][:count]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="network JSON file")
    p.add_argument("--samples", type=int, default=10000, help="samples per subregion (N)")
    p.add_argument("--opt-steps", type=int, default=20, help="gradient steps per subregion")
    p.add_argument("--max-iters", type=int, default=100, help="refinement budget (R)")
    p.add_argument("--split", choices=["input", "relu"], default="input")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: PREMAP_THREADS or 1)")
    p.add_argument("--out", required=True, help="result JSON path")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="premap",
                     description="Preimage under/over-approximation for ReLU networks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("approx", help="under/over-approximate a preimage")
    _add_common(a)
    a.add_argument("--problem", required=True, help="problem JSON (box, half-spaces, O)")
    a.add_argument("--mode", choices=["under", "over"], default="under")
    a.add_argument("--target-coverage", type=float, default=None,
                   help="stop once coverage reaches this (default 0.9 under, 1.1 over)")
    a.add_argument("--stats", default=None, help="run statistics JSON (default OUT.stats.json)")
    a.add_argument("--svg", default=None, help="plot of the union (2-D inputs only)")

    v = sub.add_parser("verify", help="quantitative verification of (I, O, p)")
    _add_common(v)
    v.add_argument("--property", required=True, help="property JSON")

    o = sub.add_parser("oracle", help="exact preimage by pattern enumeration")
    o.add_argument("--model", required=True)
    o.add_argument("--problem", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--svg", default=None)
    o.add_argument("-v", "--verbose", action="store_true")
    return parser


def _refine_config(args, mode: Mode, target: float) -> RefineConfig:
    approx = ApproxConfig(n_samples=args.samples, mode=mode, opt_steps=args.opt_steps)
    return RefineConfig(target_coverage=target, max_iterations=args.max_iters,
                        split_strategy=SplitStrategy(args.split), approx=approx,
                        seed=args.seed, threads=_threads(args.threads))


def cmd_approx(args) -> int:
    net = load_network(args.model)
    box, halfspaces, spec = _load_problem(args.problem)
    _check_dims(net, box, spec)
    mode = Mode(args.mode)
    target = args.target_coverage
    if target is None:
        target = 0.9 if mode is Mode.UNDER else 1.1
    config = _refine_config(args, mode, target)
    result = refine_preimage(net, spec, box, config, halfspaces)
    _write_json(args.out, result.union.to_dict())
    _write_json(args.stats or f"{args.out}.stats.json", result.stats.to_dict())
    if args.svg:
        if box.dim != 2:
            raise ValueError("--svg needs a 2-D input box")
        from .plotting import plot_union_svg
        plot_union_svg(result.union, box, args.svg,
                       _preimage_points(net, box, halfspaces, spec, args.seed))
    stats = result.stats
    log.info("status %s after %d iterations, coverage %.4f, %d polytopes",
             stats.status.value, stats.iterations,
             stats.coverage_trace[-1] if stats.coverage_trace else float("nan"),
             stats.num_polytopes)
    return APPROX_EXIT[stats.status]


def cmd_verify(args) -> int:
    net = load_network(args.model)
    try:
        prop = QuantProperty.load(args.property)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{args.property}: malformed property file ({exc})") from exc
    _check_dims(net, prop.input_box, prop.output_spec)
    config = _refine_config(args, Mode.UNDER, 1.0)
    verdict = verify(net, prop, config)
    _write_json(args.out, verdict.to_dict())
    log.info("verdict %s, proportion %.4f (+- %.4f) vs p = %.4f", verdict.result.value,
             verdict.achieved_proportion, verdict.std_error, verdict.threshold)
    return VERIFY_EXIT[verdict.result]


def cmd_oracle(args) -> int:
    from .oracle import OracleCapError, exact_preimage
    net = load_network(args.model)
    box, halfspaces, spec = _load_problem(args.problem)
    _check_dims(net, box, spec)
    try:
        exact = exact_preimage(net, box, spec, input_halfspaces=halfspaces)
    except OracleCapError as exc:
        print(f"premap oracle: {exc}", file=sys.stderr)
        return EXIT_CAP
    _write_json(args.out, exact.to_dict())
    if args.svg:
        if box.dim != 2:
            raise ValueError("--svg needs a 2-D input box")
        from .plotting import plot_union_svg
        plot_union_svg(exact.union, box, args.svg, title="exact preimage")
    return EXIT_OK


COMMANDS = {"approx": cmd_approx, "verify": cmd_verify, "oracle": cmd_oracle}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"premap: {exc}", file=sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, OSError, ValueError, NetworkFormatError, DegenerateInputError,
            json.JSONDecodeError) as exc:
        print(f"premap {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
