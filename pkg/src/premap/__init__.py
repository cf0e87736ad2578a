"""Under- and over-approximation of neural network preimages."""

from .geometry import Box, HalfSpace, Mode, Polytope, PolytopeUnion
from .model import AffineLayer, Network, OutputSpec, load_network, save_network
from .approx import ApproxConfig, gen_approx
from .refine import RefineConfig, RefineResult, RunStats, SplitStrategy, Status, refine_preimage
from .quant import QuantProperty, Verdict, VerdictKind, verify
from .oracle import ExactPreimage, OracleCapError, exact_preimage

__all__ = [
    "AffineLayer", "ApproxConfig", "Box", "ExactPreimage", "HalfSpace", "Mode", "Network",
    "OracleCapError", "OutputSpec", "Polytope", "PolytopeUnion", "QuantProperty",
    "RefineConfig", "RefineResult", "RunStats", "SplitStrategy", "Status", "Verdict",
    "VerdictKind", "exact_preimage", "gen_approx", "load_network", "refine_preimage",
    "save_network", "verify",
]
