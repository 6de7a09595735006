"""Markov attention models: max-product inference with higher-order attention factors."""

from .bp import BpConfig, ShapeMismatchError, beliefs, decode, map_score, run_mpbp
from .factors import MamHofSpec, OrFactorSpec, Table, Unary
from .graph import FactorGraph, GraphBuilder, VariableKind
from .hof import mam_hof_messages
from .oracle import BudgetExceeded, brute_force_map, exact_max_product_messages
from .orfactor import or_factor_messages

__version__ = "0.1.0"

__all__ = [
    "BpConfig",
    "BudgetExceeded",
    "FactorGraph",
    "GraphBuilder",
    "MamHofSpec",
    "OrFactorSpec",
    "ShapeMismatchError",
    "Table",
    "Unary",
    "VariableKind",
    "beliefs",
    "brute_force_map",
    "decode",
    "exact_max_product_messages",
    "map_score",
    "mam_hof_messages",
    "or_factor_messages",
    "run_mpbp",
]
