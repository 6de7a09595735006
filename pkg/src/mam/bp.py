"""Damped log-domain max-product belief propagation.

Messages are scalars ``M_on - M_off`` stored per directed edge. Each
iteration is a flood (synchronous) update: all factor-to-variable messages
are recomputed from the previous variable-to-factor messages, damped, and
then every variable-to-factor message is refreshed. The result does not
depend on evaluation order, so it is bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .factors import MSG_CAP, NEG_INF, MamHofSpec, OrFactorSpec, Table, Unary
from .factors import normalize_messages
from .graph import FactorGraph
from .hof import HofBatch
from .orfactor import OrBatch


class ShapeMismatchError(ValueError):
    """Evidence, assignment or messages do not fit the graph."""


@dataclass(frozen=True)
class BpConfig:
    max_iters: int = 200
    damping: float = 0.5
    convergence_tol: float = 1e-6

    def __post_init__(self):
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValueError("max_iters must be a positive integer")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if not self.convergence_tol >= 0.0:
            raise ValueError("convergence_tol must be non-negative")


@dataclass(frozen=True)
class Diagnostics:
    iters_run: int
    final_delta: float
    converged: bool


@dataclass
class MessageState:
    """Messages on every (factor, variable) edge, in ``graph.edges()`` order."""

    edge_factor: np.ndarray
    edge_var: np.ndarray
    var_to_factor: np.ndarray
    factor_to_var: np.ndarray

    @classmethod
    def zeros(cls, graph: FactorGraph) -> "MessageState":
        plan = compile_graph(graph)
        n = len(plan.edge_var)
        return cls(plan.edge_factor, plan.edge_var, np.zeros(n), np.zeros(n))

    def __len__(self):
        return len(self.edge_var)

    def incoming(self, factor: int) -> dict[int, float]:
        """Variable-to-factor messages arriving at ``factor``."""
        idx = np.flatnonzero(self.edge_factor == factor)
        return {int(self.edge_var[e]): float(self.var_to_factor[e]) for e in idx}

    def outgoing(self, factor: int) -> dict[int, float]:
        idx = np.flatnonzero(self.edge_factor == factor)
        return {int(self.edge_var[e]): float(self.factor_to_var[e]) for e in idx}


class _TableBatch:
    """Enumeration updates for all tables of one arity."""

    def __init__(self, specs, offsets):
        k = len(specs[0].vars)
        self.k = k
        self.pots = np.asarray([s.log_pots for s in specs], dtype=float)
        self.edges = np.asarray(offsets, dtype=np.int64)[:, None] + np.arange(k)
        states = np.arange(2 ** k)
        self.bits = ((states[:, None] >> np.arange(k - 1, -1, -1)) & 1).astype(float)

    def __call__(self, v2f, out):
        m = v2f[self.edges]
        scores = self.pots + m @ self.bits.T
        for j in range(self.k):
            on_mask = self.bits[:, j] == 1
            on = scores[:, on_mask].max(axis=1) - m[:, j]
            off = scores[:, ~on_mask].max(axis=1)
            out[self.edges[:, j]] = normalize_messages(on, off)

    def potentials(self, xe):
        weights = 1 << np.arange(self.k - 1, -1, -1)
        return self.pots[np.arange(len(self.pots)), xe[self.edges] @ weights]


class _UnaryBatch:
    def __init__(self, specs, offsets):
        self.edges = np.asarray(offsets, dtype=np.int64)
        self.values = np.clip([s.log_odds for s in specs], -MSG_CAP, MSG_CAP)
        self.table = np.asarray([s.log_pot for s in specs], dtype=float)

    def __call__(self, v2f, out):
        out[self.edges] = self.values

    def potentials(self, xe):
        return self.table[np.arange(len(self.table)), xe[self.edges]]


class CompiledGraph:
    """Edge arrays and per-kind batched kernels for one graph."""

    def __init__(self, graph: FactorGraph, verbatim_self_term: bool = False, verbatim_singleton: bool = False):
        self.n_variables = graph.n_variables
        edge_factor, edge_var, offsets = [], [], []
        for f, fac in enumerate(graph.factors):
            offsets.append(len(edge_var))
            for v in fac.scope:
                edge_factor.append(f)
                edge_var.append(v)
        self.edge_factor = np.asarray(edge_factor, dtype=np.int64)
        self.edge_var = np.asarray(edge_var, dtype=np.int64)

        by_kind: dict[object, tuple[list, list, list]] = {}
        for f, (fac, off) in enumerate(zip(graph.factors, offsets)):
            key = ("table", len(fac.vars)) if isinstance(fac, Table) else type(fac)
            specs, offs, ids = by_kind.setdefault(key, ([], [], []))
            specs.append(fac)
            offs.append(off)
            ids.append(f)
        self.n_factors = len(graph.factors)
        self.kernels = []
        self.kernel_factors = []
        for key, (specs, offs, ids) in by_kind.items():
            self.kernel_factors.append(np.asarray(ids, dtype=np.int64))
            if key is Unary:
                self.kernels.append(_UnaryBatch(specs, offs))
            elif key is MamHofSpec:
                self.kernels.append(HofBatch(specs, offs, verbatim_self_term, verbatim_singleton))
            elif key is OrFactorSpec:
                self.kernels.append(OrBatch(specs, offs))
            else:
                self.kernels.append(_TableBatch(specs, offs))

    def factor_potentials(self, x: np.ndarray) -> np.ndarray:
        """Log-potential of every factor (graph order) under assignment ``x``."""
        xe = x[self.edge_var].astype(np.int64)
        out = np.empty(self.n_factors)
        for kernel, ids in zip(self.kernels, self.kernel_factors):
            out[ids] = kernel.potentials(xe)
        return out

    def factor_messages(self, v2f: np.ndarray) -> np.ndarray:
        out = np.zeros_like(v2f)
        for kernel in self.kernels:
            kernel(v2f, out)
        return out

    def beliefs(self, f2v: np.ndarray, evidence: np.ndarray) -> np.ndarray:
        return evidence + np.bincount(self.edge_var, weights=f2v, minlength=self.n_variables)


def compile_graph(graph: FactorGraph, verbatim_self_term: bool = False,
                  verbatim_singleton: bool = False) -> CompiledGraph:
    key = (verbatim_self_term, verbatim_singleton)
    cache = graph.__dict__.setdefault("_compiled", {})
    if key not in cache:
        cache[key] = CompiledGraph(graph, verbatim_self_term, verbatim_singleton)
    return cache[key]


def as_evidence(graph: FactorGraph, evidence) -> np.ndarray:
    """Per-variable log-odds array from ``None``, a mapping or an array."""
    n = graph.n_variables
    if evidence is None:
        return np.zeros(n)
    if isinstance(evidence, Mapping):
        out = np.zeros(n)
        for k, v in evidence.items():
            k = int(k)
            if not 0 <= k < n:
                raise ShapeMismatchError(f"evidence for unknown variable {k}")
            out[k] = float(v)
        return out
    arr = np.asarray(evidence, dtype=float)
    if arr.shape != (n,):
        raise ShapeMismatchError(f"evidence has shape {arr.shape}, graph has {n} variables")
    return arr.copy()


def run_mpbp(
    graph: FactorGraph,
    evidence=None,
    config: BpConfig | None = None,
    *,
    init: np.ndarray | None = None,
    verbatim_self_term: bool = False,
    verbatim_singleton: bool = False,
) -> tuple[MessageState, Diagnostics]:
    """Run flood-schedule max-product BP.

    Args:
        graph: the factor graph.
        evidence: per-variable log-odds (array, mapping, or ``None``).
        config: iteration limit, damping and tolerance.
        init: initial factor-to-variable messages, one per edge (zeros when
            omitted).

    Returns:
        The final messages and diagnostics. Running out of iterations is
        reported through ``Diagnostics.converged``, never raised.
    """
    config = config or BpConfig()
    plan = compile_graph(graph, verbatim_self_term, verbatim_singleton)
    ev = np.clip(as_evidence(graph, evidence), -MSG_CAP, MSG_CAP)
    n_edges = len(plan.edge_var)
    if init is None:
        f2v = np.zeros(n_edges)
    else:
        f2v = np.asarray(init, dtype=float).copy()
        if f2v.shape != (n_edges,):
            raise ShapeMismatchError(f"init has shape {f2v.shape}, graph has {n_edges} edges")

    d = config.damping
    delta = 0.0
    converged = False
    iters = config.max_iters
    for it in range(config.max_iters):
        belief = plan.beliefs(f2v, ev)
        v2f = np.clip(belief[plan.edge_var] - f2v, -MSG_CAP, MSG_CAP)
        new = plan.factor_messages(v2f)
        if d:
            new = d * f2v + (1.0 - d) * new
        delta = float(np.max(np.abs(new - f2v))) if n_edges else 0.0
        f2v = new
        if delta <= config.convergence_tol:
            converged = True
            iters = it
            break

    belief = plan.beliefs(f2v, ev)
    v2f = np.clip(belief[plan.edge_var] - f2v, -MSG_CAP, MSG_CAP)
    state = MessageState(plan.edge_factor, plan.edge_var, v2f, f2v)
    return state, Diagnostics(iters, delta, converged)


def beliefs(graph: FactorGraph, messages: MessageState, evidence=None) -> np.ndarray:
    plan = compile_graph(graph)
    if len(messages) != len(plan.edge_var):
        raise ShapeMismatchError("messages do not belong to this graph")
    return plan.beliefs(messages.factor_to_var, as_evidence(graph, evidence))


def decode(graph: FactorGraph, messages: MessageState, evidence=None) -> np.ndarray:
    """ON (1) where the max-marginal belief is strictly positive, else OFF (0)."""
    return (beliefs(graph, messages, evidence) > 0).astype(np.int8)


def _as_assignment(graph: FactorGraph, assignment) -> np.ndarray:
    if isinstance(assignment, Mapping):
        arr = np.zeros(graph.n_variables, dtype=np.int8)
        for k, v in assignment.items():
            arr[int(k)] = int(v)
        return arr
    arr = np.asarray(assignment).astype(np.int8)
    if arr.shape != (graph.n_variables,):
        raise ShapeMismatchError(f"assignment has shape {arr.shape}, graph has {graph.n_variables} variables")
    return arr


def map_score(graph: FactorGraph, assignment, evidence=None) -> float:
    """Summed log-potentials plus evidence of the ON variables.

    The sum is exactly rounded (``math.fsum``), so it does not depend on
    term order; any forbidden factor configuration yields ``NEG_INF``.
    """
    x = _as_assignment(graph, assignment)
    if not np.isin(x, (0, 1)).all():
        raise ValueError("assignment entries must be 0 or 1")
    ev = as_evidence(graph, evidence)
    terms = compile_graph(graph).factor_potentials(x) if graph.n_factors else np.zeros(0)
    on_ev = ev[x == 1]
    if (terms == NEG_INF).any() or (on_ev == NEG_INF).any():
        return NEG_INF
    return math.fsum(np.concatenate([terms, on_ev]).tolist())
