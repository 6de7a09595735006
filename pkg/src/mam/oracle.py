"""Brute-force reference computations.

Everything here enumerates joint states directly; nothing is clever, so the
results can be trusted as ground truth for the message-passing code.

Joint enumeration walks the variables one at a time and drops partial
states as soon as a fully assigned factor forbids them. On a dense model
that is plain ``2 ** n`` enumeration; on heavily constrained models (MAMs)
it visits far fewer rows. The budget bounds the number of live rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .bp import as_evidence, map_score
from .factors import NEG_INF, FactorSpec, log_potential_batch, normalize_message
from .graph import FactorGraph


class BudgetExceeded(RuntimeError):
    """The enumeration would need more joint states than allowed."""


class InfeasibleModelError(ValueError):
    """Every joint state has probability zero."""


@dataclass(frozen=True)
class EnumerationBudget:
    max_joint_states: int = 1 << 24

    def __post_init__(self):
        if self.max_joint_states < 1:
            raise ValueError("max_joint_states must be positive")


def _budget(budget) -> int:
    if budget is None:
        return EnumerationBudget().max_joint_states
    if isinstance(budget, EnumerationBudget):
        return budget.max_joint_states
    return EnumerationBudget(int(budget)).max_joint_states


def _elimination_order(graph: FactorGraph) -> list[int]:
    """Variable order that closes factors early (keeps the frontier small)."""
    n = graph.n_variables
    placed = np.zeros(n, dtype=bool)
    order: list[int] = []
    remaining = [np.asarray(f.scope, dtype=np.int64) for f in graph.factors]
    open_factors = set(range(graph.n_factors))
    while open_factors:
        best = None
        for f in sorted(open_factors):
            todo = [int(v) for v in remaining[f] if not placed[v]]
            touched = len(remaining[f]) - len(todo)
            key = (touched == 0 and len(order) > 0, len(todo), f)
            if best is None or key < best[0]:
                best = (key, f, todo)
        _, f, todo = best
        for v in todo:
            placed[v] = True
            order.append(v)
        open_factors = {g for g in open_factors if g != f and not placed[remaining[g]].all()}
    order.extend(v for v in range(n) if not placed[v])
    return order


def enumerate_finite_states(graph: FactorGraph, evidence=None, budget=None):
    """All joint states with finite score.

    Returns:
        ``(states, scores)``: a ``(k, n)`` uint8 array (columns are variable
        ids) and the float score of every row. Scores are plain sums; use
        :func:`map_score` where exact rounding matters.

    Raises:
        BudgetExceeded: the live frontier would exceed the budget.
    """
    limit = _budget(budget)
    n = graph.n_variables
    ev = as_evidence(graph, evidence)
    order = _elimination_order(graph)
    position = {v: i for i, v in enumerate(order)}
    # factors become checkable once their last variable (in ``order``) is set
    closes: dict[int, list[int]] = {}
    for f, fac in enumerate(graph.factors):
        last = max(position[v] for v in fac.scope)
        closes.setdefault(last, []).append(f)

    rows = np.zeros((1, n), dtype=np.uint8)
    scores = np.zeros(1)
    for step, v in enumerate(order):
        if 2 * len(rows) > limit:
            raise BudgetExceeded(
                f"enumeration frontier of {2 * len(rows)} states exceeds the budget of {limit}"
            )
        on = rows.copy()
        on[:, v] = 1
        rows = np.concatenate([rows, on])
        scores = np.concatenate([scores, scores + ev[v]])
        for f in closes.get(step, ()):
            fac = graph.factors[f]
            scores = scores + log_potential_batch(fac, rows[:, list(fac.scope)])
        keep = scores > NEG_INF
        rows, scores = rows[keep], scores[keep]
    return rows, scores


@dataclass(frozen=True)
class MapResult:
    assignment: np.ndarray
    score: float
    is_unique: bool


def brute_force_map(graph: FactorGraph, evidence=None, budget=None, *, rel_tol: float = 1e-9) -> MapResult:
    """Exact MAP assignment by enumeration.

    Candidate optima are screened with a float sum and then rescored with
    :func:`map_score`; ties on the exact score go to the lexicographically
    smallest assignment (variable 0 most significant).
    """
    rows, scores = enumerate_finite_states(graph, evidence, budget)
    n = graph.n_variables
    if len(rows) == 0:
        return MapResult(np.zeros(n, dtype=np.int8), NEG_INF, False)
    top = scores.max()
    slack = rel_tol * max(1.0, abs(top))
    cand = np.flatnonzero(scores >= top - slack)
    exact = np.array([map_score(graph, rows[i], evidence) for i in cand])
    best = exact.max()
    winners = cand[exact == best]
    # lexicographic minimum: np.lexsort treats its last key as primary
    if n:
        pick = winners[np.lexsort(rows[winners].T[::-1])[0]]
    else:
        pick = winners[0]
    return MapResult(rows[pick].astype(np.int8), float(best), len(winners) == 1)


@dataclass(frozen=True)
class JointDistribution:
    """Sparse normalized distribution: the finite-probability states only."""

    states: np.ndarray
    probs: np.ndarray

    @property
    def n_variables(self) -> int:
        return self.states.shape[1]

    def prob(self, assignment) -> float:
        x = np.asarray(assignment, dtype=np.uint8)
        hit = np.all(self.states == x, axis=1)
        return float(self.probs[hit].sum())

    def marginal(self, variables: Sequence[int]) -> dict[tuple[int, ...], float]:
        cols = self.states[:, list(variables)]
        out: dict[tuple[int, ...], float] = {}
        for key, p in zip(map(tuple, cols.tolist()), self.probs):
            out[key] = out.get(key, 0.0) + p
        return out

    def dense(self) -> np.ndarray:
        """Full ``2 ** n`` table, big-endian over variable ids."""
        n = self.n_variables
        if n > 24:
            raise BudgetExceeded("dense table over more than 24 variables")
        table = np.zeros(1 << n)
        weights = 1 << np.arange(n - 1, -1, -1, dtype=np.int64)
        np.add.at(table, self.states.astype(np.int64) @ weights, self.probs)
        return table

    def condition(self, fixed: Mapping[int, int]) -> "JointDistribution":
        keep = np.ones(len(self.states), dtype=bool)
        for v, s in fixed.items():
            keep &= self.states[:, int(v)] == int(s)
        z = self.probs[keep].sum()
        if z <= 0:
            raise InfeasibleModelError(f"conditioning event {dict(fixed)} has probability zero")
        return JointDistribution(self.states[keep], self.probs[keep] / z)


def joint_distribution(graph: FactorGraph, evidence=None, budget=None) -> JointDistribution:
    """Normalized ``exp`` of summed log-potentials over all joint states."""
    rows, scores = enumerate_finite_states(graph, evidence, budget)
    if len(rows) == 0:
        raise InfeasibleModelError("all joint states are forbidden")
    top = scores.max()
    w = np.exp(scores - top)
    return JointDistribution(rows, w / w.sum())


def mutual_information(dist: JointDistribution, x: int, y: int) -> float:
    """I(X;Y) in nats for two binary variables."""
    pxy = np.zeros((2, 2))
    np.add.at(pxy, (dist.states[:, x], dist.states[:, y]), dist.probs)
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    total = 0.0
    for i in range(2):
        for j in range(2):
            if pxy[i, j] > 0:
                total += pxy[i, j] * math.log(pxy[i, j] / (px[i] * py[j]))
    return total


def conditional_mutual_information(
    dist: JointDistribution,
    x: int,
    y: int,
    fixed: Mapping[int, int] | None = None,
    given: Sequence[int] = (),
) -> float:
    """I(X;Y | given, fixed) where ``fixed`` variables are pinned to a state.

    Variables neither in ``given`` nor ``fixed`` are marginalized out.
    """
    d = dist.condition(fixed) if fixed else dist
    given = list(given)
    if not given:
        return mutual_information(d, x, y)
    total = 0.0
    for key, p in sorted(d.marginal(given).items()):
        if p <= 0:
            continue
        total += p * mutual_information(d.condition(dict(zip(given, key))), x, y)
    return total


def exact_max_product_messages(
    factor: FactorSpec,
    incoming: Mapping[int, float],
    *,
    raw: bool = False,
    max_scope: int = 24,
    chunk: int = 1 << 16,
):
    """Factor-to-variable max-product messages by enumerating the scope.

    For each scope variable ``u`` and state ``s``, ``M_s`` is the best factor
    potential plus incoming messages of the *other* scope variables over
    configurations with ``u = s``.

    Returns:
        ``{var: M_on - M_off}``; with ``raw=True`` ``{var: (M_off, M_on)}``.
    """
    scope = list(factor.scope)
    k = len(scope)
    if k > max_scope:
        raise BudgetExceeded(f"factor scope {k} exceeds {max_scope}")
    missing = [v for v in scope if v not in incoming]
    if missing:
        raise KeyError(f"missing incoming messages for {missing}")
    m = np.array([incoming[v] for v in scope], dtype=float)
    best_on = np.full(k, NEG_INF)
    best_off = np.full(k, NEG_INF)
    shifts = np.arange(k - 1, -1, -1)
    total = 1 << k
    for lo in range(0, total, chunk):
        idx = np.arange(lo, min(total, lo + chunk))
        states = (idx[:, None] >> shifts) & 1
        pots = log_potential_batch(factor, states)
        finite = pots > NEG_INF
        if not finite.any():
            continue
        states, pots = states[finite], pots[finite]
        scores = pots + states @ m
        for j in range(k):
            on = states[:, j] == 1
            if on.any():
                best_on[j] = max(best_on[j], float((scores[on] - m[j]).max()))
            if (~on).any():
                best_off[j] = max(best_off[j], float(scores[~on].max()))
    if raw:
        return {v: (float(best_off[j]), float(best_on[j])) for j, v in enumerate(scope)}
    return {v: normalize_message(best_on[j], best_off[j]) for j, v in enumerate(scope)}
