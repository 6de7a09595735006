"""Factor kinds for binary factor graphs and their log-potentials.

Four factor kinds are supported:

- ``Unary``: a log-potential pair (value at OFF, value at ON) on one variable.
- ``Table``: a dense log-potential table over the joint states of a small
  ordered scope (big-endian state index, ``NEG_INF`` allowed).
- ``MamHofSpec``: the attention higher-order factor of a part variable.
- ``OrFactorSpec``: the leaky OR factor tying a pixel to its parent parts.

Every kind exposes ``scope`` (a tuple of variable ids in canonical order)
and can be evaluated on a set of ON variables (``log_potential``) or on a
batch of 0/1 state rows (``log_potential_batch``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Iterable, Sequence, Union

import numpy as np

NEG_INF = float("-inf")
"""Sentinel for a forbidden configuration (log 0).

IEEE ``-inf`` already obeys ``NEG_INF + x == NEG_INF`` and
``max(NEG_INF, x) == x`` for every finite ``x``; nothing in this package
ever adds ``+inf`` to it.
"""

LOG_HALF = math.log(0.5)


def safe_log(p: float) -> float:
    """``log(p)`` with ``log(0) == NEG_INF``."""
    if p < 0:
        raise ValueError(f"probability must be non-negative, got {p}")
    return NEG_INF if p == 0 else math.log(p)


class UnknownVariableError(KeyError):
    """A configuration mentions a variable outside the factor scope."""


@dataclass(frozen=True)
class Unary:
    var: int
    log_pot: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "log_pot", tuple(float(v) for v in self.log_pot))
        if len(self.log_pot) != 2:
            raise ValueError("unary log_pot must hold (value at OFF, value at ON)")

    @property
    def scope(self) -> tuple[int, ...]:
        return (self.var,)

    @property
    def log_odds(self) -> float:
        off, on = self.log_pot
        if off == NEG_INF and on == NEG_INF:
            return 0.0
        return on - off


@dataclass(frozen=True)
class Table:
    vars: tuple[int, ...]
    log_pots: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "vars", tuple(int(v) for v in self.vars))
        object.__setattr__(self, "log_pots", tuple(float(v) for v in self.log_pots))
        if len(self.log_pots) != 2 ** len(self.vars):
            raise ValueError(
                f"table over {len(self.vars)} variables needs {2 ** len(self.vars)} "
                f"entries, got {len(self.log_pots)}"
            )
        if len(set(self.vars)) != len(self.vars):
            raise ValueError("duplicate variable in table scope")

    @property
    def scope(self) -> tuple[int, ...]:
        return self.vars

    def index_of(self, states: Sequence[int]) -> int:
        idx = 0
        for s in states:
            idx = (idx << 1) | int(s)
        return idx

    @classmethod
    def from_function(cls, vars: Sequence[int], fn) -> "Table":
        """Tabulate ``fn(*states)`` over all joint states, big-endian."""
        pots = [float(fn(*states)) for states in product((0, 1), repeat=len(vars))]
        return cls(tuple(vars), tuple(pots))


@dataclass(frozen=True)
class MamHofSpec:
    """Attention higher-order factor of one part variable.

    Attributes:
        part_var: id of the part variable the factor belongs to.
        groups: disjoint, non-empty interaction groups of attention ids.
        patterns: allowed group-activation vectors; must contain all-zero.
        potentials: log-potential per pattern (parallel to ``patterns``).
    """

    part_var: int
    groups: tuple[tuple[int, ...], ...]
    patterns: tuple[tuple[int, ...], ...]
    potentials: tuple[float, ...]

    def __post_init__(self):
        groups = tuple(tuple(int(a) for a in g) for g in self.groups)
        patterns = tuple(tuple(int(b) for b in p) for p in self.patterns)
        potentials = tuple(float(u) for u in self.potentials)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "patterns", patterns)
        object.__setattr__(self, "potentials", potentials)
        n_groups = len(groups)
        if n_groups == 0:
            raise ValueError("a MAM factor needs at least one interaction group")
        if any(len(g) == 0 for g in groups):
            raise ValueError("interaction groups must be non-empty")
        flat = [a for g in groups for a in g]
        if len(set(flat)) != len(flat):
            raise ValueError("interaction groups must be pairwise disjoint")
        if self.part_var in flat:
            raise ValueError("part variable cannot also be an attention variable")
        if len(potentials) != len(patterns):
            raise ValueError("potentials must be parallel to patterns")
        if len(set(patterns)) != len(patterns):
            raise ValueError("duplicate pattern")
        for p in patterns:
            if len(p) != n_groups or any(b not in (0, 1) for b in p):
                raise ValueError(f"pattern {p} is not a 0/1 vector of length {n_groups}")
        if (0,) * n_groups not in patterns:
            raise ValueError("the all-zero pattern must be allowed")
        if any(math.isnan(u) or math.isinf(u) for u in potentials):
            raise ValueError("pattern potentials must be finite")

    @property
    def scope(self) -> tuple[int, ...]:
        return (self.part_var,) + tuple(a for g in self.groups for a in g)

    @property
    def attention_vars(self) -> tuple[int, ...]:
        return tuple(a for g in self.groups for a in g)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def potential_of(self, pattern: Sequence[int]) -> float | None:
        try:
            return self.potentials[self.patterns.index(tuple(pattern))]
        except ValueError:
            return None


@dataclass(frozen=True)
class OrFactorSpec:
    """Leaky OR between a pixel variable and its parent part variables.

    ``log_pi01`` is charged when some parent is ON but the pixel is OFF,
    ``log_pi10`` when the pixel is ON with every parent OFF.
    """

    pixel_var: int
    parents: tuple[int, ...]
    log_pi01: float
    log_pi10: float

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        object.__setattr__(self, "log_pi01", float(self.log_pi01))
        object.__setattr__(self, "log_pi10", float(self.log_pi10))
        if not self.parents:
            raise ValueError("an OR factor needs at least one parent")
        if len(set(self.parents)) != len(self.parents):
            raise ValueError("OR parents must be distinct")
        if self.pixel_var in self.parents:
            raise ValueError("pixel variable cannot be its own parent")
        for name in ("log_pi01", "log_pi10"):
            v = getattr(self, name)
            if math.isnan(v) or not v < LOG_HALF:
                raise ValueError(f"{name} must be below log(0.5), got {v}")

    @classmethod
    def from_probs(cls, pixel_var: int, parents: Iterable[int], pi01: float, pi10: float):
        return cls(pixel_var, tuple(parents), safe_log(pi01), safe_log(pi10))

    @property
    def scope(self) -> tuple[int, ...]:
        return (self.pixel_var,) + self.parents


FactorSpec = Union[Unary, Table, MamHofSpec, OrFactorSpec]


def _check_config(factor: FactorSpec, on: Iterable[int]) -> frozenset[int]:
    on = frozenset(int(v) for v in on)
    extra = on.difference(factor.scope)
    if extra:
        raise UnknownVariableError(f"variables {sorted(extra)} are not in the factor scope")
    return on


def log_potential(factor: FactorSpec, on: Iterable[int]) -> float:
    """Log-potential of ``factor`` when exactly the variables in ``on`` are ON."""
    on = _check_config(factor, on)
    if isinstance(factor, Unary):
        return factor.log_pot[1 if factor.var in on else 0]
    if isinstance(factor, Table):
        return factor.log_pots[factor.index_of([v in on for v in factor.vars])]
    if isinstance(factor, MamHofSpec):
        counts = tuple(sum(a in on for a in g) for g in factor.groups)
        u = factor.potential_of(counts)
        if u is None or (factor.part_var in on) != any(counts):
            return NEG_INF
        return u
    if isinstance(factor, OrFactorSpec):
        any_parent = any(p in on for p in factor.parents)
        pixel = factor.pixel_var in on
        if any_parent:
            return 0.0 if pixel else factor.log_pi01
        return factor.log_pi10 if pixel else 0.0
    raise TypeError(f"unknown factor type {type(factor).__name__}")


def log_potential_batch(factor: FactorSpec, states: np.ndarray) -> np.ndarray:
    """Vectorised log-potential.

    Args:
        states: ``(n, len(factor.scope))`` array of 0/1 states, columns in
            ``factor.scope`` order.
    """
    states = np.asarray(states, dtype=np.int64)
    if states.ndim != 2 or states.shape[1] != len(factor.scope):
        raise ValueError("states must have one column per scope variable")
    if isinstance(factor, Unary):
        return np.asarray(factor.log_pot, dtype=float)[states[:, 0]]
    if isinstance(factor, Table):
        k = len(factor.vars)
        weights = 1 << np.arange(k - 1, -1, -1, dtype=np.int64)
        return np.asarray(factor.log_pots, dtype=float)[states @ weights]
    if isinstance(factor, MamHofSpec):
        part = states[:, 0]
        counts = []
        col = 1
        for g in factor.groups:
            counts.append(states[:, col:col + len(g)].sum(axis=1))
            col += len(g)
        counts = np.stack(counts, axis=1)
        out = np.full(len(states), NEG_INF)
        for pattern, u in zip(factor.patterns, factor.potentials):
            hit = np.all(counts == np.asarray(pattern), axis=1)
            out[hit] = u
        consistent = (part == 1) == (counts.sum(axis=1) > 0)
        out[~consistent] = NEG_INF
        return out
    if isinstance(factor, OrFactorSpec):
        pixel = states[:, 0] == 1
        any_parent = states[:, 1:].any(axis=1)
        return np.where(
            any_parent,
            np.where(pixel, 0.0, factor.log_pi01),
            np.where(pixel, factor.log_pi10, 0.0),
        )
    raise TypeError(f"unknown factor type {type(factor).__name__}")


MSG_CAP = 1e7
"""Magnitude bound on stored log-odds messages.

Messages pinned at the bound behave as hard constraints while keeping every
sum finite (no ``inf - inf``)."""


def normalize_message(on: float, off: float) -> float:
    """Store a raw max-product message ``(M_off, M_on)`` as ``M_on - M_off``."""
    if on == NEG_INF and off == NEG_INF:
        return 0.0
    return min(MSG_CAP, max(-MSG_CAP, on - off))


def normalize_messages(on: np.ndarray, off: np.ndarray) -> np.ndarray:
    on = np.asarray(on, dtype=float)
    off = np.asarray(off, dtype=float)
    both = (on == NEG_INF) & (off == NEG_INF)
    with np.errstate(invalid="ignore"):
        d = on - off
    d[both] = 0.0
    return np.clip(d, -MSG_CAP, MSG_CAP)
