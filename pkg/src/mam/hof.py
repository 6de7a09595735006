"""Attention higher-order factors: semantics and max-product updates.

A factor of part variable ``x`` sees ``x`` plus its attention variables,
partitioned into interaction groups. A configuration is valid when the
per-group ON counts form an allowed pattern and ``x`` is ON exactly when
some group is active; its log-potential is the pattern's potential.

Message updates exploit that structure: only the best and second-best
incoming message of each group matter, so one factor update costs
``O(scope + patterns * groups)`` instead of ``O(2 ** scope)``.
"""

from __future__ import annotations

from itertools import combinations, product
from typing import Mapping, Sequence

import numpy as np

from .factors import NEG_INF, MamHofSpec, log_potential, normalize_message, normalize_messages

__all__ = [
    "MamHofSpec",
    "hof_potential",
    "enumerate_valid_configs",
    "mam_hof_messages",
    "HofBatch",
    "ScopeTooLargeError",
]


class ScopeTooLargeError(ValueError):
    pass


def hof_potential(spec: MamHofSpec, config) -> float:
    """Log-potential of ``spec`` for the set ``config`` of ON variables."""
    return log_potential(spec, config)


def enumerate_valid_configs(spec: MamHofSpec, max_configs: int = 1 << 20):
    """All finite-potential configurations as ``(frozenset_of_on, potential)``.

    Configurations are generated pattern by pattern: an active group
    contributes exactly one of its members, the part variable is ON iff
    the pattern is non-zero.
    """
    count = 0
    for pattern in spec.patterns:
        n = 1
        for b, g in zip(pattern, spec.groups):
            if b:
                n *= len(g)
        count += n
    if count > max_configs:
        raise ScopeTooLargeError(f"{count} valid configurations exceed the limit {max_configs}")
    out = []
    for pattern, u in zip(spec.patterns, spec.potentials):
        choices = [g if b else (None,) for b, g in zip(pattern, spec.groups)]
        for pick in product(*choices):
            on = {a for a in pick if a is not None}
            if any(pattern):
                on.add(spec.part_var)
            out.append((frozenset(on), u))
    return out


def _group_stats(group: Sequence[int], incoming: Mapping[int, float], verbatim_singleton: bool):
    """Best value, its (lowest-id) argmax, and runner-up value of one group."""
    best = max(incoming[a] for a in group)
    arg = min(a for a in group if incoming[a] == best)
    if len(group) == 1:
        second = 0.0 if verbatim_singleton else NEG_INF
    else:
        second = max(incoming[a] for a in group if a != arg)
    return best, arg, second


def mam_hof_messages(
    spec: MamHofSpec,
    incoming: Mapping[int, float],
    *,
    verbatim_self_term: bool = False,
    verbatim_singleton: bool = False,
) -> dict[int, float]:
    """Outgoing normalized messages of one attention factor.

    Args:
        spec: the factor.
        incoming: variable-to-factor log-odds for every scope variable.
        verbatim_self_term: add the part variable's own incoming message to
            its outgoing ON score (the printed update). Off by default: a
            max-product message must not depend on its recipient's input.
        verbatim_singleton: use 0 instead of ``-inf`` as the runner-up of a
            one-member group. Off by default: with its only member OFF a
            singleton group cannot be active.

    Returns:
        ``{variable id: log-odds}`` for every variable in the scope.
    """
    missing = [v for v in spec.scope if v not in incoming]
    if missing:
        raise KeyError(f"missing incoming messages for {missing}")

    mx = incoming[spec.part_var]
    stats = [_group_stats(g, incoming, verbatim_singleton) for g in spec.groups]
    m1 = [s[0] for s in stats]
    nonzero = [any(p) for p in spec.patterns]

    def total(pattern, u, skip=None, with_x=True):
        s = u + (mx if with_x and any(pattern) else 0.0)
        for k, b in enumerate(pattern):
            if b and k != skip:
                s += m1[k]
        return s

    out: dict[int, float] = {}
    on = max(
        (total(p, u, with_x=verbatim_self_term) for p, u, nz in zip(spec.patterns, spec.potentials, nonzero) if nz),
        default=NEG_INF,
    )
    off = spec.potentials[spec.patterns.index((0,) * spec.n_groups)]
    out[spec.part_var] = normalize_message(on, off)

    everything = max(total(p, u) for p, u in zip(spec.patterns, spec.potentials))
    for k, group in enumerate(spec.groups):
        _, arg, second = stats[k]
        active = [(p, u) for p, u in zip(spec.patterns, spec.potentials) if p[k]]
        on_k = max((total(p, u, skip=k) for p, u in active), default=NEG_INF)
        off_arg = max(
            total(p, u, skip=k) + (second if p[k] else 0.0)
            for p, u in zip(spec.patterns, spec.potentials)
        )
        for a in group:
            out[a] = normalize_message(on_k, off_arg if a == arg else everything)
    return out


class HofBatch:
    """Vectorised message updates for many attention factors at once.

    Args:
        specs: the factors.
        edge_offsets: for each factor, the index of its first edge in the
            global edge array; a factor's edges follow its ``scope`` order.
    """

    def __init__(self, specs: Sequence[MamHofSpec], edge_offsets: Sequence[int],
                 verbatim_self_term: bool = False, verbatim_singleton: bool = False):
        self.verbatim_self_term = verbatim_self_term
        self.verbatim_singleton = verbatim_singleton
        part_edge, att_edge, att_group, group_start, group_factor, group_size = [], [], [], [], [], []
        pat_factor, pat_u, pat_nonzero, row_start, zero_row = [], [], [], [], []
        ent_row, ent_group, comp_row, comp_group = [], [], [], []
        for f, (spec, off) in enumerate(zip(specs, edge_offsets)):
            part_edge.append(off)
            pos = off + 1
            g0 = len(group_start)
            for k, group in enumerate(spec.groups):
                gid = g0 + k
                group_start.append(len(att_edge))
                group_factor.append(f)
                group_size.append(len(group))
                # ties in a group resolve to the lowest variable id
                order = sorted(range(len(group)), key=lambda i: group[i])
                for i in order:
                    att_edge.append(pos + i)
                    att_group.append(gid)
                pos += len(group)
            row_start.append(len(pat_u))
            for pattern, u in zip(spec.patterns, spec.potentials):
                r = len(pat_u)
                pat_factor.append(f)
                pat_u.append(u)
                pat_nonzero.append(any(pattern))
                if not any(pattern):
                    zero_row.append(r)
                for k, b in enumerate(pattern):
                    if b:
                        ent_row.append(r)
                        ent_group.append(g0 + k)
                    else:
                        comp_row.append(r)
                        comp_group.append(g0 + k)
        self.n_factors = len(specs)
        self.part_edge = np.asarray(part_edge, dtype=np.int64)
        self.att_edge = np.asarray(att_edge, dtype=np.int64)
        self.att_group = np.asarray(att_group, dtype=np.int64)
        self.group_start = np.asarray(group_start, dtype=np.int64)
        self.group_factor = np.asarray(group_factor, dtype=np.int64)
        self.singleton = np.asarray(group_size, dtype=np.int64) == 1
        self.pat_factor = np.asarray(pat_factor, dtype=np.int64)
        self.pat_u = np.asarray(pat_u, dtype=float)
        self.pat_nonzero = np.asarray(pat_nonzero, dtype=bool)
        self.row_start = np.asarray(row_start, dtype=np.int64)
        self.zero_row = np.asarray(zero_row, dtype=np.int64)
        self.ent_row = np.asarray(ent_row, dtype=np.int64)
        self.ent_group = np.asarray(ent_group, dtype=np.int64)
        self.comp_row = np.asarray(comp_row, dtype=np.int64)
        self.comp_group = np.asarray(comp_group, dtype=np.int64)
        self.n_groups = len(group_start)
        self.n_rows = len(pat_u)

    def __call__(self, v2f: np.ndarray, out: np.ndarray) -> None:
        """Write factor-to-variable messages for every edge into ``out``."""
        if self.n_factors == 0:
            return
        vals = v2f[self.att_edge]
        m1 = np.maximum.reduceat(vals, self.group_start)
        n_att = len(vals)
        slots = np.arange(n_att)
        first = np.minimum.reduceat(np.where(vals == m1[self.att_group], slots, n_att), self.group_start)
        rest = vals.copy()
        rest[first] = NEG_INF
        m2 = np.maximum.reduceat(rest, self.group_start)
        if self.verbatim_singleton:
            m2[self.singleton] = 0.0
        mx = v2f[self.part_edge]

        base = self.pat_u + np.bincount(self.ent_row, weights=m1[self.ent_group], minlength=self.n_rows)
        mx_row = mx[self.pat_factor]
        withx = np.where(self.pat_nonzero, base + mx_row, base)

        on_rows = withx if self.verbatim_self_term else base
        on_x = np.maximum.reduceat(np.where(self.pat_nonzero, on_rows, NEG_INF), self.row_start)
        out[self.part_edge] = normalize_messages(on_x, self.pat_u[self.zero_row])

        everything = np.maximum.reduceat(withx, self.row_start)
        on_g = np.full(self.n_groups, NEG_INF)
        np.maximum.at(on_g, self.ent_group, withx[self.ent_row] - m1[self.ent_group])
        off_inactive = np.full(self.n_groups, NEG_INF)
        np.maximum.at(off_inactive, self.comp_group, withx[self.comp_row])
        off_arg = np.maximum(off_inactive, on_g + m2)

        is_arg = np.zeros(n_att, dtype=bool)
        is_arg[first] = True
        off_att = np.where(is_arg, off_arg[self.att_group], everything[self.group_factor[self.att_group]])
        out[self.att_edge] = normalize_messages(on_g[self.att_group], off_att)


    def potentials(self, xe: np.ndarray) -> np.ndarray:
        """Log-potential of every factor given 0/1 states ``xe`` per edge."""
        counts = np.add.reduceat(xe[self.att_edge].astype(np.int64), self.group_start)
        bad = np.zeros(self.n_rows, dtype=np.int64)
        np.add.at(bad, self.ent_row, counts[self.ent_group] != 1)
        np.add.at(bad, self.comp_row, counts[self.comp_group] != 0)
        out = np.full(self.n_factors, NEG_INF)
        hit = np.flatnonzero(bad == 0)
        out[self.pat_factor[hit]] = self.pat_u[hit]
        active = np.zeros(self.n_factors, dtype=bool)
        np.logical_or.at(active, self.group_factor, counts > 0)
        consistent = (xe[self.part_edge] == 1) == active
        out[~consistent] = NEG_INF
        return out


def pattern_family(n_groups: int, max_active: int | None = None):
    """All 0/1 patterns with at most ``max_active`` active groups."""
    max_active = n_groups if max_active is None else max_active
    out = []
    for r in range(max_active + 1):
        for active in combinations(range(n_groups), r):
            out.append(tuple(1 if k in active else 0 for k in range(n_groups)))
    return out
