"""Leaky OR factors: potentials and linear-time max-product updates."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .factors import NEG_INF, OrFactorSpec, log_potential, normalize_message, normalize_messages

__all__ = ["OrFactorSpec", "or_potential", "or_factor_messages", "OrBatch"]


def or_potential(spec: OrFactorSpec, config) -> float:
    """Log-potential of ``spec`` for the set ``config`` of ON variables."""
    return log_potential(spec, config)


def _pos(m: float) -> float:
    return m if m > 0.0 else 0.0


def or_factor_messages(spec: OrFactorSpec, incoming: Mapping[int, float]) -> dict[int, float]:
    """Outgoing normalized messages of one OR factor.

    With a single parent the 2x2 table is enumerated directly. Otherwise the
    closed forms use the two largest parent messages and the sum of the
    positive parts of the others.
    """
    missing = [v for v in spec.scope if v not in incoming]
    if missing:
        raise KeyError(f"missing incoming messages for {missing}")
    l01, l10 = spec.log_pi01, spec.log_pi10
    mi = incoming[spec.pixel_var]
    parents = spec.parents
    out: dict[int, float] = {}

    if len(parents) == 1:
        (x,) = parents
        mx = incoming[x]
        out[spec.pixel_var] = normalize_message(max(mx, l10), max(l01 + mx, 0.0))
        out[x] = normalize_message(max(mi, l01), max(mi + l10, 0.0))
        return out

    ranked = sorted(parents, key=lambda p: -incoming[p])  # stable: ties keep scope order
    top, runner = ranked[0], ranked[1]

    def pos_sum(exclude):
        return sum(_pos(incoming[q]) for q in parents if q not in exclude)

    best_nonempty = incoming[top] + pos_sum({top})
    out[spec.pixel_var] = normalize_message(max(best_nonempty, l10), _pos(l01 + best_nonempty))

    gate = max(mi, l01)
    for x in parents:
        on = gate + pos_sum({x})
        other = runner if x == top else top
        off = max(_pos(mi + l10), gate + incoming[other] + pos_sum({x, other}))
        out[x] = normalize_message(on, off)
    return out


class OrBatch:
    """Vectorised OR-factor updates over many factors (see :class:`HofBatch`)."""

    def __init__(self, specs: Sequence[OrFactorSpec], edge_offsets: Sequence[int]):
        pixel_edge, parent_edge, slot_factor, start = [], [], [], []
        l01, l10 = [], []
        for f, (spec, off) in enumerate(zip(specs, edge_offsets)):
            pixel_edge.append(off)
            start.append(len(parent_edge))
            for i in range(len(spec.parents)):
                parent_edge.append(off + 1 + i)
                slot_factor.append(f)
            l01.append(spec.log_pi01)
            l10.append(spec.log_pi10)
        self.n_factors = len(specs)
        self.pixel_edge = np.asarray(pixel_edge, dtype=np.int64)
        self.parent_edge = np.asarray(parent_edge, dtype=np.int64)
        self.slot_factor = np.asarray(slot_factor, dtype=np.int64)
        self.start = np.asarray(start, dtype=np.int64)
        self.l01 = np.asarray(l01, dtype=float)
        self.l10 = np.asarray(l10, dtype=float)
        self.single = np.diff(np.append(self.start, len(parent_edge))) == 1

    def __call__(self, v2f: np.ndarray, out: np.ndarray) -> None:
        if self.n_factors == 0:
            return
        mi = v2f[self.pixel_edge]
        mp = v2f[self.parent_edge]
        n = len(mp)
        slots = np.arange(n)
        fac = self.slot_factor
        pos = np.maximum(mp, 0.0)
        s = np.add.reduceat(pos, self.start)
        t1 = np.maximum.reduceat(mp, self.start)
        first = np.minimum.reduceat(np.where(mp == t1[fac], slots, n), self.start)
        rest = mp.copy()
        rest[first] = NEG_INF
        t2 = np.maximum.reduceat(rest, self.start)
        second = np.minimum.reduceat(np.where(rest == t2[fac], slots, n), self.start)
        second = np.where(self.single, first, second)
        pos1 = pos[first]
        pos2 = np.where(self.single, 0.0, pos[second])

        best = t1 + (s - pos1)
        out[self.pixel_edge] = normalize_messages(
            np.maximum(best, self.l10), np.maximum(self.l01 + best, 0.0)
        )

        gate = np.maximum(mi, self.l01)[fac]
        others = s[fac] - pos
        on = gate + others
        is_first = slots == first[fac]
        best_others = np.where(
            is_first,
            t2[fac] + (s[fac] - pos1[fac] - pos2[fac]),
            t1[fac] + (s[fac] - pos - pos1[fac]),
        )
        off = np.maximum(np.maximum(mi + self.l10, 0.0)[fac], gate + best_others)
        out[self.parent_edge] = normalize_messages(on, off)

    def potentials(self, xe: np.ndarray) -> np.ndarray:
        """Log-potential of every factor given 0/1 states ``xe`` per edge."""
        any_parent = np.maximum.reduceat(xe[self.parent_edge], self.start) > 0
        pixel = xe[self.pixel_edge] == 1
        return np.where(any_parent, np.where(pixel, 0.0, self.l01), np.where(pixel, self.l10, 0.0))
