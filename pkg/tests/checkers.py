"""Reference checkers that do not go through factor potentials."""

from __future__ import annotations

from itertools import combinations, permutations

from mam.models import ids_by_label, lateral_label, line_label, seg_label, topdown_label

ROWS = range(1, 5)
LATERALS = [(i1, i2) for i1 in ROWS for i2 in ROWS if abs(i1 - i2) <= 1]


def toy_grid_configurations(graph) -> set[tuple[int, ...]]:
    """Every joint state of the toy grid holding at most two lines.

    A configuration picks k <= 2 ON line variables and k disjoint lateral
    continuations (segment pairs in adjacent rows); the segments they touch
    are ON, and each ON line is wired top-down to one ON segment per column
    (any bijection per column, so broken lines are included).
    """
    ids = ids_by_label(graph)
    n = graph.n_variables
    out = set()
    for k in (0, 1, 2):
        for lines in combinations((1, 2), k):
            for lats in combinations(LATERALS, k):
                col1 = [i1 for i1, _ in lats]
                col2 = [i2 for _, i2 in lats]
                if len(set(col1)) < k or len(set(col2)) < k:
                    continue
                for p1 in permutations(col1):
                    for p2 in permutations(col2):
                        on = {line_label(l) for l in lines}
                        on |= {lateral_label(*lat) for lat in lats}
                        on |= {seg_label(i, 1) for i in col1} | {seg_label(i, 2) for i in col2}
                        on |= {topdown_label(l, i, 1) for l, i in zip(lines, p1)}
                        on |= {topdown_label(l, i, 2) for l, i in zip(lines, p2)}
                        state = [0] * n
                        for lab in on:
                            state[ids[lab]] = 1
                        out.add(tuple(state))
    return out


def part_variable_ids(graph):
    ids = ids_by_label(graph)
    return [ids[line_label(l)] for l in (1, 2)] + [ids[seg_label(i, j)] for j in (1, 2) for i in ROWS]
