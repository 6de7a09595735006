"""Small hand-specified MAMs: the gene network and the 4x2 line grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .factors import NEG_INF, MamHofSpec, Table
from .graph import FactorGraph, GraphBuilder, VariableKind


def ids_by_label(graph: FactorGraph) -> dict[str, int]:
    return {v.label: v.id for v in graph.variables}


# --- gene network ------------------------------------------------------------


@dataclass(frozen=True)
class GeneNetworkParams:
    """Log-potentials of the qualitative gene-network factors.

    ``promote`` is charged when an ON attention variable meets an OFF
    regulated gene; ``corepress`` when B and D are both expressed. Any value
    below 0 keeps the intended qualitative behaviour.
    """

    promote: float = math.log(0.1)
    corepress: float = math.log(0.1)


GENE_LABELS = ("X_A", "X_B", "X_C", "X_D", "a_AB", "a_AD")

# (X_A, X_C, a_AB, a_AD) joint states allowed by the A/C factor
GENE_AC_STATES = ((0, 0, 0, 0), (0, 1, 0, 0), (1, 0, 1, 0), (1, 1, 0, 1))


def build_gene_network_demo(params: GeneNetworkParams | None = None, **overrides) -> FactorGraph:
    """Six-variable MAM of the gene regulation example.

    Variables (ids in order): X_A, X_B, X_C, X_D (regular) and the attention
    variables a_AB, a_AD. Factors:

    1. table over (X_A, X_C, a_AB, a_AD) allowing the four states of
       ``GENE_AC_STATES`` at 0, everything else ``-inf``;
    2. (a_AB, X_B): ``promote`` when a_AB is ON but X_B is OFF;
    3. (a_AD, X_D): likewise;
    4. (X_B, X_D): ``corepress`` when both are ON.
    """
    params = params or GeneNetworkParams()
    if overrides:
        params = GeneNetworkParams(**{**params.__dict__, **overrides})
    b = GraphBuilder()
    xa = b.add_variable(VariableKind.PART, "X_A")
    xb = b.add_variable(VariableKind.PART, "X_B")
    xc = b.add_variable(VariableKind.PART, "X_C")
    xd = b.add_variable(VariableKind.PART, "X_D")
    ab = b.add_variable(VariableKind.ATTENTION, "a_AB", endpoints=(xa, xb))
    ad = b.add_variable(VariableKind.ATTENTION, "a_AD", endpoints=(xa, xd))

    allowed = set(GENE_AC_STATES)
    b.add_factor(Table.from_function((xa, xc, ab, ad), lambda *s: 0.0 if s in allowed else NEG_INF))
    promote = params.promote
    b.add_factor(Table.from_function((ab, xb), lambda a, x: promote if a and not x else 0.0))
    b.add_factor(Table.from_function((ad, xd), lambda a, x: promote if a and not x else 0.0))
    b.add_factor(Table.from_function((xb, xd), lambda u, v: params.corepress if u and v else 0.0))
    return b.build()


# --- 4x2 grid of line segments ----------------------------------------------


def seg_label(i: int, j: int) -> str:
    return f"x_v{i}{j}"


def line_label(l: int) -> str:
    return f"x_P{l}"


def topdown_label(l: int, i: int, j: int) -> str:
    return f"a_P{l}_v{i}{j}"


def lateral_label(i1: int, i2: int) -> str:
    return f"a_v{i1}1_v{i2}2"


def build_toy_grid() -> FactorGraph:
    """MAM over a 4x2 grid of segments joined into at most two lines.

    Ten part variables (two lines, eight segments), sixteen top-down and ten
    lateral attention variables. Each line factor takes exactly one segment
    per column; each segment factor takes one line and one lateral
    continuation, or nothing. All potentials are 0.
    """
    b = GraphBuilder()
    line = {l: b.add_variable(VariableKind.PART, line_label(l)) for l in (1, 2)}
    seg = {(i, j): b.add_variable(VariableKind.PART, seg_label(i, j)) for j in (1, 2) for i in range(1, 5)}
    td = {
        (l, i, j): b.add_variable(VariableKind.ATTENTION, topdown_label(l, i, j), endpoints=(line[l], seg[i, j]))
        for l in (1, 2) for j in (1, 2) for i in range(1, 5)
    }
    lat = {
        (i1, i2): b.add_variable(VariableKind.ATTENTION, lateral_label(i1, i2), endpoints=(seg[i1, 1], seg[i2, 2]))
        for i1 in range(1, 5) for i2 in range(1, 5) if abs(i1 - i2) <= 1
    }
    both = ((0, 0), (1, 1))
    for l in (1, 2):
        groups = tuple(tuple(td[l, i, j] for i in range(1, 5)) for j in (1, 2))
        b.add_factor(MamHofSpec(line[l], groups, both, (0.0, 0.0)))
    for j in (1, 2):
        for i in range(1, 5):
            g1 = (td[1, i, j], td[2, i, j])
            if j == 1:
                g2 = tuple(lat[i, k] for k in range(1, 5) if (i, k) in lat)
            else:
                g2 = tuple(lat[k, i] for k in range(1, 5) if (k, i) in lat)
            b.add_factor(MamHofSpec(seg[i, j], (g1, g2), both, (0.0, 0.0)))
    return b.build()


def toy_grid_line_evidence(graph: FactorGraph, lines, strength: float = 1.0) -> dict[int, float]:
    """Evidence favouring the given lines and disfavouring everything else.

    Args:
        lines: ``(line index, row in column 1, row in column 2)`` triples.
    """
    ids = ids_by_label(graph)
    on = set()
    for l, i1, i2 in lines:
        on.update({
            line_label(l), seg_label(i1, 1), seg_label(i2, 2),
            topdown_label(l, i1, 1), topdown_label(l, i2, 2), lateral_label(i1, i2),
        })
    return {vid: (strength if lab in on else -strength) for lab, vid in ids.items()}
