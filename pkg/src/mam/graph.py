"""Binary factor graphs with the part / attention / pixel / weight taxonomy."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Sequence

from .factors import NEG_INF, FactorSpec, MamHofSpec, OrFactorSpec, Table, Unary

FORMAT_VERSION = 1


class VariableKind(str, Enum):
    PART = "part"
    ATTENTION = "attention"
    PIXEL = "pixel"
    WEIGHT = "weight"


@dataclass(frozen=True)
class Variable:
    """A binary variable.

    Attention variables record the two regular variables they connect in
    ``endpoints``; every other kind leaves it ``None``.
    """

    id: int
    kind: VariableKind
    label: str = ""
    endpoints: tuple[int, int] | None = None

    @property
    def is_regular(self) -> bool:
        return self.kind is not VariableKind.ATTENTION


class GraphError(ValueError):
    """Structurally inconsistent factor graph."""


@dataclass(frozen=True, eq=False)
class FactorGraph:
    """Immutable factor graph; build it with :class:`GraphBuilder`."""

    variables: tuple[Variable, ...]
    factors: tuple[FactorSpec, ...]
    var_factors: tuple[tuple[int, ...], ...] = field(repr=False)

    @property
    def n_variables(self) -> int:
        return len(self.variables)

    @property
    def n_factors(self) -> int:
        return len(self.factors)

    def factor_vars(self, f: int) -> tuple[int, ...]:
        return self.factors[f].scope

    def variables_of_kind(self, kind: VariableKind) -> list[int]:
        kind = VariableKind(kind)
        return [v.id for v in self.variables if v.kind is kind]

    def edges(self) -> list[tuple[int, int]]:
        """All (factor, variable) pairs, factor-major in scope order."""
        return [(f, v) for f, fac in enumerate(self.factors) for v in fac.scope]

    def structurally_equal(self, other: "FactorGraph") -> bool:
        return self.variables == other.variables and self.factors == other.factors

    def __eq__(self, other):
        if not isinstance(other, FactorGraph):
            return NotImplemented
        return self.structurally_equal(other)

    __hash__ = None

    def psi_neighbors(self, v: int) -> set[int]:
        """Variables sharing at least one factor with ``v``."""
        out: set[int] = set()
        for f in self.var_factors[v]:
            out.update(self.factors[f].scope)
        out.discard(v)
        return out


class GraphBuilder:
    """Incrementally assemble a :class:`FactorGraph`."""

    def __init__(self):
        self._variables: list[Variable] = []
        self._factors: list[FactorSpec] = []

    def __len__(self):
        return len(self._variables)

    def add_variable(self, kind, label: str = "", endpoints=None) -> int:
        vid = len(self._variables)
        kind = VariableKind(kind)
        if endpoints is not None:
            endpoints = (int(endpoints[0]), int(endpoints[1]))
        self._variables.append(Variable(vid, kind, label, endpoints))
        return vid

    def add_factor(self, factor: FactorSpec) -> int:
        self._factors.append(factor)
        return len(self._factors) - 1

    def build(self) -> FactorGraph:
        return make_graph(self._variables, self._factors)


def make_graph(variables: Iterable[Variable], factors: Iterable[FactorSpec]) -> FactorGraph:
    variables = tuple(variables)
    factors = tuple(factors)
    for i, var in enumerate(variables):
        if var.id != i:
            raise GraphError(f"variable ids must be dense and ordered; slot {i} holds {var.id}")
    n = len(variables)
    var_factors: list[list[int]] = [[] for _ in range(n)]
    for f, fac in enumerate(factors):
        scope = fac.scope
        if len(set(scope)) != len(scope):
            raise GraphError(f"factor {f} repeats a variable")
        for v in scope:
            if not 0 <= v < n:
                raise GraphError(f"factor {f} references unknown variable {v}")
            var_factors[v].append(f)
    return FactorGraph(variables, factors, tuple(tuple(fs) for fs in var_factors))


# --- MAM connectivity constraints -------------------------------------------


@dataclass(frozen=True)
class Violation:
    constraint: int
    variable: int | None
    factor: int | None
    message: str


def validate_mam_constraints(graph: FactorGraph) -> list[Violation]:
    """Report every breach of the three MAM connectivity constraints.

    1. every variable carries a known kind, and only attention variables
       carry endpoints;
    2. every attention variable names two distinct regular endpoints and is
       psi-connected to both of them;
    3. every factor touching an attention variable contains exactly one of
       that variable's endpoints.

    An empty list means the graph is a valid MAM.
    """
    report: list[Violation] = []
    for var in graph.variables:
        if not isinstance(var.kind, VariableKind):
            report.append(Violation(1, var.id, None, f"unknown kind {var.kind!r}"))
        elif var.kind is not VariableKind.ATTENTION and var.endpoints is not None:
            report.append(Violation(1, var.id, None, "only attention variables have endpoints"))

    for var in graph.variables:
        if var.kind is not VariableKind.ATTENTION:
            continue
        ends = var.endpoints
        if ends is None or len(set(ends)) != 2:
            report.append(Violation(2, var.id, None, "attention variable needs two distinct endpoints"))
            continue
        bad = [u for u in ends if not 0 <= u < graph.n_variables or not graph.variables[u].is_regular]
        if bad:
            report.append(Violation(2, var.id, None, f"endpoints {bad} are not regular variables"))
            continue
        neighbors = graph.psi_neighbors(var.id)
        missing = [u for u in ends if u not in neighbors]
        if missing:
            report.append(Violation(2, var.id, None, f"not psi-connected to endpoints {missing}"))
        for f in graph.var_factors[var.id]:
            scope = set(graph.factors[f].scope)
            hits = sum(u in scope for u in ends)
            if hits != 1:
                report.append(
                    Violation(3, var.id, f, f"factor touches {hits} endpoints of the attention variable")
                )
    return report


# --- JSON interchange --------------------------------------------------------


def _enc(x: float):
    if x == NEG_INF:
        return "-inf"
    if math.isnan(x) or math.isinf(x):
        raise ValueError(f"cannot encode {x}")
    return x


def _dec(x) -> float:
    if isinstance(x, str):
        if x == "-inf":
            return NEG_INF
        raise ValueError(f"unexpected string {x!r} where a number was expected")
    return float(x)


def factor_to_dict(fac: FactorSpec) -> dict[str, Any]:
    if isinstance(fac, Unary):
        return {"type": "unary", "var": fac.var, "log_pot": [_enc(v) for v in fac.log_pot]}
    if isinstance(fac, Table):
        return {"type": "table", "vars": list(fac.vars), "log_pots": [_enc(v) for v in fac.log_pots]}
    if isinstance(fac, MamHofSpec):
        return {
            "type": "mam_hof",
            "part_var": fac.part_var,
            "groups": [list(g) for g in fac.groups],
            "patterns": [list(p) for p in fac.patterns],
            "potentials": [_enc(u) for u in fac.potentials],
        }
    if isinstance(fac, OrFactorSpec):
        return {
            "type": "or",
            "pixel_var": fac.pixel_var,
            "parents": list(fac.parents),
            "log_pi01": _enc(fac.log_pi01),
            "log_pi10": _enc(fac.log_pi10),
        }
    raise TypeError(type(fac).__name__)


def factor_from_dict(d: dict[str, Any]) -> FactorSpec:
    kind = d["type"]
    if kind == "unary":
        return Unary(int(d["var"]), tuple(_dec(v) for v in d["log_pot"]))
    if kind == "table":
        return Table(tuple(d["vars"]), tuple(_dec(v) for v in d["log_pots"]))
    if kind == "mam_hof":
        return MamHofSpec(
            int(d["part_var"]),
            tuple(tuple(g) for g in d["groups"]),
            tuple(tuple(p) for p in d["patterns"]),
            tuple(_dec(u) for u in d["potentials"]),
        )
    if kind == "or":
        return OrFactorSpec(int(d["pixel_var"]), tuple(d["parents"]), _dec(d["log_pi01"]), _dec(d["log_pi10"]))
    raise ValueError(f"unknown factor type {kind!r}")


def graph_to_dict(graph: FactorGraph) -> dict[str, Any]:
    variables = []
    for v in graph.variables:
        entry: dict[str, Any] = {"id": v.id, "kind": v.kind.value, "label": v.label}
        if v.endpoints is not None:
            entry["endpoints"] = list(v.endpoints)
        variables.append(entry)
    return {
        "format_version": FORMAT_VERSION,
        "variables": variables,
        "factors": [factor_to_dict(f) for f in graph.factors],
    }


def graph_from_dict(d: dict[str, Any]) -> FactorGraph:
    version = d.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {version}")
    variables = [
        Variable(int(v["id"]), VariableKind(v["kind"]), v.get("label", ""),
                 tuple(v["endpoints"]) if v.get("endpoints") is not None else None)
        for v in d.get("variables", [])
    ]
    variables.sort(key=lambda v: v.id)
    return make_graph(variables, [factor_from_dict(f) for f in d.get("factors", [])])


def dumps(graph: FactorGraph, **kwargs) -> str:
    return json.dumps(graph_to_dict(graph), **kwargs)


def loads(text: str) -> FactorGraph:
    return graph_from_dict(json.loads(text))


def save(graph: FactorGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(graph, indent=1))
        fh.write("\n")


def load(path) -> FactorGraph:
    with open(path) as fh:
        return loads(fh.read())

