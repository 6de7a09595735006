from __future__ import annotations

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from mam.factors import MamHofSpec, OrFactorSpec, Table, Unary
from mam.graph import GraphBuilder, VariableKind

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"

# log-odds magnitudes large enough to matter, small enough to keep sums exact-ish
messages = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


@st.composite
def hof_specs(draw, max_groups=3, max_size=3, max_patterns=4):
    sizes = draw(st.lists(st.integers(1, max_size), min_size=1, max_size=max_groups))
    ids = iter(range(1, 1 + sum(sizes)))
    groups = tuple(tuple(next(ids) for _ in range(k)) for k in sizes)
    m = len(groups)
    nonzero = [tuple((i >> k) & 1 for k in range(m)) for i in range(1, 2 ** m)]
    extra = draw(st.lists(st.sampled_from(nonzero), unique=True, max_size=max_patterns - 1))
    patterns = [(0,) * m] + extra
    pots = draw(st.lists(st.floats(-5, 5, allow_nan=False), min_size=len(patterns), max_size=len(patterns)))
    return MamHofSpec(0, groups, tuple(patterns), tuple(pots))


@st.composite
def or_specs(draw, max_parents=6):
    k = draw(st.integers(1, max_parents))
    pi01 = draw(st.floats(1e-4, 0.49))
    pi10 = draw(st.one_of(st.just(0.0), st.floats(1e-6, 0.49)))
    return OrFactorSpec.from_probs(0, range(1, k + 1), pi01, pi10)


def incoming_for(draw, scope):
    return {v: draw(messages) for v in scope}


@st.composite
def tree_graphs(draw, max_vars=16):
    """Random tree-structured graph with unary, pairwise and small table factors."""
    n = draw(st.integers(1, max_vars))
    b = GraphBuilder()
    for _ in range(n):
        b.add_variable(VariableKind.PART)
    pot = st.one_of(st.floats(-4, 4, allow_nan=False), st.just(-math.inf))
    # a random tree: variable i > 0 hangs off some earlier variable
    for i in range(1, n):
        parent = draw(st.integers(0, i - 1))
        table = draw(st.lists(pot, min_size=4, max_size=4))
        if all(t == -math.inf for t in table):
            table[0] = 0.0
        b.add_factor(Table((parent, i), tuple(table)))
    for i in range(n):
        if draw(st.booleans()):
            b.add_factor(Unary(i, (0.0, draw(st.floats(-4, 4, allow_nan=False)))))
    return b.build()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])


def random_factor_tree(rng: np.random.Generator, max_vars: int = 16):
    """Tree-structured graph mixing unary, table, MAM and OR factors.

    Every new factor touches exactly one existing variable plus fresh ones,
    so the factor graph stays acyclic.
    """
    b = GraphBuilder()
    b.add_variable(VariableKind.PART)
    n = 1
    while n < max_vars:
        hook = int(rng.integers(n))
        room = max_vars - n
        kind = rng.choice(["unary", "table", "hof", "or"])
        if kind == "unary":
            b.add_factor(Unary(hook, (0.0, float(rng.normal(0, 2)))))
            continue
        k = int(rng.integers(1, min(3, room) + 1))
        fresh = [b.add_variable(VariableKind.PART) for _ in range(k)]
        n += k
        if kind == "table":
            pots = rng.normal(0, 2, 2 ** (k + 1))
            pots[rng.random(pots.size) < 0.2] = -math.inf
            pots[0] = max(pots[0], 0.0)
            b.add_factor(Table((hook, *fresh), tuple(pots)))
        elif kind == "or":
            pi01, pi10 = rng.uniform(0.01, 0.45, 2)
            if rng.random() < 0.5:
                b.add_factor(OrFactorSpec.from_probs(hook, fresh, pi01, pi10))
            else:
                b.add_factor(OrFactorSpec.from_probs(fresh[0], [hook] + fresh[1:], pi01, pi10))
        else:
            members = [hook] + fresh
            part = members.pop(int(rng.integers(len(members))))
            if not members:
                members = [b.add_variable(VariableKind.PART)]
                n += 1
            split = int(rng.integers(1, len(members) + 1))
            groups = [g for g in (members[:split], members[split:]) if g]
            m = len(groups)
            nonzero = [tuple((i >> j) & 1 for j in range(m)) for i in range(1, 2 ** m)]
            pick = rng.permutation(len(nonzero))[: int(rng.integers(1, len(nonzero) + 1))]
            patterns = [(0,) * m] + [nonzero[i] for i in sorted(pick)]
            b.add_factor(MamHofSpec(part, groups, patterns, tuple(rng.normal(0, 2, len(patterns)))))
    # continuous evidence everywhere makes the optimum unique almost surely
    for v in range(n):
        b.add_factor(Unary(v, (0.0, float(rng.normal(0, 2)))))
    return b.build()
