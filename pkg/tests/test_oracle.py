from __future__ import annotations

import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mam.bp import map_score
from mam.factors import MamHofSpec, OrFactorSpec, Table, Unary
from mam.graph import GraphBuilder, VariableKind
from mam.models import build_gene_network_demo, build_toy_grid, ids_by_label, seg_label
from mam.oracle import (
    BudgetExceeded,
    EnumerationBudget,
    InfeasibleModelError,
    brute_force_map,
    conditional_mutual_information,
    exact_max_product_messages,
    joint_distribution,
)
from mam.sparsifier import line_example

from .checkers import toy_grid_configurations
from .conftest import hof_specs, messages, random_factor_tree


def line_k2(pi=0.3):
    sg = line_example(2, pi=pi)
    return sg, sg.pixel_evidence(np.ones((1, 5), dtype=np.uint8))


def test_line_example_map_has_three_optima():
    sg, ev = line_k2()
    res = brute_force_map(sg.graph, ev)
    assert map_score(sg.graph, res.assignment) == 2 * math.log(0.3)
    assert not res.is_unique
    # lexicographic tie-break: variable 0 most significant, so {x2, x5} loses to {x1, x4}?
    on = {k + 1 for k, v in enumerate(sg.part_ids) if res.assignment[v]}
    assert on == {2, 5}


def test_empty_graph():
    g = GraphBuilder().build()
    res = brute_force_map(g)
    assert res.assignment.shape == (0,) and res.score == 0.0


def test_toy_grid_map_ties_at_zero():
    res = brute_force_map(build_toy_grid())
    assert res.score == 0.0 and not res.is_unique
    assert not res.assignment.any()


def test_single_unary_distribution():
    b = GraphBuilder()
    b.add_variable(VariableKind.PART)
    b.add_factor(Unary(0, (0.0, 0.0)))
    d = joint_distribution(b.build())
    assert d.marginal([0]) == pytest.approx({(0,): 0.5, (1,): 0.5})


def test_toy_grid_distribution_is_uniform_on_line_configurations():
    g = build_toy_grid()
    d = joint_distribution(g)
    support = {tuple(int(v) for v in s) for s in d.states}
    assert support == toy_grid_configurations(g)
    assert np.allclose(d.probs, 1.0 / len(support), rtol=0, atol=1e-12)


def test_toy_grid_pair_dependence():
    g = build_toy_grid()
    d = joint_distribution(g)
    ids = ids_by_label(g)
    x, y = ids[seg_label(1, 2)], ids[seg_label(4, 1)]
    segments = [ids[seg_label(i, j)] for i in range(1, 5) for j in (1, 2)]
    others = [s for s in segments if s not in (x, y)]
    assert conditional_mutual_information(d, x, y, given=others) > 1e-12
    # in the quoted context the two must agree
    ctx = {ids[seg_label(1, 1)]: 0, ids[seg_label(2, 2)]: 0, ids[seg_label(3, 1)]: 0,
           ids[seg_label(4, 2)]: 0, ids[seg_label(2, 1)]: 1, ids[seg_label(3, 2)]: 1}
    assert set(d.condition(ctx).marginal([x, y])) == {(0, 0), (1, 1)}


STRENGTHS = [math.log(p) for p in (0.01, 0.1, 0.3, 0.6, 0.9)]


@pytest.mark.parametrize("promote, corepress", list(product(STRENGTHS, STRENGTHS)))
def test_gene_network_csi(promote, corepress):
    g = build_gene_network_demo(promote=promote, corepress=corepress)
    d = joint_distribution(g)
    ids = ids_by_label(g)
    a, b_, c, dd = (ids[k] for k in ("X_A", "X_B", "X_C", "X_D"))
    # given every other gene, the edge vanishes in one context only
    assert conditional_mutual_information(d, a, b_, {c: 1}, given=[dd]) <= 1e-12
    assert conditional_mutual_information(d, a, dd, {c: 0}, given=[b_]) <= 1e-12
    assert conditional_mutual_information(d, a, b_, {c: 0}, given=[dd]) > 1e-9
    assert conditional_mutual_information(d, a, dd, {c: 1}, given=[b_]) > 1e-9


def test_gene_network_corepression_leaks_through_the_other_target():
    # with X_D marginalised, X_A -> a_AD -> X_D -| X_B keeps X_A and X_B dependent
    g = build_gene_network_demo()
    d = joint_distribution(g)
    ids = ids_by_label(g)
    assert conditional_mutual_information(d, ids["X_A"], ids["X_B"], {ids["X_C"]: 1}) > 1e-3
    flat = build_gene_network_demo(corepress=0.0)
    d0 = joint_distribution(flat)
    assert conditional_mutual_information(d0, ids["X_A"], ids["X_B"], {ids["X_C"]: 1}) <= 1e-12


def test_infeasible_model():
    b = GraphBuilder()
    b.add_variable(VariableKind.PART)
    b.add_factor(Unary(0, (-math.inf, -math.inf)))
    with pytest.raises(InfeasibleModelError):
        joint_distribution(b.build())


def test_budget():
    b = GraphBuilder()
    for _ in range(30):
        b.add_variable(VariableKind.PART)
    g = b.build()
    with pytest.raises(BudgetExceeded):
        brute_force_map(g)
    with pytest.raises(BudgetExceeded):
        brute_force_map(g, budget=EnumerationBudget(1 << 10))
    with pytest.raises(ValueError):
        EnumerationBudget(0)


def test_unary_message_is_its_log_odds():
    assert exact_max_product_messages(Unary(3, (0.5, -1.25)), {3: 7.0}) == {3: -1.75}


def test_scope_guard():
    spec = OrFactorSpec.from_probs(0, range(1, 30), 0.1, 0.1)
    with pytest.raises(BudgetExceeded):
        exact_max_product_messages(spec, {v: 0.0 for v in spec.scope})


@given(hof_specs(), st.data())
def test_messages_are_permutation_equivariant(spec, data):
    """Reordering a table's scope (and its entries) leaves messages unchanged."""
    scope = list(spec.scope)
    tab = Table.from_function(scope, lambda *s: _pot(spec, scope, s))
    perm = data.draw(st.permutations(scope))
    tab2 = Table.from_function(perm, lambda *s: _pot(spec, perm, s))
    inc = {v: data.draw(messages) for v in scope}
    a = exact_max_product_messages(tab, inc)
    b = exact_max_product_messages(tab2, inc)
    c = exact_max_product_messages(spec, inc)
    for v in scope:
        assert a[v] == pytest.approx(b[v], abs=1e-12)
        assert a[v] == pytest.approx(c[v], abs=1e-12)


def _pot(spec, order, states):
    from mam.factors import log_potential

    return log_potential(spec, {v for v, s in zip(order, states) if s})


@given(st.integers(0, 2 ** 32 - 1))
def test_map_dominates_explicit_assignments(seed):
    rng = np.random.default_rng(seed)
    g = random_factor_tree(rng, max_vars=8)
    best = brute_force_map(g)
    for x in product((0, 1), repeat=g.n_variables):
        assert map_score(g, np.array(x)) <= best.score
