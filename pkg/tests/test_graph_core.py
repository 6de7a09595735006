from __future__ import annotations

import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mam import graph as graph_io
from mam.factors import NEG_INF, MamHofSpec, OrFactorSpec, Table, Unary, log_potential
from mam.graph import GraphBuilder, GraphError, VariableKind, validate_mam_constraints
from mam.models import build_gene_network_demo, build_toy_grid, ids_by_label
from mam.sparsifier import line_example

from .conftest import tree_graphs


def test_gene_network_is_a_valid_mam():
    g = build_gene_network_demo()
    kinds = [v.kind for v in g.variables]
    assert kinds.count(VariableKind.PART) == 4
    assert kinds.count(VariableKind.ATTENTION) == 2
    assert g.n_factors == 4
    assert validate_mam_constraints(g) == []


def test_no_attention_variables_is_vacuously_valid():
    b = GraphBuilder()
    x, y = b.add_variable(VariableKind.PART), b.add_variable(VariableKind.PART)
    b.add_factor(Table((x, y), (0.0, -1.0, -1.0, 0.0)))
    assert validate_mam_constraints(b.build()) == []


def test_attention_in_factor_without_its_endpoint_is_reported():
    b = GraphBuilder()
    a_ = b.add_variable(VariableKind.PART, "X_A")
    b_ = b.add_variable(VariableKind.PART, "X_B")
    att = b.add_variable(VariableKind.ATTENTION, "a_AB", endpoints=(a_, b_))
    b.add_factor(Table((a_, att), (0.0, NEG_INF, 0.0, 0.0)))
    b.add_factor(Table((b_, att), (0.0, NEG_INF, 0.0, 0.0)))
    b.add_factor(Unary(att, (0.0, -1.0)))  # touches a_AB and no regular variable
    report = validate_mam_constraints(b.build())
    assert [v.constraint for v in report] == [3]
    assert report[0].variable == att and report[0].factor == 2


def test_builders_in_this_repo_produce_valid_mams():
    for g in (build_gene_network_demo(), build_toy_grid(), line_example(2).graph, line_example(3).graph):
        assert validate_mam_constraints(g) == []


def test_gene_factor_one_states():
    g = build_gene_network_demo()
    ids = ids_by_label(g)
    f1 = g.factors[0]
    assert set(f1.scope) == {ids["X_A"], ids["X_C"], ids["a_AB"], ids["a_AD"]}
    # X_A on, X_C off: A promotes B through a_AB
    assert log_potential(f1, {ids["X_A"], ids["a_AB"]}) == 0.0
    assert log_potential(f1, {ids["X_A"], ids["a_AD"]}) == NEG_INF
    finite = sum(v == 0.0 for v in f1.log_pots)
    assert finite == 4


def test_gene_potentials_are_configurable():
    g = build_gene_network_demo(promote=-3.0, corepress=-2.0)
    pots = {p for f in g.factors[1:] for p in f.log_pots}
    assert -3.0 in pots and -2.0 in pots


def test_table_index_is_big_endian():
    t = Table((4, 7, 9), tuple(float(i) for i in range(8)))
    assert t.index_of((1, 0, 0)) == 4
    assert log_potential(t, {4, 9}) == 5.0


def test_table_size_must_match_scope():
    with pytest.raises(ValueError):
        Table((0, 1), (0.0, 0.0, 0.0))


def test_factor_referencing_unknown_variable_is_rejected():
    b = GraphBuilder()
    b.add_variable(VariableKind.PART)
    b.add_factor(Unary(3))
    with pytest.raises(GraphError):
        b.build()


def test_json_encodes_neg_inf_and_version():
    g = build_gene_network_demo()
    doc = json.loads(graph_io.dumps(g))
    assert doc["format_version"] == graph_io.FORMAT_VERSION
    assert {f["type"] for f in doc["factors"]} == {"table"}
    assert "-inf" in doc["factors"][0]["log_pots"]


def test_round_trip_of_every_factor_kind(tmp_path):
    for g in (build_toy_grid(), line_example(2).graph, build_gene_network_demo()):
        path = tmp_path / "g.json"
        graph_io.save(g, path)
        assert graph_io.load(path).structurally_equal(g)
    tags = {f["type"] for f in graph_io.graph_to_dict(build_toy_grid())["factors"]}
    assert tags == {"mam_hof"}
    tags = {f["type"] for f in graph_io.graph_to_dict(line_example(2).graph)["factors"]}
    assert "or" in tags


@given(tree_graphs())
def test_round_trip_property(g):
    assert graph_io.loads(graph_io.dumps(g)).structurally_equal(g)


def test_unknown_format_version_is_rejected():
    doc = graph_io.graph_to_dict(build_gene_network_demo())
    doc["format_version"] = 99
    with pytest.raises(ValueError):
        graph_io.graph_from_dict(doc)


@given(st.floats(-5, 5, allow_nan=False))
def test_neg_inf_sentinel_absorbs(x):
    # sentinel + anything = sentinel, max(sentinel, x) = x
    assert NEG_INF + x == NEG_INF
    assert max(NEG_INF, x) == x
    assert not math.isnan(NEG_INF + x)


def test_attention_label_records_endpoints():
    g = build_toy_grid()
    for v in g.variables:
        if v.kind is VariableKind.ATTENTION:
            assert v.endpoints is not None and len(v.endpoints) == 2
    spec = g.factors[0]
    assert isinstance(spec, MamHofSpec)
    assert isinstance(OrFactorSpec.from_probs(0, (1, 2), 0.1, 0.0).log_pi10, float)
