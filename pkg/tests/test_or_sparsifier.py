from __future__ import annotations

import math
import warnings
from itertools import product

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from mam.bp import map_score
from mam.factors import NEG_INF, OrFactorSpec
from mam.oracle import brute_force_map, exact_max_product_messages
from mam.orfactor import or_factor_messages, or_potential
from mam.sparsifier import (
    LearnParams,
    PartLearner,
    PartShape,
    Sparsifier,
    SparsifyParams,
    build_sparsifier,
    learn_parts,
    line_example,
    sparsify,
)

from .conftest import messages, or_specs

SEGMENT = PartShape(0, ((0, -1), (0, 0), (0, 1)))
LINE_OPTIMA = ({1, 4}, {2, 4}, {2, 5})  # 1-based placement indices


def line_params(pi=0.3, pi10=0.05, pi01=0.1, **kw):
    return SparsifyParams(pi01=pi01, pi10=pi10, part_prior=math.log(pi), boundary="clip", **kw)


def one_based(placements):
    return {p.col + 1 for p in placements}


# --- OR factor ----------------------------------------------------------------


def test_or_potential_table():
    spec = OrFactorSpec.from_probs(0, (1, 2), 0.1, 0.2)
    assert or_potential(spec, {0, 2}) == 0.0
    assert or_potential(spec, {1}) == math.log(0.1)
    assert or_potential(spec, {0}) == math.log(0.2)
    assert or_potential(spec, set()) == 0.0


def test_or_pi10_zero_forbids_parentless_pixels():
    spec = OrFactorSpec.from_probs(0, (1,), 0.1, 0.0)
    assert spec.log_pi10 == NEG_INF
    assert or_potential(spec, {0}) == NEG_INF


@pytest.mark.parametrize("pi", [0.5, 0.7])
def test_or_leaks_must_be_below_half(pi):
    with pytest.raises(ValueError):
        OrFactorSpec.from_probs(0, (1,), pi, 0.1)


def test_single_parent_zero_messages():
    spec = OrFactorSpec.from_probs(0, (1,), 0.1, 0.1)
    inc = {0: 0.0, 1: 0.0}
    assert or_factor_messages(spec, inc) == pytest.approx(exact_max_product_messages(spec, inc), abs=1e-12)


def test_strongly_negative_parents_leave_the_leak():
    spec = OrFactorSpec.from_probs(0, (1, 2, 3), 0.1, 0.05)
    out = or_factor_messages(spec, {0: 0.0, 1: -1e6, 2: -1e6, 3: -1e6})
    assert out[0] == pytest.approx(math.log(0.05))


def test_two_parent_hand_values():
    # enumerated by hand over the 8 rows with pi01 = pi10 = 0.1:
    # to pixel max(-1, log .1) - max(0, log .1 - 1) = -1
    # to parent 1: max(2, log .1) - max(-1, log .1 - 3, log .1 + 2, 0) = 2
    # to parent 2: max(2, log .1) - max(1, 0, log .1 + 2) = 1
    spec = OrFactorSpec.from_probs(0, (1, 2), 0.1, 0.1)
    inc = {0: 2.0, 1: -1.0, 2: -3.0}
    expected = {0: -1.0, 1: 2.0, 2: 1.0}
    assert or_factor_messages(spec, inc) == pytest.approx(expected, abs=1e-12)
    assert exact_max_product_messages(spec, inc) == pytest.approx(expected, abs=1e-12)
    zero = {v: 0.0 for v in spec.scope}
    assert exact_max_product_messages(spec, zero) == pytest.approx({0: 0.0, 1: 0.0, 2: 0.0})


@given(or_specs(), st.data())
def test_or_messages_match_oracle(spec, data):
    inc = {v: data.draw(messages) for v in spec.scope}
    fast = or_factor_messages(spec, inc)
    slow = exact_max_product_messages(spec, inc)
    for v in spec.scope:
        assert abs(fast[v] - slow[v]) <= 1e-9


def test_or_missing_incoming():
    with pytest.raises(KeyError):
        or_factor_messages(OrFactorSpec.from_probs(0, (1, 2), 0.1, 0.1), {0: 0.0, 1: 0.0})


@given(st.integers(1, 5))
def test_explaining_away_at_zero_leak(k):
    spec = OrFactorSpec.from_probs(0, range(1, k + 1), 0.0, 0.0)
    for states in product((0, 1), repeat=k + 1):
        on = {v for v, s in zip(spec.scope, states) if s}
        if or_potential(spec, on) > NEG_INF:
            assert (0 in on) == bool(on - {0})


# --- sparsifier construction --------------------------------------------------


def test_line_graph_shape():
    sg = line_example(2)
    ors = [f for f in sg.graph.factors if isinstance(f, OrFactorSpec)]
    assert sg.pixel_ids.size == 5 and len(sg.part_ids) == 5
    assert [len(f.parents) for f in ors] == [2, 3, 3, 3, 2]


def test_unit_part_gives_single_parents():
    sg = build_sparsifier((4, 3), [PartShape(0, ((0, 0),))])
    ors = [f for f in sg.graph.factors if isinstance(f, OrFactorSpec)]
    assert len(ors) == 12 and all(len(f.parents) == 1 for f in ors)


def test_square_part_on_three_by_three():
    sg = build_sparsifier((3, 3), [PartShape(0, ((0, 0), (0, 1), (1, 0), (1, 1)))])
    assert len(sg.part_ids) == 4
    centre = int(sg.pixel_ids[1, 1])
    (f,) = [f for f in sg.graph.factors if isinstance(f, OrFactorSpec) and f.pixel_var == centre]
    assert len(f.parents) == 4


def test_construction_errors():
    with pytest.raises(ValueError):
        build_sparsifier((3, 3), [])
    with pytest.raises(ValueError):
        build_sparsifier((2, 2), [PartShape(0, tuple((r, 0) for r in range(3)))])
    # empty shapes exist (degenerate learning results) but never enter a catalog
    with pytest.raises(ValueError):
        build_sparsifier((3, 3), [PartShape(0, ())])


# --- sparsify -----------------------------------------------------------------


def test_blank_image_sparsifies_to_nothing():
    res = sparsify(np.zeros((1, 5), dtype=np.uint8), [SEGMENT], line_params())
    assert res.placements == []


def test_line_k2_reaches_an_optimum_exactly():
    res = sparsify(np.ones((1, 5), dtype=np.uint8), [SEGMENT], line_params())
    assert one_based(res.placements) in LINE_OPTIMA
    assert res.score == 2 * math.log(0.3)


def oracle_line_optimum(K, pi=0.3, pi10=0.05, pi01=0.1):
    sg = line_example(K, pi=pi, pi10=pi10, pi01=pi01)
    ev = sg.pixel_evidence(np.ones((1, 3 * K - 1), dtype=np.uint8))
    best = brute_force_map(sg.graph, ev)
    return sg, best.assignment, map_score(sg.graph, best.assignment)


def test_line_k3_matches_oracle():
    _, x, opt = oracle_line_optimum(3)
    res = sparsify(np.ones((1, 8), dtype=np.uint8), [SEGMENT], line_params())
    assert len(res.placements) == 3
    assert res.score == opt


@pytest.mark.parametrize("K", [2, 3])
def test_more_permissive_prior_never_removes_parts(K):
    counts = []
    for pi in (0.01, 0.05, 0.1, 0.2, 0.3, 0.45):
        sg, x, _ = oracle_line_optimum(K, pi=pi, pi10=0.005)
        counts.append(int(x[sg.part_ids].sum()))
    assert counts == sorted(counts)


@given(st.lists(st.integers(0, 1), min_size=12, max_size=12), st.integers(0, 100))
def test_sparsify_never_worse_than_all_off(bits, seed):
    img = np.array(bits, dtype=np.uint8).reshape(3, 4)
    shapes = [PartShape(0, ((0, 0), (0, 1))), PartShape(1, ((0, 0), (1, 0)))]
    params = SparsifyParams(pi01=0.1, pi10=0.05, part_prior=math.log(0.3), restarts=2)
    res = sparsify(img, shapes, params, seed=seed)
    off = np.zeros(res.model.graph.n_variables, dtype=np.int8)
    off[res.model.pixel_ids.ravel()] = img.ravel()
    assert res.score >= map_score(res.model.graph, off)


def test_sparsify_is_seeded():
    img = np.zeros((8, 8), dtype=np.uint8)
    img[2, 1:7] = 1
    img[3:7, 5] = 1
    cat = [PartShape(0, ((0, -1), (0, 0), (0, 1))), PartShape(1, ((-1, 0), (0, 0), (1, 0)))]
    a = sparsify(img, cat, seed=3)
    b = sparsify(img, cat, seed=3)
    assert a.placements == b.placements and a.score == b.score


# --- part learning ------------------------------------------------------------


def bar_images():
    imgs = []
    for spots in ([(0, 1), (2, 6)], [(4, 3), (1, 8)]):
        img = np.zeros((8, 11), dtype=np.uint8)
        for r, c in spots:
            img[r:r + 3, c] = 1
        imgs.append(img)
    return imgs


def normalized(shape):
    r0 = min(r for r, _ in shape.offsets)
    c0 = min(c for _, c in shape.offsets)
    return sorted((r - r0, c - c0) for r, c in shape.offsets)


def test_learns_the_bar():
    res = learn_parts(bar_images(), 1, (3, 3), LearnParams(restarts=1, part_prior=-5.0))
    assert normalized(res.catalog[0]) == [(0, 0), (1, 0), (2, 0)]
    # the learned shape reproduces the images with no leak: the score is the prior alone
    cat = [res.catalog[0].centered()]
    for img in bar_images():
        out = sparsify(img, cat, SparsifyParams(restarts=2, part_prior=-5.0))
        assert out.explained_fraction(img) == 1.0
        assert out.score == 2 * -5.0


def test_blank_images_learn_an_empty_shape():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = learn_parts([np.zeros((5, 5), dtype=np.uint8)], 1, (3, 3), LearnParams(restarts=1))
    assert res.degenerate and res.empty_types == [0]
    assert res.catalog[0].is_empty
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)


# --- estimators ---------------------------------------------------------------


def test_sparsifier_estimator():
    est = Sparsifier(catalog=[SEGMENT], pi01=0.1, pi10=0.05, part_prior=math.log(0.3), restarts=3)
    assert clone(est).get_params()["pi10"] == 0.05
    img = np.zeros((3, 9), dtype=np.uint8)
    img[1, 1:7] = 1
    (placements,) = est.fit().transform([img])
    assert placements and est.score([img]) == 1.0


def test_part_learner_estimator():
    est = PartLearner(n_parts=1, patch_dims=(3, 3), part_prior=-5.0, learn_restarts=1, restarts=2)
    assert set(clone(est).get_params()) >= {"n_parts", "patch_dims", "seed"}
    est.fit(bar_images())
    assert len(est.catalog_) == 1
    assert est.score(bar_images()) == 1.0
