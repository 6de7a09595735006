"""Acceptance criteria, one test each.

Every test records a ``criterion n <name>: PASS/FAIL (detail)`` line in
:data:`RESULTS`, prints it, and then asserts. The lines are repeated in
the pytest terminal summary.
"""

from __future__ import annotations

import json
import math
import time
from itertools import product

import numpy as np
import pytest

from mam.bp import decode, map_score, run_mpbp
from mam.cabc import (
    CabcClassifier,
    ElasticGraph,
    generate_cabc_dataset,
    get_edges,
    merge_mams,
    pair_count,
    refine_accumulator_property,
    training_letters,
)
from mam.cli import main
from mam.factors import MamHofSpec, OrFactorSpec
from mam.hof import mam_hof_messages
from mam.models import build_gene_network_demo, build_toy_grid, ids_by_label, seg_label
from mam.oracle import brute_force_map, conditional_mutual_information, exact_max_product_messages, joint_distribution
from mam.orfactor import or_factor_messages
from mam.pathfinder import GeneratorParams, PathfinderClassifier, generate_dataset
from mam.sparsifier import PartShape, SparsifyParams, line_example, sparsify

from .checkers import toy_grid_configurations
from .conftest import FIXTURES, random_factor_tree

RESULTS: dict[int, str] = {}


def record(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {n} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS[n] = line
    print(line)
    assert ok, line


# --- 1 ------------------------------------------------------------------------------


def test_criterion_1_line_optimum():
    t0 = time.perf_counter()
    seg = PartShape(0, ((0, -1), (0, 0), (0, 1)))
    optima = ({1, 4}, {2, 4}, {2, 5})
    problems = []
    for pi, pi10 in [(0.3, 0.05), (0.1, 0.01), (0.45, 0.2), (0.9, 0.4)]:
        params = SparsifyParams(pi01=0.1, pi10=pi10, part_prior=math.log(pi), boundary="clip")
        res = sparsify(np.ones((1, 5), dtype=np.uint8), [seg], params)
        on = {p.col + 1 for p in res.placements}
        sg = line_example(2, pi=pi, pi10=pi10)
        off = np.zeros(sg.graph.n_variables, dtype=np.int8)
        off[sg.pixel_ids.ravel()] = 1
        if on not in optima:
            problems.append(f"pi={pi}: {sorted(on)}")
        if res.score != 2 * math.log(pi):
            problems.append(f"pi={pi}: score {res.score!r}")
        if map_score(sg.graph, off) != 5 * math.log(pi10):
            problems.append(f"pi10={pi10}: all-OFF {map_score(sg.graph, off)!r}")
    dt = time.perf_counter() - t0
    record(1, "line optimum", not problems and dt < 1.0, "; ".join(problems) or f"4 settings exact in {dt:.2f}s")


# --- 2 ------------------------------------------------------------------------------


def random_hof(rng):
    sizes = rng.integers(1, 4, size=int(rng.integers(1, 4)))
    ids = iter(range(1, 1 + int(sizes.sum())))
    groups = tuple(tuple(next(ids) for _ in range(k)) for k in sizes)
    m = len(groups)
    nonzero = [tuple((i >> k) & 1 for k in range(m)) for i in range(1, 2 ** m)]
    extra = rng.permutation(len(nonzero))[: int(rng.integers(0, min(3, len(nonzero)) + 1))]
    patterns = ((0,) * m,) + tuple(nonzero[i] for i in extra)
    return MamHofSpec(0, groups, patterns, tuple(rng.uniform(-5, 5, size=len(patterns)).tolist()))


def random_or(rng):
    k = int(rng.integers(1, 7))
    pi10 = 0.0 if rng.random() < 0.2 else float(rng.uniform(1e-6, 0.49))
    return OrFactorSpec.from_probs(0, range(1, k + 1), float(rng.uniform(1e-4, 0.49)), pi10)


def worst_gap(spec, fast, rng, n):
    worst = 0.0
    for _ in range(n):
        inc = {v: float(m) for v, m in zip(spec.scope, rng.uniform(-20, 20, size=len(spec.scope)))}
        a, b = fast(spec, inc), exact_max_product_messages(spec, inc)
        worst = max(worst, max(abs(a[v] - b[v]) for v in spec.scope))
    return worst


def test_criterion_2_message_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    hof = max(worst_gap(random_hof(rng), mam_hof_messages, rng, 3) for _ in range(1000))
    orr = max(worst_gap(random_or(rng), or_factor_messages, rng, 3) for _ in range(1000))
    dt = time.perf_counter() - t0
    ok = hof <= 1e-9 and orr <= 1e-9 and dt < 30
    record(2, "message equivalence", ok, f"1000 HOF max gap {hof:.1e}, 1000 OR max gap {orr:.1e}, {dt:.1f}s")


# --- 3 ------------------------------------------------------------------------------


def test_criterion_3_toy_grid():
    g = build_toy_grid()
    d = joint_distribution(g)
    support = {tuple(int(v) for v in s) for s in d.states}
    expected = toy_grid_configurations(g)
    uniform = bool(np.allclose(d.probs, 1.0 / len(expected), rtol=0, atol=1e-12))
    ids = ids_by_label(g)
    x, y = ids[seg_label(1, 2)], ids[seg_label(4, 1)]
    others = [ids[seg_label(i, j)] for i in range(1, 5) for j in (1, 2)]
    others = [v for v in others if v not in (x, y)]
    cmi = conditional_mutual_information(d, x, y, given=others)
    ok = support == expected and uniform and cmi > 1e-12
    record(3, "toy grid", ok, f"{len(support)} states, checker {len(expected)}, uniform={uniform}, "
                              f"I(v12;v41|other segments)={cmi:.4f}")


# --- 4 ------------------------------------------------------------------------------


def test_criterion_4_gene_network_csi():
    grid = [math.log(p) for p in (0.01, 0.1, 0.3, 0.6, 0.9)]
    worst_ab = worst_ad = worst_ab_rest = worst_ad_rest = 0.0
    for promote, corepress in product(grid, grid):
        g = build_gene_network_demo(promote=promote, corepress=corepress)
        d = joint_distribution(g)
        ids = ids_by_label(g)
        a, b, c, dd = (ids[k] for k in ("X_A", "X_B", "X_C", "X_D"))
        worst_ab = max(worst_ab, conditional_mutual_information(d, a, b, {c: 1}))
        worst_ad = max(worst_ad, conditional_mutual_information(d, a, dd, {c: 0}))
        worst_ab_rest = max(worst_ab_rest, conditional_mutual_information(d, a, b, {c: 1}, given=[dd]))
        worst_ad_rest = max(worst_ad_rest, conditional_mutual_information(d, a, dd, {c: 0}, given=[b]))
    ok = worst_ab <= 1e-12 and worst_ad <= 1e-12
    record(4, "gene-network CSI", ok,
           f"25 settings: max I(A;B|C=1)={worst_ab:.3g}, max I(A;D|C=0)={worst_ad:.3g}; "
           f"with the remaining gene fixed {worst_ab_rest:.1g} and {worst_ad_rest:.1g}")


# --- 5 ------------------------------------------------------------------------------


def test_criterion_5_tree_exactness():
    rng = np.random.default_rng(5)
    misses = []
    for k in range(200):
        g = random_factor_tree(rng, max_vars=16)
        msgs, _ = run_mpbp(g)
        x = decode(g, msgs)
        best = brute_force_map(g)
        if map_score(g, x) != best.score:
            misses.append(k)
    record(5, "tree exactness", not misses, f"{200 - len(misses)}/200 exact" + (f", misses {misses[:5]}" if misses else ""))


# --- 6 ------------------------------------------------------------------------------


def test_criterion_6_edge_construction():
    fixtures = get_edges([(0, 0), (0, 14)]) == {(0, 1): 2} and \
        get_edges([(0, 0), (0, 7), (0, 14)]) == {(0, 1): 1, (1, 2): 1}
    rng = np.random.default_rng(6)
    bound = determinism = True
    for _ in range(100):
        pts = [tuple(p) for p in rng.integers(0, 120, size=(int(rng.integers(2, 20)), 2)).tolist()]
        trace = []
        edges = get_edges(pts, trace=trace)
        bound &= refine_accumulator_property(trace)
        again = get_edges(pts)
        determinism &= json.dumps(sorted(edges.items())) == json.dumps(sorted(again.items()))
    ok = fixtures and bound and determinism
    record(6, "edge construction", ok, f"fixtures={fixtures}, accumulator bound={bound}, deterministic={determinism}")


# --- 7 ------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_pathfinder():
    t0 = time.perf_counter()
    clf = PathfinderClassifier(max_contours=200).fit(generate_dataset(40, seed=100))
    acc = {}
    for length in (6, 10):
        test = generate_dataset(200, GeneratorParams(target_len_range=(length, length)), seed=999)
        acc[length] = float(np.mean(clf.predict(test) == np.array([i.label for i in test])))
    dt = time.perf_counter() - t0
    drop = acc[6] - acc[10]
    ok = acc[6] >= 0.90 and drop <= 0.05 and dt < 600
    record(7, "pathfinder", ok, f"accuracy {acc[6]:.3f} at length 6, {acc[10]:.3f} at length 10, {dt:.0f}s")


# --- 8 ------------------------------------------------------------------------------


def exactly_one_letter(mam, graphs) -> bool:
    d = joint_distribution(mam.graph)
    for s in d.states:
        if not s[mam.top]:
            continue
        on = [(n, v, tuple(frag.locations[v][k].tolist()))
              for n, frag in enumerate(mam.fragments)
              for v, ids in enumerate(frag.location_ids)
              for k, i in enumerate(ids.tolist()) if s[i]]
        letters = {n for n, _, _ in on}
        if len(letters) != 1:
            return False
        g = graphs[letters.pop()]
        where = {v: loc for _, v, loc in on}
        if sorted(v for _, v, _ in on) != list(range(len(g.vertices))):
            return False
        for (u, v), gamma in g.edges.items():
            ref = np.subtract(g.vertices[v], g.vertices[u])
            if np.abs(np.subtract(where[v], where[u]) - ref).max() > gamma:
                return False
    return True


@pytest.mark.slow
def test_criterion_8_cabc():
    t0 = time.perf_counter()
    tiny = [
        ([ElasticGraph([(1, 1)], {}), ElasticGraph([(5, 5)], {})], 2),
        ([ElasticGraph([(1, 1)], {}), ElasticGraph([(4, 1), (4, 6)], {(0, 1): 1})], 1),
    ]
    oracle_ok = True
    for graphs, eta in tiny:
        mam = merge_mams(graphs, eta, (12, 12))
        oracle_ok &= mam.graph.n_variables <= 20 and exactly_one_letter(mam, graphs)
    pairs = pair_count(140)
    clf = CabcClassifier().fit(training_letters(3, seed=5))
    test = generate_cabc_dataset(100, seed=77)
    acc = float(np.mean(clf.predict(test) == np.array([i.label for i in test])))
    dt = time.perf_counter() - t0
    ok = acc >= 0.85 and oracle_ok and pairs == 9730 and dt < 900
    record(8, "cABC", ok, f"accuracy {acc:.2f} on 100, merged-MAM oracle={oracle_ok}, pairs(140)={pairs}, {dt:.0f}s")


# --- 9 ------------------------------------------------------------------------------


def test_criterion_9_replay(tmp_path, capsys):
    pf, pf_model, cb, cb_letters, cb_model = (tmp_path / n for n in ("pf", "pfm", "cb", "cbl", "cbm"))
    commands = [
        ["solve", FIXTURES / "line_k2.json", "--evidence", FIXTURES / "line_k2_evidence.json"],
        ["verify", FIXTURES / "toy_grid.json"],
        ["verify", FIXTURES / "gene.json", "--csi", "X_A,X_B|X_C=1,X_D"],
        ["demo-gene-network", "--out", tmp_path / "gene.json"],
        ["pathfinder", "gen", "--n", "4", "--out", pf],
        ["pathfinder", "learn", "--data", pf, "--out", pf_model / "model.json", "--max-contours", "20"],
        ["pathfinder", "eval", "--data", pf, "--model", pf_model / "model.json", "--out", tmp_path / "pf_eval.json"],
        ["learn-parts", pf / "000000.pbm", pf / "000001.pbm", "--n-parts", "2", "--patch", "5", "5",
         "--out", tmp_path / "parts.json"],
        ["sparsify", pf / "000000.pbm", "--catalog", tmp_path / "parts.json", "--restarts", "2"],
        ["cabc", "gen", "--n", "2", "--out", cb],
        ["cabc", "gen", "--letters", "--n-per-letter", "1", "--out", cb_letters],
        ["cabc", "learn", "--data", cb_letters, "--out", cb_model],
        ["cabc", "eval", "--data", cb, "--model", cb_model / "model.json", "--out", tmp_path / "cb_eval.json"],
        ["cabc", "match", cb / "000000.pbm", "--model", cb_model / "model.json"],
    ]
    failures = []
    for k, cmd in enumerate(commands):
        man = tmp_path / f"manifest_{k}.json"
        code = main([str(c) for c in cmd] + ["--seed", "3", "--threads", "2", "--manifest", str(man)])
        capsys.readouterr()
        if code != 0:
            failures.append(f"{cmd[0]} exit {code}")
            continue
        for threads in (1, 4):
            main(["replay", str(man), "--threads", str(threads), "--json"])
            doc = json.loads(capsys.readouterr().out)
            if not doc.get("identical"):
                failures.append(f"{' '.join(map(str, cmd[:2]))} threads={threads}: {doc.get('mismatched')}")
    ok = not failures
    record(9, "replay determinism", ok, "; ".join(failures) or f"{len(commands)} commands x 2 thread counts identical")
