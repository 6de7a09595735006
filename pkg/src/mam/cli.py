"""Command-line interface.

Every command takes a root ``--seed``; ``--json`` switches stdout to one
compact JSON document; ``--threads`` only sets the worker count of
per-instance maps and never changes results. ``--manifest PATH`` records
the run (arguments, input and output hashes, wall-clock) so that
``mam replay PATH`` can rerun it and check the outputs byte for byte.

Exit codes: 2 bad input (parse errors, missing files), 3 shape mismatch,
4 enumeration budget exceeded.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import redirect_stdout
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph as graph_io
from .bp import BpConfig, ShapeMismatchError, as_evidence, compile_graph, decode, map_score, run_mpbp
from .factors import NEG_INF, MamHofSpec, OrFactorSpec, Table, Unary
from .hof import mam_hof_messages
from .imageio import ImageFormatError, dumps_pbm, dumps_pgm, read_pbm
from .models import build_gene_network_demo, GeneNetworkParams, ids_by_label
from .oracle import (
    BudgetExceeded,
    EnumerationBudget,
    InfeasibleModelError,
    brute_force_map,
    conditional_mutual_information,
    exact_max_product_messages,
    joint_distribution,
)
from .orfactor import or_factor_messages

MANIFEST_VERSION = 1

EXIT_INPUT = 2
EXIT_SHAPE = 3
EXIT_BUDGET = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# --- run bookkeeping -----------------------------------------------------------------


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


@dataclass
class RunManifest:
    command: list[str]
    params: dict
    seed: int
    input_hashes: dict[str, str] = field(default_factory=dict)
    output_hashes: dict[str, str] = field(default_factory=dict)
    wall_clock_s: float = 0.0
    format_version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "command": self.command,
            "params": self.params,
            "seed": self.seed,
            "input_hashes": self.input_hashes,
            "output_hashes": self.output_hashes,
            "wall_clock_s": self.wall_clock_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        if d.get("format_version") != MANIFEST_VERSION:
            raise CliError(f"unsupported manifest format_version {d.get('format_version')}")
        return cls(list(d["command"]), dict(d.get("params", {})), int(d.get("seed", 0)),
                   dict(d.get("input_hashes", {})), dict(d.get("output_hashes", {})),
                   float(d.get("wall_clock_s", 0.0)))


class Run:
    """Per-invocation context: seeds, thread hint and file bookkeeping."""

    def __init__(self, args):
        self.args = args
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    @property
    def seed(self) -> int:
        return self.args.seed

    def read_text(self, path) -> str:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"no such file: {path}")
        data = p.read_bytes()
        self.inputs[str(path)] = sha256_bytes(data)
        return data.decode()

    def read_json(self, path):
        text = self.read_text(path)
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno} (char {exc.pos}): {exc.msg}")

    def read_pbm(self, path) -> np.ndarray:
        self.read_text(path)
        try:
            return read_pbm(path)
        except ImageFormatError as exc:
            raise CliError(f"{path}: {exc}")

    def write_text(self, path, text: str) -> None:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.outputs[str(path)] = sha256_bytes(text.encode())

    def write_json(self, path, obj) -> None:
        self.write_text(path, canonical_json(obj) + "\n")

    def map(self, fn, items) -> list:
        """Order-preserving map over ``items`` with ``--threads`` workers."""
        items = list(items)
        if self.args.threads <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.args.threads) as pool:
            return list(pool.map(fn, items))


def _jsonable(x):
    if isinstance(x, float):
        if x == NEG_INF:
            return "-inf"
        if math.isnan(x) or math.isinf(x):
            return str(x)
        return x
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return _jsonable(float(x))
    return x


def canonical_json(obj, indent=None) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=indent)


def bp_config(args) -> BpConfig:
    try:
        return BpConfig(args.max_iters, args.damping, args.tol)
    except ValueError as exc:
        raise CliError(str(exc))


# --- generic graphs ----------------------------------------------------------------------


def load_graph(run: Run, path):
    doc = run.read_json(path)
    try:
        return graph_io.graph_from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: invalid factor graph: {exc}")


def load_evidence(run: Run, graph, path):
    if path is None:
        return as_evidence(graph, None)
    doc = run.read_json(path)
    if isinstance(doc, dict) and "evidence" in doc:
        doc = doc["evidence"]
    try:
        if isinstance(doc, dict):
            doc = {int(k): float(v) for k, v in doc.items()}
        return as_evidence(graph, doc)
    except ShapeMismatchError:
        raise
    except (TypeError, ValueError) as exc:
        raise CliError(f"{path}: invalid evidence: {exc}")


def cmd_solve(run: Run):
    a = run.args
    g = load_graph(run, a.graph)
    ev = load_evidence(run, g, a.evidence)
    msgs, diag = run_mpbp(g, ev, bp_config(a))
    x = decode(g, msgs, ev)
    return {
        "assignment": x.tolist(),
        "on": [int(v) for v in np.flatnonzero(x)],
        "score": map_score(g, x, ev),
        "diagnostics": {"iters_run": diag.iters_run, "final_delta": diag.final_delta, "converged": diag.converged},
    }


def _efficient_messages(factor, incoming):
    if isinstance(factor, MamHofSpec):
        return mam_hof_messages(factor, incoming)
    if isinstance(factor, OrFactorSpec):
        return or_factor_messages(factor, incoming)
    return exact_max_product_messages(factor, incoming)


def message_deviation(g, msgs) -> float:
    """Largest gap between efficient and enumerated factor messages at ``msgs``."""
    worst = 0.0
    for f, fac in enumerate(g.factors):
        if isinstance(fac, (Unary, Table)):
            continue
        incoming = msgs.incoming(f)
        fast = _efficient_messages(fac, incoming)
        slow = exact_max_product_messages(fac, incoming)
        for v, m in slow.items():
            if m != fast[v]:
                worst = max(worst, abs(m - fast[v]))
    return worst


def parse_csi(spec: str):
    """``"x,y|z=1,w"`` -> (x, y, {z: 1}, [w]); labels or ids.

    Conditions with a state are fixed contexts; bare names are averaged
    over, as in an ordinary conditional mutual information.
    """
    try:
        pair, _, cond = spec.partition("|")
        x, y = (t.strip() for t in pair.split(","))
        fixed, given = {}, []
        for item in filter(None, (c.strip() for c in cond.split(","))):
            if "=" in item:
                k, v = item.split("=")
                fixed[k.strip()] = int(v)
            else:
                given.append(item)
        return x, y, fixed, given
    except ValueError:
        raise CliError(f"bad --csi spec {spec!r}; expected 'x,y|z=state[,w]'")


def cmd_verify(run: Run):
    a = run.args
    g = load_graph(run, a.graph)
    ev = load_evidence(run, g, a.evidence)
    try:
        budget = EnumerationBudget(a.budget)
    except ValueError as exc:
        raise CliError(str(exc))
    opt = brute_force_map(g, ev, budget)
    msgs, diag = run_mpbp(g, ev, bp_config(a))
    x = decode(g, msgs, ev)
    score = map_score(g, x, ev)
    gap = 0.0 if score == opt.score else (math.inf if score == NEG_INF else opt.score - score)
    out = {
        "oracle": {"assignment": opt.assignment.tolist(), "score": opt.score, "unique": opt.is_unique},
        "mpbp": {"assignment": x.tolist(), "score": score, "converged": diag.converged, "iters_run": diag.iters_run},
        "gap": gap,
        "message_max_deviation": message_deviation(g, msgs),
    }
    if a.csi:
        labels = ids_by_label(g)

        def vid(t):
            return labels[t] if t in labels else int(t)

        dist = joint_distribution(g, ev, budget)
        report = []
        for spec in a.csi:
            xs, ys, fixed, given = parse_csi(spec)
            try:
                mi = conditional_mutual_information(dist, vid(xs), vid(ys), {vid(k): s for k, s in fixed.items()},
                                                    given=[vid(w) for w in given])
            except (KeyError, ValueError) as exc:
                raise CliError(f"--csi {spec!r}: {exc}")
            report.append({"spec": spec, "cmi": mi})
        out["csi"] = report
    return out


def cmd_demo_gene_network(run: Run):
    a = run.args
    g = build_gene_network_demo(GeneNetworkParams(a.promote, a.corepress))
    ids = ids_by_label(g)
    dist = joint_distribution(g)
    a_, b_, c_, d_ = (ids[k] for k in ("X_A", "X_B", "X_C", "X_D"))
    cmi = conditional_mutual_information
    out = {
        "graph": graph_io.graph_to_dict(g),
        "csi": {
            # the context-specific edges, with the remaining gene held fixed
            "I(X_A;X_B|X_C=1,X_D)": cmi(dist, a_, b_, {c_: 1}, given=[d_]),
            "I(X_A;X_D|X_C=0,X_B)": cmi(dist, a_, d_, {c_: 0}, given=[b_]),
            "I(X_A;X_B|X_C=0,X_D)": cmi(dist, a_, b_, {c_: 0}, given=[d_]),
            "I(X_A;X_D|X_C=1,X_B)": cmi(dist, a_, d_, {c_: 1}, given=[b_]),
            # with it marginalised, corepression leaks dependence through it
            "I(X_A;X_B|X_C=1)": cmi(dist, a_, b_, {c_: 1}),
            "I(X_A;X_D|X_C=0)": cmi(dist, a_, d_, {c_: 0}),
        },
    }
    if a.out:
        run.write_text(a.out, graph_io.dumps(g, indent=1, sort_keys=True) + "\n")
    return out


# --- sparsifier -------------------------------------------------------------------------


def load_catalog(run: Run, path):
    from .sparsifier import PartShape

    doc = run.read_json(path)
    try:
        shapes = [PartShape.from_dict(d) for d in (doc["parts"] if isinstance(doc, dict) else doc)]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: invalid part catalog: {exc}")
    if not shapes or any(s.is_empty for s in shapes):
        raise CliError(f"{path}: catalog must hold non-empty shapes")
    return shapes


def cmd_sparsify(run: Run):
    from .sparsifier import SparsifyParams, sparsify

    a = run.args
    img = run.read_pbm(a.image)
    catalog = load_catalog(run, a.catalog)
    params = SparsifyParams(pi01=a.pi01, pi10=a.pi10, part_prior=a.prior, bp=bp_config(a), restarts=a.restarts)
    res = sparsify(img, catalog, params, seed=run.seed)
    if a.overlay:
        heat = img.astype(float)
        on = set(res.placements)
        for p, cov in zip(res.model.placements, res.model.coverage):
            if p in on:
                for r, c in cov:
                    heat[r, c] += 1
        run.write_text(a.overlay, dumps_pgm(heat))
    return {
        "placements": [[p.part_type, p.row, p.col] for p in res.placements],
        "score": res.score,
        "explained_fraction": res.explained_fraction(img),
        "converged": res.converged,
    }


def cmd_learn_parts(run: Run):
    import warnings

    from .sparsifier import LearnParams, learn_parts

    a = run.args
    images = [run.read_pbm(p) for p in a.images]
    dims = {im.shape for im in images}
    if len(dims) != 1:
        raise CliError("training images differ in shape", EXIT_SHAPE)
    params = LearnParams(restarts=a.restarts, seed_strength=a.seed_strength)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            res = learn_parts(images, a.n_parts, tuple(a.patch), params, seed=run.seed)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_SHAPE)
    shapes = [s.centered() if a.center else s for s in res.catalog]
    doc = [s.to_dict() for s in shapes]
    run.write_json(a.out, doc)
    return {"n_parts": len(doc), "empty_types": res.empty_types, "sizes": [s.size for s in shapes], "out": a.out}


# --- pathfinder -------------------------------------------------------------------------


def _instance_paths(d: Path, i: int):
    return d / f"{i:06d}.pbm", d / f"{i:06d}.json"


def load_dataset(run: Run, data_dir, loader):
    d = Path(data_dir)
    index = d / "index.json"
    if not index.is_file():
        raise CliError(f"no dataset index at {index}")
    n = int(run.read_json(index)["n"])
    out = []
    for i in range(n):
        pbm, side = _instance_paths(d, i)
        out.append(loader(run.read_pbm(pbm), run.read_json(side)))
    return out


def write_dataset(run: Run, out_dir, instances, kind: str, params: dict):
    d = Path(out_dir)
    for i, inst in enumerate(instances):
        pbm, side = _instance_paths(d, i)
        run.write_text(pbm, dumps_pbm(inst.image))
        run.write_json(side, inst.to_dict())
    run.write_json(d / "index.json", {"kind": kind, "n": len(instances), "params": params})


def cmd_pathfinder_gen(run: Run):
    from .pathfinder import GeneratorParams, PlacementError, generate_dataset

    a = run.args
    params = GeneratorParams(
        image_dims=tuple(a.dims),
        target_len_range=tuple(a.target_len),
        n_distractors=a.distractors,
        distractor_len_range=tuple(a.distractor_len),
    )
    try:
        data = generate_dataset(a.n, params, seed=run.seed)
    except PlacementError as exc:
        raise CliError(str(exc), EXIT_SHAPE)
    write_dataset(run, a.out, data, "pathfinder", _jsonable(params.__dict__))
    return {"n": len(data), "out": a.out}


def _pathfinder_loader(image, d):
    from .pathfinder import PathfinderInstance

    return PathfinderInstance.from_dict(image, d)


def cmd_pathfinder_learn(run: Run):
    from .pathfinder import PathfinderClassifier

    a = run.args
    data = load_dataset(run, a.data, _pathfinder_loader)
    catalog = a.catalog if a.catalog in ("line", "learned") else load_catalog(run, a.catalog)
    clf = PathfinderClassifier(catalog=catalog, max_contours=a.max_contours, min_rel_freq=a.min_rel_freq,
                               spatial=a.spatial, angular=a.angular, termination_penalty=a.penalty, seed=run.seed)
    try:
        clf.fit(data)
    except ValueError as exc:
        raise CliError(str(exc))
    run.write_text(a.out, clf.model_.dumps() + "\n")
    return {"n_cooccurrences": len(clf.model_.cooccurrences), "n_parts": len(clf.model_.catalog), "out": a.out}


def confusion(truth, pred, labels) -> dict:
    return {t: {p: int(sum(1 for x, y in zip(truth, pred) if x == t and y == p)) for p in labels} for t in labels}


def _edge_pixels(p, q):
    n = max(abs(q[0] - p[0]), abs(q[1] - p[1]), 1)
    return {(round(p[0] + (q[0] - p[0]) * k / n), round(p[1] + (q[1] - p[1]) * k / n)) for k in range(n + 1)}


def cmd_pathfinder_eval(run: Run):
    from .pathfinder import DIFFERENT, SAME, InferParams, PathfinderModel, classify, prune_and_infer
    from .sparsifier import seed_sequence

    a = run.args
    data = load_dataset(run, a.data, _pathfinder_loader)
    try:
        model = PathfinderModel.loads(run.read_text(a.model))
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{a.model}: invalid pathfinder model: {exc}")
    params = InferParams(restarts=a.restarts, radius=a.radius)
    seeds = seed_sequence(run.seed).spawn(len(data))

    def one(k):
        inst = data[k]
        if inst.image.shape != model.grid_dims:
            raise CliError(f"instance {k} has shape {inst.image.shape}, model grid is {model.grid_dims}", EXIT_SHAPE)
        dec = prune_and_infer(inst, model, params, seed=seeds[k])
        return dec, classify(dec, inst.marker_a, inst.marker_b, a.radius)

    results = run.map(one, range(len(data)))
    truth = [inst.label for inst in data]
    pred = [lab for _, lab in results]
    if a.overlays:
        for k, (dec, _) in enumerate(results):
            heat = data[k].image.astype(float)
            for cov in dec.coverage:
                for r, c in cov:
                    heat[r, c] = 2
            for i, j in dec.edges:
                p, q = dec.parts[i], dec.parts[j]
                for r, c in _edge_pixels((p.row, p.col), (q.row, q.col)):
                    if 0 <= r < heat.shape[0] and 0 <= c < heat.shape[1]:
                        heat[r, c] = 3
            run.write_text(Path(a.overlays) / f"{k:06d}.pgm", dumps_pgm(heat))
    report = _eval_report(truth, pred, (SAME, DIFFERENT))
    report["decodings"] = [dec.to_dict() for dec, _ in results]
    run.write_json(a.out, report)
    return {k: report[k] for k in ("n", "accuracy", "confusion")}


def _eval_report(truth, pred, labels) -> dict:
    n = len(truth)
    acc = sum(t == p for t, p in zip(truth, pred)) / n if n else 0.0
    return {
        "n": n,
        "accuracy": acc,
        "confusion": confusion(truth, pred, labels),
        "decisions": [{"index": i, "label": t, "predicted": p} for i, (t, p) in enumerate(zip(truth, pred))],
    }


# --- cABC -------------------------------------------------------------------------------


def _cabc_loader(image, d):
    from .cabc import CabcInstance

    return CabcInstance.from_dict(image, d)


@dataclass
class _Letter:
    image: np.ndarray
    label: str

    def to_dict(self) -> dict:
        return {"label": self.label}


def cmd_cabc_gen(run: Run):
    from .cabc import CabcParams, PlacementError, generate_cabc_dataset, training_letters

    a = run.args
    params = CabcParams(image_dims=tuple(a.dims))
    if a.letters:
        pairs = training_letters(a.n_per_letter, params, seed=run.seed, dims=tuple(a.letter_dims))
        items = [_Letter(img, lab) for lab, img in pairs][: a.n] if a.n else [_Letter(img, lab) for lab, img in pairs]
        write_dataset(run, a.out, items, "cabc-letters", {"n_per_letter": a.n_per_letter})
        return {"n": len(items), "out": a.out}
    try:
        data = generate_cabc_dataset(a.n, params, seed=run.seed)
    except PlacementError as exc:
        raise CliError(str(exc), EXIT_SHAPE)
    write_dataset(run, a.out, data, "cabc", _jsonable({"image_dims": params.image_dims, "letters": params.letters}))
    return {"n": len(data), "out": a.out}


def cmd_cabc_learn(run: Run):
    from .cabc import CabcClassifier

    a = run.args
    letters = load_dataset(run, a.data, lambda img, d: (d.get("label", ""), img))
    clf = CabcClassifier(part_radius=a.part_radius, perturbation=a.perturbation, tolerance=a.tolerance,
                         max_length=a.max_length, eta_search=a.eta_search, anchor_stride=a.anchor_stride,
                         top_per_anchor=a.top_per_anchor, top_overall=a.top_overall, eta_refine=a.eta_refine,
                         overlap_penalty=a.overlap_penalty, seed=run.seed)
    try:
        clf.fit(letters)
    except ValueError as exc:
        raise CliError(str(exc))
    out = Path(a.out)
    for k, g in enumerate(clf.model_.graphs):
        run.write_json(out / f"graph_{k:04d}.json", g.to_dict())
    run.write_text(out / "model.json", clf.model_.dumps() + "\n")
    return {"n_graphs": len(clf.model_.graphs), "out": a.out}


def _load_cabc_model(run: Run, path):
    from .cabc import CabcModel

    p = Path(path)
    if p.is_dir():
        p = p / "model.json"
    try:
        return CabcModel.loads(run.read_text(p))
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{p}: invalid cABC model: {exc}")


def _interpretation_dict(interp) -> dict:
    return {
        "pair": list(interp.pair),
        "score": interp.score,
        "n_pairs": interp.n_pairs,
        "letters": [
            {"graph": l.candidate.graph_index, "anchor": list(l.candidate.anchor),
             "search_score": l.candidate.score, "locations": [list(v) for v in l.locations]}
            for l in interp.chosen
        ],
    }


def cmd_cabc_eval(run: Run):
    from .cabc import DIFFERENT, SAME, assign_marker, interpret

    a = run.args
    data = load_dataset(run, a.data, _cabc_loader)
    model = _load_cabc_model(run, a.model)

    def one(inst):
        interp = interpret(inst.image, model)
        chosen = list(interp.chosen)
        ka, kb = assign_marker(chosen, inst.marker_a), assign_marker(chosen, inst.marker_b)
        return interp, (SAME if ka == kb else DIFFERENT)

    results = run.map(one, data)
    truth = [inst.label for inst in data]
    pred = [lab for _, lab in results]
    if a.overlays:
        for k, (interp, _) in enumerate(results):
            heat = data[k].image.astype(float)
            for n, l in enumerate(interp.chosen):
                heat[l.counts > 0] = 2 + n
            run.write_text(Path(a.overlays) / f"{k:06d}.pgm", dumps_pgm(heat))
    report = _eval_report(truth, pred, (SAME, DIFFERENT))
    report["interpretations"] = [_interpretation_dict(i) for i, _ in results]
    run.write_json(a.out, report)
    return {k: report[k] for k in ("n", "accuracy", "confusion")}


def cmd_cabc_match(run: Run):
    from .cabc import DIFFERENT, SAME, assign_marker, interpret

    a = run.args
    img = run.read_pbm(a.image)
    model = _load_cabc_model(run, a.model)
    try:
        interp = interpret(img, model)
    except ValueError as exc:
        raise CliError(str(exc))
    out = _interpretation_dict(interp)
    if a.markers:
        ma, mb = tuple(a.markers[:2]), tuple(a.markers[2:])
        chosen = list(interp.chosen)
        out["label"] = SAME if assign_marker(chosen, ma) == assign_marker(chosen, mb) else DIFFERENT
    return out


# --- parser ---------------------------------------------------------------------------


def _bp_flags(p, iters=200, damping=0.5):
    p.add_argument("--max-iters", type=int, default=iters)
    p.add_argument("--damping", type=float, default=damping)
    p.add_argument("--tol", type=float, default=1e-6)


def _global_flags(p, default):
    def d(value):
        return value if default is None else default

    p.add_argument("--seed", type=int, default=d(0), help="root seed (default 0)")
    p.add_argument("--json", action="store_true", default=d(False), help="print one compact JSON document")
    p.add_argument("--threads", type=int, default=d(1), help="worker hint; results do not depend on it")
    p.add_argument("--manifest", default=d(None), help="write a run manifest here")


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="mam", description="Markov attention models: inference and grouping tasks.")
    _global_flags(p, None)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", parents=[common], help="MPBP on a factor-graph file")
    s.add_argument("graph")
    s.add_argument("--evidence")
    _bp_flags(s)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("verify", parents=[common], help="compare MPBP with the brute-force oracle")
    s.add_argument("graph")
    s.add_argument("--evidence")
    s.add_argument("--budget", type=int, default=EnumerationBudget.max_joint_states,
                   help="max live joint states during enumeration")
    s.add_argument("--csi", action="append", help="report I(x;y|z=s), written 'x,y|z=s' (labels or ids)")
    _bp_flags(s)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("sparsify", parents=[common], help="sparsify a PBM image")
    s.add_argument("image")
    s.add_argument("--catalog", required=True)
    s.add_argument("--pi01", type=float, default=0.07)
    s.add_argument("--pi10", type=float, default=0.0019)
    s.add_argument("--prior", type=float, default=-20.0)
    s.add_argument("--restarts", type=int, default=10)
    s.add_argument("--overlay", help="PGM heatmap of covered pixels")
    _bp_flags(s)
    s.set_defaults(func=cmd_sparsify)

    s = sub.add_parser("learn-parts", parents=[common], help="learn a part catalog from PBM images")
    s.add_argument("images", nargs="+")
    s.add_argument("--n-parts", type=int, default=16)
    s.add_argument("--patch", type=int, nargs=2, default=(5, 5))
    s.add_argument("--restarts", type=int, default=1)
    s.add_argument("--seed-strength", type=float, default=0.3)
    s.add_argument("--center", action="store_true", help="re-anchor shapes at their centroid")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_learn_parts)

    pf = sub.add_parser("pathfinder", parents=[common], help="dashed-contour grouping").add_subparsers(dest="sub", required=True)
    s = pf.add_parser("gen", parents=[common])
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dims", type=int, nargs=2, default=(64, 64))
    s.add_argument("--target-len", type=int, nargs=2, default=(6, 6))
    s.add_argument("--distractors", type=int, default=8)
    s.add_argument("--distractor-len", type=int, nargs=2, default=(2, 2))
    s.set_defaults(func=cmd_pathfinder_gen)
    s = pf.add_parser("learn", parents=[common])
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--catalog", default="line", help="'line', 'learned' or a catalog JSON file")
    s.add_argument("--max-contours", type=int, default=200)
    s.add_argument("--min-rel-freq", type=float, default=1e-3)
    s.add_argument("--spatial", type=int, default=2)
    s.add_argument("--angular", type=int, default=2)
    s.add_argument("--penalty", type=float, default=1.6)
    s.set_defaults(func=cmd_pathfinder_learn)
    s = pf.add_parser("eval", parents=[common])
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--restarts", type=int, default=3)
    s.add_argument("--radius", type=float, default=3.0)
    s.add_argument("--overlays", help="directory for PGM decoding overlays")
    s.set_defaults(func=cmd_pathfinder_eval)

    cb = sub.add_parser("cabc", parents=[common], help="two-letter grouping").add_subparsers(dest="sub", required=True)
    s = cb.add_parser("gen", parents=[common])
    s.add_argument("--n", type=int, default=0, help="instances (letters: cap on letters written)")
    s.add_argument("--out", required=True)
    s.add_argument("--dims", type=int, nargs=2, default=(48, 48))
    s.add_argument("--letters", action="store_true", help="write single training letters instead")
    s.add_argument("--n-per-letter", type=int, default=3)
    s.add_argument("--letter-dims", type=int, nargs=2, default=(32, 32))
    s.set_defaults(func=cmd_cabc_gen)
    s = cb.add_parser("learn", parents=[common])
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="directory for graph_*.json and model.json")
    s.add_argument("--part-radius", type=float, default=2.0)
    s.add_argument("--perturbation", type=float, default=7.0)
    s.add_argument("--tolerance", type=float, default=2.0)
    s.add_argument("--max-length", type=float, default=200.0)
    s.add_argument("--eta-search", type=int, default=4)
    s.add_argument("--anchor-stride", type=int, default=3)
    s.add_argument("--top-per-anchor", type=int, default=3)
    s.add_argument("--top-overall", type=int, default=20)
    s.add_argument("--eta-refine", type=int, default=6)
    s.add_argument("--overlap-penalty", type=float, default=0.33)
    s.set_defaults(func=cmd_cabc_learn)
    s = cb.add_parser("eval", parents=[common])
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--overlays")
    s.set_defaults(func=cmd_cabc_eval)
    s = cb.add_parser("match", parents=[common])
    s.add_argument("image")
    s.add_argument("--model", required=True)
    s.add_argument("--markers", type=int, nargs=4, metavar=("RA", "CA", "RB", "CB"))
    s.set_defaults(func=cmd_cabc_match)

    s = sub.add_parser("demo-gene-network", parents=[common], help="the six-variable gene MAM and its CSI report")
    s.add_argument("--promote", type=float, default=GeneNetworkParams.promote)
    s.add_argument("--corepress", type=float, default=GeneNetworkParams.corepress)
    s.add_argument("--out", help="also write the graph JSON here")
    s.set_defaults(func=cmd_demo_gene_network)

    s = sub.add_parser("replay", parents=[common], help="rerun a manifest and compare outputs")
    s.add_argument("manifest_file")
    s.set_defaults(func=None)
    return p


# --- entry point ------------------------------------------------------------------------


def _emit(result, as_json: bool) -> str:
    if as_json:
        return canonical_json(result) + "\n"
    return canonical_json(result, indent=2) + "\n"


def execute(argv) -> tuple[int, str, Run | None]:
    """Run one command; returns (exit code, stdout text, run context)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be positive")
    if args.func is None:
        return _replay(args)
    run = Run(args)
    try:
        result = args.func(run)
    except CliError as exc:
        return exc.code, _error(exc, exc.code, args), run
    except ShapeMismatchError as exc:
        return EXIT_SHAPE, _error(exc, EXIT_SHAPE, args), run
    except BudgetExceeded as exc:
        return EXIT_BUDGET, _error(exc, EXIT_BUDGET, args), run
    except InfeasibleModelError as exc:
        return EXIT_INPUT, _error(exc, EXIT_INPUT, args), run
    return 0, _emit(result, args.json), run


def _error(exc, code: int, args) -> str:
    print(f"mam: error: {exc}", file=sys.stderr)
    return canonical_json({"error": str(exc), "exit_code": code}) + "\n" if args.json else ""


def _manifest_argv(argv) -> list[str]:
    """``argv`` without ``--manifest`` / ``--threads`` (they do not affect outputs)."""
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok in ("--manifest", "--threads"):
            skip = True
            continue
        if tok.startswith("--manifest=") or tok.startswith("--threads="):
            continue
        out.append(tok)
    return out


def _replay(args) -> tuple[int, str, None]:
    path = Path(args.manifest_file)
    if not path.is_file():
        print(f"mam: error: no such file: {path}", file=sys.stderr)
        return EXIT_INPUT, "", None
    try:
        manifest = RunManifest.from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError, CliError) as exc:
        print(f"mam: error: bad manifest: {exc}", file=sys.stderr)
        return EXIT_INPUT, "", None
    changed = [p for p, h in manifest.input_hashes.items() if not Path(p).is_file() or sha256_file(p) != h]
    if changed:
        print(f"mam: error: inputs changed since the manifest was written: {changed}", file=sys.stderr)
        return EXIT_INPUT, "", None
    argv = ["--threads", str(args.threads)] + manifest.command
    code, text, run = execute(argv)
    outputs = dict(run.outputs) if run else {}
    outputs["<stdout>"] = sha256_bytes(text.encode())
    mismatched = sorted(k for k in set(outputs) | set(manifest.output_hashes)
                        if outputs.get(k) != manifest.output_hashes.get(k))
    report = {"replayed": manifest.command, "exit_code": code, "identical": not mismatched, "mismatched": mismatched}
    return (0 if not mismatched and code == 0 else 1), _emit(report, args.json), None


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    t0 = time.perf_counter()
    code, text, run = execute(argv)
    sys.stdout.write(text)
    sys.stdout.flush()
    if run is not None and run.args.manifest:
        outputs = dict(run.outputs)
        outputs["<stdout>"] = sha256_bytes(text.encode())
        manifest = RunManifest(
            _manifest_argv(argv), _jsonable({k: v for k, v in vars(run.args).items() if k != "func"}),
            run.seed, run.inputs, outputs, round(time.perf_counter() - t0, 3),
        )
        Path(run.args.manifest).write_text(canonical_json(manifest.to_dict(), indent=1) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
