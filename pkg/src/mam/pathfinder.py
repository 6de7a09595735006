"""Desk-scale pathfinder: dashed contours, co-occurrence MAMs, grouping.

An instance is a binary image with a few dashed contours; two markers sit
on contour endpoints and the question is whether they lie on the same
contour. The model sparsifies the image into part placements, links
placements whose relative displacement is a learned co-occurrence through
attention variables, and reads the answer off the connected components of
the ON attention edges.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .bp import BpConfig
from .factors import MamHofSpec, OrFactorSpec, Unary, safe_log
from .graph import GraphBuilder, VariableKind
from .sparsifier import (
    LearnParams,
    PartShape,
    Placement,
    SparsifyParams,
    as_binary_image,
    best_of_restarts,
    check_catalog,
    learn_parts,
    seed_sequence,
    sparsify,
)

SAME = "same"
DIFFERENT = "different"


class PlacementError(RuntimeError):
    """The generator could not place all contours within its retry cap."""


# --- generator ----------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorParams:
    image_dims: tuple[int, int] = (64, 64)
    n_targets: int = 2
    target_len_range: tuple[int, int] = (6, 6)
    n_distractors: int = 8
    distractor_len_range: tuple[int, int] = (2, 2)
    n_short_distractors: int = 0
    short_len_range: tuple[int, int] = (1, 1)
    dashed: bool = True
    dash_len: int = 5
    gap: int = 2
    width: int = 1
    max_turn: float = math.pi / 8
    clearance: int = 4
    margin: int = 2
    max_retries: int = 500
    max_restarts: int = 50


@dataclass
class PathfinderInstance:
    image: np.ndarray
    marker_a: tuple[int, int]
    marker_b: tuple[int, int]
    label: str
    contours: list[list[tuple[int, int]]]
    n_targets: int = 2

    def to_dict(self) -> dict:
        return {
            "marker_a": list(self.marker_a),
            "marker_b": list(self.marker_b),
            "label": self.label,
            "n_targets": self.n_targets,
            "contours": [[list(p) for p in c] for c in self.contours],
        }

    @classmethod
    def from_dict(cls, image, d: dict) -> "PathfinderInstance":
        return cls(
            as_binary_image(image),
            tuple(d["marker_a"]),
            tuple(d["marker_b"]),
            d["label"],
            [[tuple(p) for p in c] for c in d["contours"]],
            int(d.get("n_targets", 2)),
        )

    def contour_image(self, k: int) -> np.ndarray:
        img = np.zeros_like(self.image)
        for r, c in self.contours[k]:
            img[r, c] = 1
        return img


def raster_segment(r0: float, c0: float, r1: float, c1: float) -> list[tuple[int, int]]:
    """Pixels of a straight segment (DDA with rounding), in drawing order."""
    n = int(max(abs(round(r1) - round(r0)), abs(round(c1) - round(c0))))
    out = []
    for k in range(n + 1):
        t = k / n if n else 0.0
        p = (int(round(r0 + t * (r1 - r0))), int(round(c0 + t * (c1 - c0))))
        if not out or out[-1] != p:
            out.append(p)
    return out


def dash_pixels(r: float, c: float, theta: float, length: int, width: int = 1) -> list[tuple[int, int]]:
    """A straight dash of ``length`` steps along the dominant axis of ``theta``.

    Each step is ``width`` pixels thick across the dominant axis.
    """
    dr, dc = math.sin(theta), math.cos(theta)
    horizontal = abs(dc) >= abs(dr)
    scale = max(abs(dr), abs(dc))
    dr, dc = dr / scale, dc / scale
    out = []
    for k in range(length):
        pr, pc = int(round(r + k * dr)), int(round(c + k * dc))
        for j in range(width):
            q = (pr + j, pc) if horizontal else (pr, pc + j)
            if q not in out:
                out.append(q)
    return out


def draw_contour(rng: np.random.Generator, n_dashes: int, params: GeneratorParams) -> list[tuple[int, int]] | None:
    """Random bounded-curvature dashed contour; ``None`` if it cannot fit the image.

    Every dash is ``dash_len`` steps long and ``width`` pixels thick;
    consecutive dashes are ``dash_len + gap`` steps apart along the dominant
    axis of the heading. The contour is drawn from a random sub-pixel start
    and then shifted by a random whole-pixel offset that keeps it inside the
    margins (whole-pixel shifts leave the rasterisation unchanged).
    """
    rows, cols = params.image_dims
    m = params.margin
    r, c = rng.uniform(0, 1), rng.uniform(0, 1)
    theta = rng.uniform(0, 2 * math.pi)
    pitch = params.dash_len + (params.gap if params.dashed else 0)
    pixels: list[tuple[int, int]] = []
    seen = set()
    for _ in range(n_dashes):
        for p in dash_pixels(r, c, theta, params.dash_len, params.width):
            if p not in seen:
                seen.add(p)
                pixels.append(p)
        scale = max(abs(math.sin(theta)), abs(math.cos(theta)))
        r += pitch * math.sin(theta) / scale
        c += pitch * math.cos(theta) / scale
        theta += rng.uniform(-params.max_turn, params.max_turn)
    pts = np.asarray(pixels)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    free_r = (rows - 1 - m) - (hi[0] - lo[0]) - m
    free_c = (cols - 1 - m) - (hi[1] - lo[1]) - m
    if free_r < 0 or free_c < 0:
        return None
    dr = m - lo[0] + int(rng.integers(0, free_r + 1))
    dc = m - lo[1] + int(rng.integers(0, free_c + 1))
    return [(int(pr + dr), int(pc + dc)) for pr, pc in pixels]


def _clear(pixels, occupied: np.ndarray, clearance: int) -> bool:
    rows, cols = occupied.shape
    for r, c in pixels:
        r0, r1 = max(0, r - clearance), min(rows, r + clearance + 1)
        c0, c1 = max(0, c - clearance), min(cols, c + clearance + 1)
        if occupied[r0:r1, c0:c1].any():
            return False
    return True


def _place_contours(rng, lengths, params: GeneratorParams):
    """Draw contours in order; ``None`` when one cannot be placed."""
    occupied = np.zeros(params.image_dims, dtype=bool)
    contours: list[list[tuple[int, int]]] = []
    for n in lengths:
        for _attempt in range(params.max_retries):
            pix = draw_contour(rng, n, params)
            if pix is not None and _clear(pix, occupied, params.clearance):
                break
        else:
            return None
        contours.append(pix)
        for p in pix:
            occupied[p] = True
    return occupied, contours


def generate_pathfinder(params: GeneratorParams | None = None, *, seed=0, label: str | None = None) -> PathfinderInstance:
    """One instance. Targets are drawn first, then distractors.

    Markers are recorded as metadata at target endpoints (they are not drawn
    into the image). ``label`` defaults to a fair coin. When a contour
    cannot be placed within ``max_retries`` draws the whole instance is
    redrawn, up to ``max_restarts`` times.
    """
    params = params or GeneratorParams()
    rng = np.random.default_rng(seed)
    if label is None:
        label = SAME if rng.random() < 0.5 else DIFFERENT
    if label not in (SAME, DIFFERENT):
        raise ValueError(f"label must be {SAME!r} or {DIFFERENT!r}")
    if label == DIFFERENT and params.n_targets < 2:
        raise ValueError("a 'different' instance needs two targets")
    lengths = [int(rng.integers(params.target_len_range[0], params.target_len_range[1] + 1))
               for _ in range(params.n_targets)]
    lengths += [int(rng.integers(params.distractor_len_range[0], params.distractor_len_range[1] + 1))
                for _ in range(params.n_distractors)]
    lengths += [int(rng.integers(params.short_len_range[0], params.short_len_range[1] + 1))
                for _ in range(params.n_short_distractors)]

    for _restart in range(params.max_restarts):
        placed = _place_contours(rng, lengths, params)
        if placed is not None:
            occupied, contours = placed
            break
    else:
        raise PlacementError(
            f"could not place contours of {lengths} dashes after {params.max_restarts} restarts"
        )

    image = occupied.astype(np.uint8)
    t0 = contours[0]
    if label == SAME:
        a, b = t0[0], t0[-1]
        if rng.random() < 0.5:
            a, b = b, a
    else:
        t1 = contours[1]
        a = t0[0] if rng.random() < 0.5 else t0[-1]
        b = t1[0] if rng.random() < 0.5 else t1[-1]
    return PathfinderInstance(image, a, b, label, contours, params.n_targets)


def generate_dataset(n: int, params: GeneratorParams | None = None, *, seed=0, balanced: bool = True):
    """``n`` instances with per-instance seeds split from ``seed``."""
    seeds = seed_sequence(seed).spawn(n)
    out = []
    for i, ss in enumerate(seeds):
        label = (SAME if i % 2 == 0 else DIFFERENT) if balanced else None
        out.append(generate_pathfinder(params, seed=ss, label=label))
    return out


def line_catalog(n_orientations: int = 16, length: int = 5, width: int = 1) -> list[PartShape]:
    """Hand-made catalog of straight dashes at evenly spread angles.

    A fallback for learned parts; each dash is drawn like a generator dash
    and anchored at its middle step.
    """
    out = []
    for t in range(n_orientations):
        theta = math.pi * t / n_orientations
        px = dash_pixels(0.0, 0.0, theta, length, width)
        mr, mc = px[(length // 2) * width]
        out.append(PartShape(t, tuple((r - mr, c - mc) for r, c in px)))
    return out


# --- co-occurrences -------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Cooccurrence:
    """Part ``t2`` sits at ``(dr, dc)`` from part ``t1``.

    Built through :meth:`of`, which picks the canonical one of the two
    equivalent orientations, so equal co-occurrences compare equal.
    """

    t1: int
    t2: int
    dr: int
    dc: int

    @classmethod
    def of(cls, t1: int, t2: int, dr: int, dc: int) -> "Cooccurrence":
        a = (int(t1), int(t2), int(dr), int(dc))
        b = (int(t2), int(t1), -int(dr), -int(dc))
        return cls(*min(a, b))

    def views(self):
        """``(type, partner type, dr, dc)`` as seen from each end."""
        yield (self.t1, self.t2, self.dr, self.dc)
        yield (self.t2, self.t1, -self.dr, -self.dc)


def order_along_contour(placements, coverage, contour) -> list[int]:
    """Indices of ``placements`` sorted by position along ``contour``.

    A placement's position is the median index (in drawing order) of the
    contour pixels it covers; placements covering none are dropped.
    """
    index = {tuple(p): i for i, p in enumerate(contour)}
    keyed = []
    for k, cover in enumerate(coverage):
        hits = sorted(index[p] for p in cover if p in index)
        if hits:
            keyed.append((float(np.median(hits)), k))
    return [k for _, k in sorted(keyed)]


def extract_cooccurrences(
    contours,
    catalog,
    image_dims,
    min_rel_freq: float = 1e-3,
    params: SparsifyParams | None = None,
    *,
    seed=0,
) -> tuple[set[Cooccurrence], Counter]:
    """Co-occurrences between consecutive parts along single contours.

    Each contour (an ordered pixel list) is drawn alone and sparsified;
    the activations are ordered along the contour and the displacement
    between each consecutive pair is counted. Records whose share of all
    counts is below ``min_rel_freq`` are dropped.

    Returns:
        the kept set and the raw counts.

    Raises:
        ValueError: no contours.
    """
    contours = list(contours)
    if not contours:
        raise ValueError("need at least one contour")
    params = params or SparsifyParams()
    catalog = check_catalog(catalog)
    seeds = seed_sequence(seed).spawn(len(contours))
    counts: Counter = Counter()
    for contour, ss in zip(contours, seeds):
        img = np.zeros(image_dims, dtype=np.uint8)
        for r, c in contour:
            img[r, c] = 1
        res = sparsify(img, catalog, params, seed=ss)
        on = set(res.placements)
        placed = [(p, cov) for p, cov in zip(res.model.placements, res.model.coverage) if p in on]
        order = order_along_contour([p for p, _ in placed], [cov for _, cov in placed], contour)
        for i, j in zip(order, order[1:]):
            a, b = placed[i][0], placed[j][0]
            counts[Cooccurrence.of(a.part_type, b.part_type, b.row - a.row, b.col - a.col)] += 1
    total = sum(counts.values())
    kept = {c for c, n in counts.items() if total and n / total >= min_rel_freq}
    return kept, counts


def shape_angle(shape: PartShape) -> float:
    """Orientation in ``[0, pi)`` of a shape's principal axis (rows down, columns right)."""
    pts = np.asarray(shape.offsets, dtype=float)
    pts = pts - pts.mean(axis=0)
    w, vecs = np.linalg.eigh(pts.T @ pts)
    dr, dc = vecs[:, int(np.argmax(w))]
    return math.atan2(dr, dc) % math.pi


def similar_types(catalog, k: int = 1) -> dict[int, list[int]]:
    """Each type with its ``k`` nearest types by (circular) orientation."""
    angles = {s.part_type: shape_angle(s) for s in catalog}
    out = {}
    for t, a in angles.items():
        def gap(u):
            d = abs(angles[u] - a) % math.pi
            return (min(d, math.pi - d), u)
        others = sorted((u for u in angles if u != t), key=gap)
        out[t] = [t] + others[:k]
    return out


def expand_cooccurrences(cooccurrences, catalog, spatial: int = 1, angular: int = 1) -> set[Cooccurrence]:
    """Tolerant copies of each co-occurrence.

    Adds every record whose displacement differs by at most ``spatial`` per
    axis and whose part types are among each type's ``angular`` nearest
    orientations. Zero displacements between same-type parts are skipped.
    """
    near = similar_types(catalog, angular)
    out = set()
    for co in cooccurrences:
        for t1 in near.get(co.t1, [co.t1]):
            for t2 in near.get(co.t2, [co.t2]):
                for dr in range(co.dr - spatial, co.dr + spatial + 1):
                    for dc in range(co.dc - spatial, co.dc + spatial + 1):
                        if dr == 0 and dc == 0 and t1 == t2:
                            continue
                        out.add(Cooccurrence.of(t1, t2, dr, dc))
    return out


def assign_sides(cooccurrences) -> dict[tuple[int, int, int, int], int]:
    """Split each part type's continuations into two sides.

    Per type, the principal axis of its partner displacements (largest
    eigenvector of their second-moment matrix, sign fixed so its first
    non-zero entry is positive) splits them: positive projection is side 1,
    negative side 2, zero goes to side 1.

    Keys are ``(type, partner type, dr, dc)`` views of each co-occurrence.
    """
    views: dict[int, list[tuple[int, int, int, int]]] = {}
    for co in sorted(cooccurrences):
        for v in co.views():
            views.setdefault(v[0], []).append(v)
    sides = {}
    for t, vs in views.items():
        d = np.array([(v[2], v[3]) for v in vs], dtype=float)
        w, vecs = np.linalg.eigh(d.T @ d)
        axis = vecs[:, int(np.argmax(w))]
        nz = np.flatnonzero(np.abs(axis) > 1e-12)
        if len(nz) and axis[nz[0]] < 0:
            axis = -axis
        proj = d @ axis
        for v, p in zip(vs, proj):
            sides[v] = 1 if p >= -1e-9 else 2
    return sides


# --- the object-agnostic MAM ---------------------------------------------------

PATTERNS_2 = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass
class PathfinderModel:
    catalog: list[PartShape]
    cooccurrences: list[Cooccurrence]
    grid_dims: tuple[int, int] = (64, 64)
    termination_penalty: float = 1.6
    side_assignment: dict = field(default_factory=dict)

    def __post_init__(self):
        self.catalog = check_catalog(self.catalog)
        self.cooccurrences = sorted(set(self.cooccurrences))
        self.grid_dims = (int(self.grid_dims[0]), int(self.grid_dims[1]))
        if not self.side_assignment:
            self.side_assignment = assign_sides(self.cooccurrences)
        types = {s.part_type for s in self.catalog}
        for co in self.cooccurrences:
            if co.t1 not in types or co.t2 not in types:
                raise ValueError(f"{co} references a part type outside the catalog")
            for v in co.views():
                if v not in self.side_assignment:
                    raise ValueError(f"no side assigned to {v}")

    @property
    def max_displacement(self) -> int:
        return max((max(abs(c.dr), abs(c.dc)) for c in self.cooccurrences), default=0)

    def to_dict(self) -> dict:
        return {
            "catalog": [s.to_dict() for s in self.catalog],
            "cooccurrences": [[c.t1, c.t2, c.dr, c.dc] for c in self.cooccurrences],
            "grid_dims": list(self.grid_dims),
            "penalty": self.termination_penalty,
            "sides": [[*k, v] for k, v in sorted(self.side_assignment.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PathfinderModel":
        sides = {tuple(int(x) for x in row[:4]): int(row[4]) for row in d.get("sides", [])}
        return cls(
            [PartShape.from_dict(s) for s in d["catalog"]],
            [Cooccurrence(*map(int, c)) for c in d["cooccurrences"]],
            tuple(d.get("grid_dims", (64, 64))),
            float(d.get("penalty", 1.6)),
            sides,
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "PathfinderModel":
        return cls.from_dict(json.loads(text))


def hof_for(part_var: int, side1, side2, penalty: float) -> MamHofSpec | None:
    """The continuation HOF of one placement; ``None`` when it has no links.

    An empty side is dropped, leaving one group with patterns ``(0)``,
    ``(1)`` and potentials ``0``, ``-penalty``.
    """
    p = -float(penalty)
    if side1 and side2:
        return MamHofSpec(part_var, (tuple(side1), tuple(side2)), PATTERNS_2, (0.0, p, p, 0.0))
    only = side1 or side2
    if not only:
        return None
    return MamHofSpec(part_var, (tuple(only),), ((0,), (1,)), (0.0, p))


@dataclass
class PathfinderMam:
    """Lazy MAM: attention variables and HOFs for a given set of placements."""

    model: PathfinderModel

    def links(self, placements) -> list[tuple[int, int, Cooccurrence]]:
        """``(i, j, co)`` for every co-occurring pair of ``placements`` (``i < j``)."""
        known = set(self.model.cooccurrences)
        reach = self.model.max_displacement
        out = []
        for i, p in enumerate(placements):
            for j in range(i + 1, len(placements)):
                q = placements[j]
                dr, dc = q.row - p.row, q.col - p.col
                if abs(dr) > reach or abs(dc) > reach:
                    continue
                co = Cooccurrence.of(p.part_type, q.part_type, dr, dc)
                if co in known:
                    out.append((i, j, co))
        return out

    def attach(self, builder: GraphBuilder, placements, part_ids) -> list[tuple[int, int, int]]:
        """Add attention variables and HOFs to ``builder``.

        Returns ``(attention id, i, j)`` per link (indices into
        ``placements``).
        """
        sides: list[tuple[list[int], list[int]]] = [([], []) for _ in placements]
        attn = []
        for i, j, co in self.links(placements):
            a = builder.add_variable(
                VariableKind.ATTENTION, f"a_{part_ids[i]}_{part_ids[j]}", endpoints=(part_ids[i], part_ids[j])
            )
            attn.append((a, i, j))
            pi, pj = placements[i], placements[j]
            si = self.model.side_assignment[(pi.part_type, pj.part_type, pj.row - pi.row, pj.col - pi.col)]
            sj = self.model.side_assignment[(pj.part_type, pi.part_type, pi.row - pj.row, pi.col - pj.col)]
            sides[i][si - 1].append(a)
            sides[j][sj - 1].append(a)
        for i, (s1, s2) in enumerate(sides):
            hof = hof_for(part_ids[i], s1, s2, self.model.termination_penalty)
            if hof is not None:
                builder.add_factor(hof)
        return attn

    def full_grid(self) -> list[Placement]:
        """Every placement of every type on the model grid (small grids only)."""
        rows, cols = self.model.grid_dims
        return [Placement(s.part_type, r, c) for s in self.model.catalog for r in range(rows) for c in range(cols)]


def build_pathfinder_mam(model: PathfinderModel) -> PathfinderMam:
    """Check the model and return its lazy MAM builder.

    Raises:
        ValueError: a co-occurrence displacement does not fit the grid.
    """
    rows, cols = model.grid_dims
    for co in model.cooccurrences:
        if abs(co.dr) >= rows or abs(co.dc) >= cols:
            raise ValueError(f"{co} does not fit a {rows}x{cols} grid")
    return PathfinderMam(model)


# --- inference -------------------------------------------------------------------


@dataclass(frozen=True)
class InferParams:
    sparsify: SparsifyParams = field(default_factory=SparsifyParams)
    bp: BpConfig = field(default_factory=BpConfig)
    restarts: int = 3
    noise: float = 1e-3
    radius: float = 3.0


@dataclass
class Decoding:
    """ON placements, their pixels, and ON attention edges (index pairs)."""

    parts: list[Placement]
    coverage: list[list[tuple[int, int]]]
    edges: list[tuple[int, int]]
    score: float = 0.0

    def components(self) -> np.ndarray:
        n = len(self.parts)
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        ij = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        adj = coo_matrix((np.ones(len(ij)), (ij[:, 0], ij[:, 1])), shape=(n, n))
        return connected_components(adj, directed=False)[1]

    def to_dict(self) -> dict:
        return {
            "parts": [[p.part_type, p.row, p.col] for p in self.parts],
            "edges": [list(e) for e in self.edges],
            "score": self.score,
        }


def prune_and_infer(instance, model: PathfinderModel, params: InferParams | None = None, *, seed=0) -> Decoding:
    """Sparsify, then run the MAM over the activated placements only.

    The joint graph holds the sparsifier (activated placements, their
    pixels, OR factors and priors) plus the continuation HOFs and attention
    variables between activated placements. Pixels are clamped.
    """
    params = params or InferParams()
    image = instance.image if isinstance(instance, PathfinderInstance) else as_binary_image(instance)
    ss_sparse, ss_mam = seed_sequence(seed).spawn(2)
    sp = sparsify(image, model.catalog, params.sparsify, seed=ss_sparse)
    on = set(sp.placements)
    active = [(p, cov) for p, cov in zip(sp.model.placements, sp.model.coverage) if p in on]
    if not active:
        return Decoding([], [], [], sp.score)
    placements = [p for p, _ in active]
    coverage = [cov for _, cov in active]

    sp_params = params.sparsify
    log01, log10 = safe_log(sp_params.pi01), safe_log(sp_params.pi10)
    pixels = sorted({px for cov in coverage for px in cov} | {tuple(map(int, px)) for px in np.argwhere(image)})
    b = GraphBuilder()
    pix_id = {px: b.add_variable(VariableKind.PIXEL, f"I_{px[0]}_{px[1]}") for px in pixels}
    part_ids = [b.add_variable(VariableKind.PART, f"x_t{p.part_type}_{p.row}_{p.col}") for p in placements]
    parents: dict[tuple[int, int], list[int]] = {px: [] for px in pixels}
    for vid, cov in zip(part_ids, coverage):
        for px in cov:
            parents[px].append(vid)
        b.add_factor(Unary(vid, (0.0, sp_params.part_prior)))
    for px in pixels:
        if parents[px]:
            b.add_factor(OrFactorSpec(pix_id[px], tuple(parents[px]), log01, log10))
        else:
            b.add_factor(Unary(pix_id[px], (0.0, log10)))
    attn = build_pathfinder_mam(model).attach(b, placements, part_ids)
    graph = b.build()

    truth = np.array([image[px] for px in pixels], dtype=np.int8)
    pix = np.array([pix_id[px] for px in pixels], dtype=np.int64)
    ev = np.zeros(graph.n_variables)
    ev[pix] = np.where(truth == 1, sp_params.pixel_evidence, -sp_params.pixel_evidence)

    def clamp(x):
        x = x.copy()
        x[pix] = truth
        return x

    rng = np.random.default_rng(ss_mam)
    score, x, _msgs, _diag = best_of_restarts(graph, ev, params.bp, params.restarts, params.noise, rng, clamp)
    keep = [k for k, vid in enumerate(part_ids) if x[vid]]
    new_index = {k: n for n, k in enumerate(keep)}
    edges = [(new_index[i], new_index[j]) for a, i, j in attn if x[a] and i in new_index and j in new_index]
    return Decoding([placements[k] for k in keep], [coverage[k] for k in keep], edges, score)


def nearest_part(decoding: Decoding, point, radius: float) -> int | None:
    """Index of the ON placement with a pixel closest to ``point`` (within ``radius``)."""
    best = None
    for k, cov in enumerate(decoding.coverage):
        d = min(math.hypot(r - point[0], c - point[1]) for r, c in cov)
        if d <= radius and (best is None or d < best[0]):
            best = (d, k)
    return None if best is None else best[1]


def classify(decoding: Decoding, marker_a, marker_b, radius: float = 3.0) -> str:
    """``same`` iff both markers map to ON parts in one attention component."""
    ka = nearest_part(decoding, marker_a, radius)
    kb = nearest_part(decoding, marker_b, radius)
    if ka is None or kb is None:
        return DIFFERENT
    comp = decoding.components()
    return SAME if comp[ka] == comp[kb] else DIFFERENT


# --- estimator -------------------------------------------------------------------


class PathfinderClassifier(BaseEstimator, ClassifierMixin):
    """Same/different classifier over :class:`PathfinderInstance` lists.

    ``fit`` picks the part catalog (the hand-made ``"line"`` dashes, or
    ``"learned"`` from the first ``n_learn_images`` training images),
    extracts co-occurrences from up to ``max_contours`` ground-truth
    contours and widens them by ``spatial``/``angular``. ``predict`` runs
    pruned inference and the marker rule on each instance.

    Labels are ``"same"`` / ``"different"``; ``y`` is ignored by ``fit``.
    """

    def __init__(
        self,
        catalog="line",
        n_parts: int = 16,
        patch_dims=(5, 5),
        max_contours: int = 200,
        n_learn_images: int = 10,
        min_rel_freq: float = 1e-3,
        spatial: int = 2,
        angular: int = 2,
        termination_penalty: float = 1.6,
        radius: float = 3.0,
        restarts: int = 3,
        seed: int = 0,
    ):
        self.catalog = catalog
        self.n_parts = n_parts
        self.patch_dims = patch_dims
        self.max_contours = max_contours
        self.n_learn_images = n_learn_images
        self.min_rel_freq = min_rel_freq
        self.spatial = spatial
        self.angular = angular
        self.termination_penalty = termination_penalty
        self.radius = radius
        self.restarts = restarts
        self.seed = seed

    def _catalog(self, instances, ss):
        if self.catalog == "line":
            return line_catalog(self.n_parts)
        if self.catalog == "learned":
            imgs = [inst.image for inst in instances[: self.n_learn_images]]
            res = learn_parts(imgs, self.n_parts, self.patch_dims, LearnParams(restarts=1, seed_strength=0.3), seed=ss)
            return [s.centered() for s in res.catalog if not s.is_empty]
        return check_catalog(self.catalog)

    def fit(self, X, y=None):
        instances = list(X)
        if not instances:
            raise ValueError("need at least one training instance")
        ss_learn, ss_co = seed_sequence(self.seed).spawn(2)
        catalog = self._catalog(instances, ss_learn)
        contours = [c for inst in instances for c in inst.contours][: self.max_contours]
        dims = instances[0].image.shape
        cos, self.counts_ = extract_cooccurrences(contours, catalog, dims, self.min_rel_freq, seed=ss_co)
        self.model_ = PathfinderModel(
            catalog, expand_cooccurrences(cos, catalog, self.spatial, self.angular), dims, self.termination_penalty
        )
        self.classes_ = np.array([DIFFERENT, SAME])
        return self

    def decode(self, X) -> list[Decoding]:
        check_is_fitted(self, "model_")
        params = InferParams(restarts=self.restarts, radius=self.radius)
        instances = list(X)
        seeds = np.random.SeedSequence(self.seed + 1).spawn(len(instances))
        return [prune_and_infer(inst, self.model_, params, seed=ss) for inst, ss in zip(instances, seeds)]

    def predict(self, X) -> np.ndarray:
        instances = list(X)
        decs = self.decode(instances)
        return np.array([classify(d, i.marker_a, i.marker_b, self.radius) for d, i in zip(decs, instances)])
