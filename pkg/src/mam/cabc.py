"""Desk-scale cABC: distorted letters, elastic graphs and letter matching.

A training letter is sparsified into part activations; those become the
vertices of an elastic graph whose edges (built greedily, see
:func:`get_edges`) bound how far the relative position of two vertices may
drift. A test image holds two overlapping letters. Cheap feedforward
scores pick promising (graph, anchor) candidates, MPBP on each candidate's
object-specific MAM places its vertices, and the best-explaining pair of
candidates decides which letter each marker belongs to.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .bp import BpConfig, beliefs, run_mpbp
from .factors import MamHofSpec
from .graph import FactorGraph, GraphBuilder, VariableKind
from .sparsifier import PartShape, SparsifyParams, as_binary_image, disk, seed_sequence, sparsify

SAME = "same"
DIFFERENT = "different"

ON_EVIDENCE = 1.0
OFF_EVIDENCE = -0.89
ABSENT = -1000.0


# --- letter generator ------------------------------------------------------------

# Strokes as polylines in the unit box, (row, col).
TEMPLATES: dict[str, list[list[tuple[float, float]]]] = {
    "L": [[(0, 0.15), (1, 0.15), (1, 0.9)]],
    "T": [[(0, 0), (0, 1)], [(0, 0.5), (1, 0.5)]],
    "V": [[(0, 0), (1, 0.5), (0, 1)]],
    "Z": [[(0, 0.05), (0, 0.95), (1, 0.05), (1, 0.95)]],
    "X": [[(0, 0.05), (1, 0.95)], [(0, 0.95), (1, 0.05)]],
    "H": [[(0, 0.1), (1, 0.1)], [(0, 0.9), (1, 0.9)], [(0.5, 0.1), (0.5, 0.9)]],
    "N": [[(1, 0.1), (0, 0.1), (1, 0.9), (0, 0.9)]],
    "C": [[(0.5 - 0.5 * math.sin(a), 0.5 - 0.45 * math.cos(a))
           for a in np.linspace(-0.25 * math.pi, 1.25 * math.pi, 13)]],
}


@dataclass(frozen=True)
class LetterParams:
    """Shape and noise of one rendered letter (sizes in pixels)."""

    size: float = 18.0
    scale_jitter: float = 0.1
    max_rotation: float = math.radians(10)
    max_shear: float = 0.15
    warp: float = 1.2
    stroke_radius: float = 1.0
    noise: float = 0.003


@dataclass(frozen=True)
class CabcParams:
    image_dims: tuple[int, int] = (48, 48)
    letters: tuple[str, ...] = tuple(TEMPLATES)
    letter: LetterParams = field(default_factory=LetterParams)
    min_center_gap: float = 8.0
    max_center_gap: float = 14.0
    marker_clearance: float = 3.0
    max_retries: int = 200


def _sample_stroke(points, step: float = 0.02) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    out = []
    for a, b in zip(pts, pts[1:]):
        n = max(2, int(math.ceil(np.linalg.norm(b - a) / step)))
        t = np.linspace(0.0, 1.0, n, endpoint=False)[:, None]
        out.append(a + t * (b - a))
    out.append(pts[-1:])
    return np.concatenate(out)


def letter_points(template: str, rng: np.random.Generator, params: LetterParams) -> np.ndarray:
    """Distorted stroke centre points of a letter, centred on the origin."""
    strokes = TEMPLATES[template]
    pts = np.concatenate([_sample_stroke(s) for s in strokes]) - 0.5
    size = params.size * (1.0 + rng.uniform(-params.scale_jitter, params.scale_jitter))
    th = rng.uniform(-params.max_rotation, params.max_rotation)
    sh = rng.uniform(-params.max_shear, params.max_shear)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    shear = np.array([[1.0, 0.0], [sh, 1.0]])
    pts = pts @ (size * rot @ shear).T
    # smooth warp: one random low-frequency sinusoid per axis
    if params.warp > 0:
        for axis in range(2):
            k = rng.uniform(0.5, 1.5, size=2) * 2 * math.pi / size
            phase = rng.uniform(0, 2 * math.pi)
            pts[:, axis] += params.warp * np.sin(pts @ k + phase)
    return pts


def render_points(pts: np.ndarray, dims, center, radius: float) -> np.ndarray:
    """Binary image of discs of ``radius`` around ``pts + center``."""
    img = np.zeros(dims, dtype=np.uint8)
    R = int(math.ceil(radius))
    offs = [(dr, dc) for dr in range(-R, R + 1) for dc in range(-R, R + 1) if dr * dr + dc * dc <= radius * radius]
    centres = np.unique(np.rint(pts + np.asarray(center)).astype(np.int64), axis=0)
    for dr, dc in offs:
        r, c = centres[:, 0] + dr, centres[:, 1] + dc
        ok = (r >= 0) & (r < dims[0]) & (c >= 0) & (c < dims[1])
        img[r[ok], c[ok]] = 1
    return img


def add_noise(img: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate <= 0:
        return img
    flip = rng.random(img.shape) < rate
    return np.where(flip, 1 - img, img).astype(np.uint8)


def render_letter(template: str, dims=(32, 32), params: LetterParams | None = None, *, seed=0) -> np.ndarray:
    """One distorted, noisy letter centred in an image of ``dims``."""
    params = params or LetterParams()
    rng = np.random.default_rng(seed_sequence(seed))
    pts = letter_points(template, rng, params)
    img = render_points(pts, dims, ((dims[0] - 1) / 2, (dims[1] - 1) / 2), params.stroke_radius)
    return add_noise(img, params.noise, rng)


class PlacementError(RuntimeError):
    """Letters or markers could not be placed within the retry cap."""


@dataclass
class CabcInstance:
    image: np.ndarray
    marker_a: tuple[int, int]
    marker_b: tuple[int, int]
    label: str
    letters: tuple[str, str]
    masks: np.ndarray  # (2, rows, cols) clean per-letter strokes

    def to_dict(self) -> dict:
        return {
            "marker_a": list(self.marker_a),
            "marker_b": list(self.marker_b),
            "label": self.label,
            "letters": list(self.letters),
            "masks": [np.argwhere(m).tolist() for m in self.masks],
        }

    @classmethod
    def from_dict(cls, image, d: dict) -> "CabcInstance":
        image = as_binary_image(image)
        masks = np.zeros((2,) + image.shape, dtype=np.uint8)
        for k, pix in enumerate(d.get("masks", [[], []])):
            for r, c in pix:
                masks[k, r, c] = 1
        return cls(image, tuple(d["marker_a"]), tuple(d["marker_b"]), d["label"], tuple(d["letters"]), masks)


def generate_cabc(params: CabcParams | None = None, *, seed=0, label: str | None = None) -> CabcInstance:
    """Two overlapping distorted letters and two markers.

    The letters are distinct templates whose centres lie
    ``min_center_gap``..``max_center_gap`` apart. Markers sit on stroke
    pixels at least ``marker_clearance`` away from the other letter, both
    on the first letter for ``same`` and one on each for ``different``.
    """
    params = params or CabcParams()
    rng = np.random.default_rng(seed_sequence(seed))
    if label is None:
        label = SAME if rng.random() < 0.5 else DIFFERENT
    if label not in (SAME, DIFFERENT):
        raise ValueError(f"label must be {SAME!r} or {DIFFERENT!r}")
    rows, cols = params.image_dims
    for _ in range(params.max_retries):
        names = rng.choice(len(params.letters), size=2, replace=False)
        letters = (params.letters[names[0]], params.letters[names[1]])
        pts = [letter_points(t, rng, params.letter) for t in letters]
        gap = rng.uniform(params.min_center_gap, params.max_center_gap)
        ang = rng.uniform(0, 2 * math.pi)
        offset = np.array([math.sin(ang), math.cos(ang)]) * gap / 2
        mid = np.array([(rows - 1) / 2, (cols - 1) / 2]) + rng.uniform(-2, 2, size=2)
        centres = [mid - offset, mid + offset]
        pad = params.letter.stroke_radius + 1
        if any((p + c).min(axis=0).min() < pad or ((p + c) >= np.array([rows, cols]) - pad).any()
               for p, c in zip(pts, centres)):
            continue
        masks = np.stack([render_points(p, (rows, cols), c, params.letter.stroke_radius) for p, c in zip(pts, centres)])
        own = []
        for k in range(2):
            other = np.argwhere(masks[1 - k])
            cand = np.argwhere(masks[k])
            d = np.sqrt(((cand[:, None, :] - other[None, :, :]) ** 2).sum(-1)).min(axis=1)
            own.append(cand[d >= params.marker_clearance])
        if len(own[0]) < 2 or len(own[1]) < 1:
            continue
        a = tuple(int(v) for v in own[0][rng.integers(len(own[0]))])
        if label == SAME:
            far = own[0][np.abs(own[0] - np.asarray(a)).max(axis=1) >= 4]
            if not len(far):
                continue
            b = tuple(int(v) for v in far[rng.integers(len(far))])
        else:
            b = tuple(int(v) for v in own[1][rng.integers(len(own[1]))])
        image = add_noise(masks.max(axis=0), params.letter.noise, rng)
        image[a] = image[b] = 1
        return CabcInstance(image, a, b, label, letters, masks)
    raise PlacementError(f"could not place two letters in {params.max_retries} tries")


def generate_cabc_dataset(n: int, params: CabcParams | None = None, *, seed=0, balanced: bool = True):
    seeds = seed_sequence(seed).spawn(n)
    out = []
    for i, ss in enumerate(seeds):
        label = (SAME if i % 2 == 0 else DIFFERENT) if balanced else None
        out.append(generate_cabc(params, seed=ss, label=label))
    return out


def training_letters(n_per_letter: int, params: CabcParams | None = None, *, seed=0, dims=(32, 32)):
    """``(template, image)`` pairs, ``n_per_letter`` variations of each template."""
    params = params or CabcParams()
    jobs = [t for _ in range(n_per_letter) for t in params.letters]
    seeds = seed_sequence(seed).spawn(len(jobs))
    return [(t, render_letter(t, dims, params.letter, seed=ss)) for t, ss in zip(jobs, seeds)]


# --- edges of an elastic graph ---------------------------------------------------


@dataclass(frozen=True)
class EdgeParams:
    perturbation: float = 7.0
    tolerance: float = 2.0
    max_length: float = 200.0

    def __post_init__(self):
        if not (self.perturbation > 0 and self.tolerance > 0 and self.max_length > 0):
            raise ValueError("perturbation, tolerance and max_length must be positive")


@dataclass
class RefineStep:
    edge: tuple[int, int]
    ideal: float
    radius: int
    accumulator: float


def potential_edges(locations, max_length: float) -> tuple[list[tuple[int, int]], dict]:
    """Vertex pairs closer than ``max_length``, nearest first (stable on ties)."""
    pts = np.asarray(locations, dtype=float).reshape(-1, 2)
    n = len(pts)
    dist = {}
    pairs = []
    for u in range(n):
        for v in range(u + 1, n):
            d = float(math.hypot(*(pts[v] - pts[u])))
            if d < max_length:
                dist[(u, v)] = d
                pairs.append((u, v))
    pairs.sort(key=lambda e: dist[e])
    return pairs, dist


def _ideal_radius(d: float, p: float) -> float:
    return max(1.0, d / p)


def _path_length(n: int, radius: dict, u: int, v: int) -> float:
    if not radius:
        return math.inf
    ij = np.array(list(radius), dtype=np.int64)
    w = np.array(list(radius.values()), dtype=float)
    adj = coo_matrix((w, (ij[:, 0], ij[:, 1])), shape=(n, n)).tocsr()
    return float(dijkstra(adj, directed=False, indices=u)[v])


def add_edges(n: int, pairs, dist, p: float, t: float) -> dict[tuple[int, int], int]:
    """Greedy edge set: keep a pair only if existing edges cannot already enforce it."""
    radius: dict[tuple[int, int], int] = {}
    for u, v in pairs:
        i = _ideal_radius(dist[(u, v)], p)
        if _path_length(n, radius, u, v) > i * t:
            radius[(u, v)] = math.ceil(i)
    return radius


def edge_dfs(n: int, edges, start: int = 0) -> list[tuple[int, int]]:
    """Edges reachable from ``start`` in depth-first discovery order.

    Neighbours are visited in increasing vertex order and every edge is
    emitted once (one shared visited list across the recursion).
    """
    nbrs: dict[int, list[int]] = {k: [] for k in range(n)}
    for u, v in edges:
        nbrs[u].append(v)
        nbrs[v].append(u)
    order: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()

    def visit(u):
        for v in sorted(nbrs[u]):
            e = (min(u, v), max(u, v))
            if e not in seen:
                seen.add(e)
                order.append(e)
                visit(v)

    if n:
        visit(start)
    return order


def refine_edges(order, dist, radius, p: float, trace: list | None = None) -> dict[tuple[int, int], int]:
    """Round each ideal radius up or down, keeping the running rounding error small."""
    radius = dict(radius)
    eta = 0.0
    for e in order:
        i = _ideal_radius(dist[e], p)
        up, down = math.ceil(i), math.floor(i)
        if abs(up - i + eta) < abs(down - i + eta):
            radius[e] = up
            eta = up - i + eta
        else:
            radius[e] = down
            eta = down - i + eta
        if trace is not None:
            trace.append(RefineStep(e, i, radius[e], eta))
    return radius


def get_edges(locations, params: EdgeParams | None = None, *, trace: list | None = None):
    """Edges and integer perturb radii for vertices at ``locations``.

    Candidate pairs are processed nearest first; a pair becomes an edge
    (radius ``ceil(i)``, ``i = max(1, d / p)``) only when the shortest path
    between its ends, weighted by current radii, exceeds ``i * t``. The
    radii are then re-rounded along a depth-first edge order started from
    vertex 0.

    Returns:
        ``{(u, v): radius}`` with ``u < v``.
    """
    params = params or EdgeParams()
    n = len(locations)
    if n == 0:
        raise ValueError("need at least one vertex")
    pairs, dist = potential_edges(locations, params.max_length)
    radius = add_edges(n, pairs, dist, params.perturbation, params.tolerance)
    order = edge_dfs(n, radius, 0)
    return refine_edges(order, dist, radius, params.perturbation, trace)


def refine_accumulator_property(trace) -> bool:
    """The rounding accumulator never leaves ``[-0.5, 0.5]``."""
    return all(abs(step.accumulator) <= 0.5 + 1e-12 for step in trace)


# --- elastic graphs ------------------------------------------------------------------


@dataclass
class ElasticGraph:
    """Vertices at reference locations joined by elastic constraints."""

    vertices: list[tuple[int, int]]
    edges: dict[tuple[int, int], int]
    eta: int = 1
    part_shape: PartShape = field(default_factory=lambda: disk(0, 2.0))
    label: str = ""

    def __post_init__(self):
        self.vertices = [(int(r), int(c)) for r, c in self.vertices]
        edges = {}
        for (u, v), g in dict(self.edges).items():
            u, v, g = int(u), int(v), int(g)
            if u == v or not (0 <= u < len(self.vertices) and 0 <= v < len(self.vertices)):
                raise ValueError(f"bad edge ({u}, {v})")
            if g < 1:
                raise ValueError("perturb radius must be at least 1")
            edges[(min(u, v), max(u, v))] = g
        self.edges = dict(sorted(edges.items()))
        if int(self.eta) < 1:
            raise ValueError("eta must be at least 1")
        self.eta = int(self.eta)

    @property
    def anchor(self) -> tuple[int, int]:
        return min(r for r, _ in self.vertices), min(c for _, c in self.vertices)

    @property
    def extent(self) -> tuple[int, int]:
        """Largest reference offset from the anchor, per axis."""
        ar, ac = self.anchor
        return max(r for r, _ in self.vertices) - ar, max(c for _, c in self.vertices) - ac

    def moved(self, anchor, eta: int | None = None) -> "ElasticGraph":
        """Copy with its anchor point at ``anchor``."""
        ar, ac = self.anchor
        dr, dc = int(anchor[0]) - ar, int(anchor[1]) - ac
        return ElasticGraph([(r + dr, c + dc) for r, c in self.vertices], self.edges,
                            self.eta if eta is None else eta, self.part_shape, self.label)

    def neighbors(self, v: int) -> list[int]:
        return sorted([b for a, b in self.edges if a == v] + [a for a, b in self.edges if b == v])

    def is_connected(self) -> bool:
        n = len(self.vertices)
        if n <= 1:
            return True
        ij = np.array(list(self.edges), dtype=np.int64).reshape(-1, 2)
        adj = coo_matrix((np.ones(len(ij)), (ij[:, 0], ij[:, 1])), shape=(n, n))
        return connected_components(adj, directed=False)[0] == 1

    def to_dict(self) -> dict:
        return {
            "vertices": [list(v) for v in self.vertices],
            "edges": [[u, v, g] for (u, v), g in self.edges.items()],
            "eta": self.eta,
            "part_shape": self.part_shape.to_dict(),
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ElasticGraph":
        return cls(
            [tuple(v) for v in d["vertices"]],
            {(int(u), int(v)): int(g) for u, v, g in d["edges"]},
            int(d.get("eta", 1)),
            PartShape.from_dict(d["part_shape"]),
            d.get("label", ""),
        )


GRAPH_SCHEMA_KEYS = {"vertices", "edges", "eta", "part_shape"}


def validate_graph_dict(d: dict) -> None:
    """Raise ``ValueError`` unless ``d`` is a well-formed elastic graph document."""
    missing = GRAPH_SCHEMA_KEYS - set(d)
    if missing:
        raise ValueError(f"elastic graph is missing {sorted(missing)}")
    if not all(isinstance(v, list) and len(v) == 2 for v in d["vertices"]):
        raise ValueError("vertices must be [row, col] pairs")
    if not all(isinstance(e, list) and len(e) == 3 for e in d["edges"]):
        raise ValueError("edges must be [u, v, radius] triples")
    ElasticGraph.from_dict(d)


def cabc_sparsify_params(**overrides) -> SparsifyParams:
    """Sparsifier constants for letters: loose OR leaks and a strong sparsity prior.

    With the loose ``pi01`` lightly damped MPBP oscillates between dense
    decodes, so these runs use heavier damping.
    """
    defaults = {"pi01": 0.45, "pi10": 0.05, "part_prior": -20.0, "bp": BpConfig(max_iters=300, damping=0.8)}
    return SparsifyParams(**{**defaults, **overrides})


def extract_elastic_graph(letter_image, part_shape: PartShape | None = None, sparsify_params=None,
                          edge_params: EdgeParams | None = None, *, seed=0, label: str = "") -> ElasticGraph:
    """Elastic graph of a single letter: sparsified parts plus greedy edges.

    Vertices are listed in row-major order of their activations.

    Raises:
        ValueError: the image sparsifies to nothing.
    """
    part_shape = part_shape or disk(0, 2.0)
    img = as_binary_image(letter_image)
    res = sparsify(img, [part_shape], sparsify_params or cabc_sparsify_params(), seed=seed)
    locs = sorted((p.row, p.col) for p in res.placements)
    if not locs:
        raise ValueError("letter image has no part activations")
    return ElasticGraph(locs, get_edges(locs, edge_params), 1, part_shape, label)


# --- feedforward scoring ----------------------------------------------------------


def pixel_evidence(image) -> np.ndarray:
    img = as_binary_image(image)
    return np.where(img == 1, ON_EVIDENCE, OFF_EVIDENCE)


def part_evidence(evidence: np.ndarray, shape: PartShape) -> np.ndarray:
    """Summed pixel evidence under ``shape`` anchored at every pixel.

    Shape pixels falling outside the image count as OFF.
    """
    rows, cols = evidence.shape
    pad = max(abs(x) for o in shape.offsets for x in o)
    padded = np.pad(evidence, pad, constant_values=OFF_EVIDENCE)
    out = np.zeros((rows, cols))
    for dr, dc in shape.offsets:
        out += padded[pad + dr: pad + dr + rows, pad + dc: pad + dc + cols]
    return out


def window_max(values: np.ndarray, eta: int) -> np.ndarray:
    """``out[r, c] = max(values[r:r+eta, c:c+eta])``, clipped at the far border."""
    padded = np.pad(values, ((0, eta - 1), (0, eta - 1)), constant_values=-np.inf)
    rows = sliding_window_view(padded, eta, axis=0).max(axis=-1)
    return sliding_window_view(rows, eta, axis=1).max(axis=-1)


def _check_placed(graph: ElasticGraph, dims) -> None:
    rows, cols = dims
    for r, c in graph.vertices:
        if not (0 <= r < rows and 0 <= c < cols):
            raise ValueError(f"vertex reference location {(r, c)} is outside the {rows}x{cols} grid")


def score_elastic_graph(graph: ElasticGraph, evidence, eta: int | None = None) -> float:
    """Normalised sum over vertices of the best part evidence within the slack window.

    Each vertex may sit anywhere in ``[r_v, r_v + eta) x [c_v, c_v + eta)``
    (inside the grid); the sum is divided by ``|V| ** 0.76``.

    Raises:
        ValueError: a reference location lies outside the grid.
    """
    ev = np.asarray(evidence, dtype=float)
    _check_placed(graph, ev.shape)
    best = window_max(part_evidence(ev, graph.part_shape), eta or graph.eta)
    rr = np.array([r for r, _ in graph.vertices])
    cc = np.array([c for _, c in graph.vertices])
    return float(best[rr, cc].sum()) / len(graph.vertices) ** 0.76


@dataclass(frozen=True)
class SearchParams:
    eta_search: int = 4
    anchor_stride: int = 3
    top_per_anchor: int = 3
    top_overall: int = 20


@dataclass(frozen=True)
class CandidateMatch:
    graph_index: int
    anchor: tuple[int, int]
    score: float


def candidate_search(graphs, image, params: SearchParams | None = None) -> list[CandidateMatch]:
    """Promising (graph, anchor) pairs by feedforward score.

    Anchors lie on a stride grid from ``(0, 0)``; a graph is only tried at
    anchors that keep all its reference locations inside the image. Each
    anchor keeps its ``top_per_anchor`` best graphs and the best
    ``top_overall`` of those survive, sorted by score (ties by graph index,
    then anchor).
    """
    params = params or SearchParams()
    ev = pixel_evidence(image)
    rows, cols = ev.shape
    cache: dict[PartShape, np.ndarray] = {}
    per_anchor: dict[tuple[int, int], list[tuple[float, int]]] = {}
    for gi, g in enumerate(graphs):
        shape = g.part_shape
        if shape not in cache:
            cache[shape] = window_max(part_evidence(ev, shape), params.eta_search)
        best = cache[shape]
        ar0, ac0 = g.anchor
        er, ec = g.extent
        a_r = np.arange(0, rows - er, params.anchor_stride)
        a_c = np.arange(0, cols - ec, params.anchor_stride)
        if not len(a_r) or not len(a_c):
            continue
        total = np.zeros((len(a_r), len(a_c)))
        for r, c in g.vertices:
            total += best[np.ix_(a_r + (r - ar0), a_c + (c - ac0))]
        total /= len(g.vertices) ** 0.76
        for i, ar in enumerate(a_r.tolist()):
            for j, ac in enumerate(a_c.tolist()):
                per_anchor.setdefault((ar, ac), []).append((-float(total[i, j]), gi))
    pool = []
    for anchor, scored in per_anchor.items():
        for neg, gi in heapq.nsmallest(params.top_per_anchor, scored):
            pool.append((neg, gi, anchor))
    pool.sort()
    return [CandidateMatch(gi, anchor, -neg) for neg, gi, anchor in pool[: params.top_overall]]


# --- object-specific MAMs ------------------------------------------------------------


@dataclass
class LetterFragment:
    """Variables one elastic graph contributes to a MAM."""

    locations: list[np.ndarray]  # per vertex, (n, 2) allowed (row, col)
    location_ids: list[np.ndarray]  # per vertex, variable ids parallel to locations
    topdown_ids: list[np.ndarray]
    lateral: list[tuple[int, int, int]]  # (attention id, location id, location id)


def allowed_locations(graph: ElasticGraph, eta: int, dims) -> list[np.ndarray]:
    """Per vertex, its in-grid locations in ``[r_v, r_v + eta) x [c_v, c_v + eta)``."""
    _check_placed(graph, dims)
    rows, cols = dims
    di, dj = np.meshgrid(np.arange(eta), np.arange(eta), indexing="ij")
    shift = np.stack([di.ravel(), dj.ravel()], axis=1)
    out = []
    for r, c in graph.vertices:
        loc = shift + np.array([r, c])
        out.append(loc[(loc[:, 0] < rows) & (loc[:, 1] < cols)])
    return out


def _edge_pairs(graph: ElasticGraph, locs, alive):
    """Per edge, index pairs of alive locations within the perturb radius."""
    out = {}
    for (u, v), g in graph.edges.items():
        ref = np.subtract(graph.vertices[v], graph.vertices[u])
        iu, iv = np.flatnonzero(alive[u]), np.flatnonzero(alive[v])
        d = locs[v][iv][None, :, :] - locs[u][iu][:, None, :] - ref
        a, b = np.nonzero(np.abs(d).max(axis=-1) <= g)
        out[(u, v)] = (iu[a], iv[b])
    return out


def prune_locations(graph: ElasticGraph, locs) -> list[np.ndarray]:
    """Drop locations that have no admissible partner for some neighbour.

    Such a location can never be ON (its factor needs one lateral link per
    neighbour), and its factor would otherwise have an empty group.
    Repeats until stable.
    """
    alive = [np.ones(len(l), dtype=bool) for l in locs]
    while True:
        pairs = _edge_pairs(graph, locs, alive)
        nxt = [np.zeros(len(l), dtype=bool) for l in locs]
        has = [dict() for _ in locs]
        for (u, v), (a, b) in pairs.items():
            hu = np.zeros(len(locs[u]), dtype=bool)
            hu[a] = True
            hv = np.zeros(len(locs[v]), dtype=bool)
            hv[b] = True
            has[u][v] = hu
            has[v][u] = hv
        for k in range(len(locs)):
            m = alive[k].copy()
            for h in has[k].values():
                m &= h
            nxt[k] = m
        if all((x == y).all() for x, y in zip(nxt, alive)):
            return alive
        alive = nxt


def add_letter(builder: GraphBuilder, graph: ElasticGraph, eta: int, dims, top: int, tag: str = "") -> LetterFragment:
    """Add one elastic graph's location, top-down and lateral variables plus location HOFs."""
    locs = allowed_locations(graph, eta, dims)
    alive = prune_locations(graph, locs)
    if any(not a.any() for a in alive):
        raise ValueError("some vertex has no admissible location")
    locs = [l[a] for l, a in zip(locs, alive)]
    loc_ids, td_ids = [], []
    for v, l in enumerate(locs):
        ids = np.array([builder.add_variable(VariableKind.PART, f"x{tag}_v{v}_{r}_{c}") for r, c in l.tolist()],
                       dtype=np.int64)
        loc_ids.append(ids)
        td_ids.append(np.array([builder.add_variable(VariableKind.ATTENTION, f"a{tag}_top_{i}", endpoints=(top, i))
                                for i in ids.tolist()], dtype=np.int64))
    full = [np.ones(len(l), dtype=bool) for l in locs]
    links: dict[int, dict[int, list[int]]] = {int(i): {} for ids in loc_ids for i in ids}
    lateral = []
    for (u, v), (a, b) in _edge_pairs(graph, locs, full).items():
        for i, j in zip(loc_ids[u][a].tolist(), loc_ids[v][b].tolist()):
            att = builder.add_variable(VariableKind.ATTENTION, f"a{tag}_{i}_{j}", endpoints=(i, j))
            lateral.append((att, i, j))
            links[i].setdefault(v, []).append(att)
            links[j].setdefault(u, []).append(att)
    for v, (ids, tds) in enumerate(zip(loc_ids, td_ids)):
        nbrs = graph.neighbors(v)
        for i, td in zip(ids.tolist(), tds.tolist()):
            groups = tuple(tuple(links[i][u]) for u in nbrs) + ((td,),)
            k = len(groups)
            builder.add_factor(MamHofSpec(i, groups, ((0,) * k, (1,) * k), (ABSENT, 0.0)))
    return LetterFragment(locs, loc_ids, td_ids, lateral)


@dataclass
class LetterMam:
    graph: FactorGraph
    top: int
    fragments: list[LetterFragment]


def build_object_mam(graph: ElasticGraph, eta: int, dims) -> LetterMam:
    """Object-specific MAM of one placed elastic graph.

    The top variable's factor has one group per vertex (its top-down
    links) and patterns all-OFF / all-ON at potential 0, so a present
    letter has every vertex at exactly one location.
    """
    b = GraphBuilder()
    top = b.add_variable(VariableKind.PART, "x_letter")
    frag = add_letter(b, graph, eta, dims, top)
    groups = tuple(tuple(t.tolist()) for t in frag.topdown_ids)
    k = len(groups)
    b.add_factor(MamHofSpec(top, groups, ((0,) * k, (1,) * k), (0.0, 0.0)))
    return LetterMam(b.build(), top, [frag])


def merge_mams(graphs, eta: int, dims) -> LetterMam:
    """One MAM for "exactly one of these letters is present".

    All letters share one top variable whose factor has a group per
    (letter, vertex); its patterns are all-OFF (potential ``-1000``) and one
    block indicator per letter (potential 0).
    """
    graphs = list(graphs)
    if not graphs:
        raise ValueError("need at least one elastic graph")
    b = GraphBuilder()
    top = b.add_variable(VariableKind.PART, "x_letter")
    frags = [add_letter(b, g, eta, dims, top, tag=f"{n}") for n, g in enumerate(graphs)]
    groups = tuple(tuple(t.tolist()) for f in frags for t in f.topdown_ids)
    sizes = [len(f.topdown_ids) for f in frags]
    patterns = [(0,) * len(groups)]
    start = 0
    for size in sizes:
        patterns.append(tuple(int(start <= j < start + size) for j in range(len(groups))))
        start += size
    potentials = (ABSENT,) + (0.0,) * len(sizes)
    b.add_factor(MamHofSpec(top, groups, tuple(patterns), potentials))
    return LetterMam(b.build(), top, frags)


# --- refinement and pairing ------------------------------------------------------------


@dataclass(frozen=True)
class RefineParams:
    eta_refine: int = 6
    overlap_penalty: float = 0.33
    bp: BpConfig = field(default_factory=lambda: BpConfig(max_iters=100, damping=0.5))


@dataclass
class PlacedLetter:
    candidate: CandidateMatch
    locations: list[tuple[int, int]]
    counts: np.ndarray  # parts covering each pixel

    @property
    def covered(self) -> np.ndarray:
        return np.argwhere(self.counts > 0)


def refine_candidate(graph: ElasticGraph, candidate: CandidateMatch, evidence: np.ndarray,
                     params: RefineParams | None = None) -> PlacedLetter:
    """MPBP on the candidate's object MAM; each vertex goes to its best-belief location."""
    params = params or RefineParams()
    placed = graph.moved(candidate.anchor)
    mam = build_object_mam(placed, params.eta_refine, evidence.shape)
    e_map = part_evidence(evidence, graph.part_shape)
    frag = mam.fragments[0]
    ev = np.zeros(mam.graph.n_variables)
    for locs, ids in zip(frag.locations, frag.location_ids):
        ev[ids] = e_map[locs[:, 0], locs[:, 1]]
    msgs, _diag = run_mpbp(mam.graph, ev, params.bp)
    bel = beliefs(mam.graph, msgs, ev)
    chosen = []
    counts = np.zeros(evidence.shape, dtype=np.int64)
    rows, cols = evidence.shape
    for locs, ids in zip(frag.locations, frag.location_ids):
        r, c = locs[int(np.argmax(bel[ids]))].tolist()
        chosen.append((r, c))
        for dr, dc in graph.part_shape.offsets:
            if 0 <= r + dr < rows and 0 <= c + dc < cols:
                counts[r + dr, c + dc] += 1
    return PlacedLetter(candidate, chosen, counts)


def pair_count(n_candidates: int) -> int:
    return math.comb(n_candidates, 2)


def pair_scores(letters, evidence: np.ndarray, overlap_penalty: float) -> np.ndarray:
    """Matrix of pair scores (upper triangle meaningful, rest ``-inf``).

    A pair scores the summed evidence over the union of covered pixels,
    less ``overlap_penalty`` for every part beyond the first on a pixel.
    """
    k = len(letters)
    m = evidence.ravel()
    counts = np.array([l.counts.ravel() for l in letters], dtype=float).reshape(k, -1)
    cov = (counts > 0).astype(float)
    own_ev = cov @ m
    own_n = counts.sum(axis=1)
    own_cov = cov.sum(axis=1)
    both_ev = (cov * m) @ cov.T
    both_cov = cov @ cov.T
    union_ev = own_ev[:, None] + own_ev[None, :] - both_ev
    union_cov = own_cov[:, None] + own_cov[None, :] - both_cov
    extra = own_n[:, None] + own_n[None, :] - union_cov
    out = union_ev - overlap_penalty * extra
    out[np.tril_indices(k)] = -np.inf
    return out


@dataclass
class Interpretation:
    letters: list[PlacedLetter]
    pair: tuple[int, int]
    score: float
    n_pairs: int

    @property
    def chosen(self) -> tuple[PlacedLetter, PlacedLetter]:
        return self.letters[self.pair[0]], self.letters[self.pair[1]]


def refine_and_pair(candidates, graphs, image, params: RefineParams | None = None) -> Interpretation:
    """Refine every candidate, then pick the best-scoring pair.

    Candidates whose MAM cannot be built are skipped. Ties between pairs go
    to the lexicographically smallest index pair.

    Raises:
        ValueError: fewer than two usable candidates.
    """
    params = params or RefineParams()
    ev = pixel_evidence(image)
    letters = []
    for cand in candidates:
        try:
            letters.append(refine_candidate(graphs[cand.graph_index], cand, ev, params))
        except ValueError:
            continue
    if len(letters) < 2:
        raise ValueError("need at least two usable candidates")
    scores = pair_scores(letters, ev, params.overlap_penalty)
    flat = int(np.argmax(scores))
    i, j = divmod(flat, len(letters))
    return Interpretation(letters, (i, j), float(scores[i, j]), pair_count(len(letters)))


def assign_marker(letters, marker) -> int:
    """Index of the letter with a covered pixel nearest ``marker`` (ties: higher score, then lower index)."""
    best = None
    for k, l in enumerate(letters):
        d = float(np.sqrt(((l.covered - np.asarray(marker)) ** 2).sum(axis=1)).min()) if l.counts.any() else math.inf
        key = (d, -l.candidate.score, k)
        if best is None or key < best:
            best = key
    return best[2]


# --- model and classification ----------------------------------------------------------


@dataclass
class CabcModel:
    """Elastic graphs (anchored at the origin) plus the cascade settings."""

    graphs: list[ElasticGraph]
    search: SearchParams = field(default_factory=SearchParams)
    refine: RefineParams = field(default_factory=RefineParams)

    def to_dict(self) -> dict:
        bp = self.refine.bp
        return {
            "graphs": [g.to_dict() for g in self.graphs],
            "search": dict(self.search.__dict__),
            "refine": {
                "eta_refine": self.refine.eta_refine,
                "overlap_penalty": self.refine.overlap_penalty,
                "bp": dict(bp.__dict__),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CabcModel":
        r = dict(d.get("refine", {}))
        bp = BpConfig(**r.pop("bp", {}))
        return cls([ElasticGraph.from_dict(g) for g in d["graphs"]], SearchParams(**d.get("search", {})),
                   RefineParams(bp=bp, **r))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "CabcModel":
        return cls.from_dict(json.loads(text))


def learn_elastic_graphs(letters, part_shape: PartShape | None = None, sparsify_params=None,
                         edge_params: EdgeParams | None = None, *, seed=0) -> list[ElasticGraph]:
    """One origin-anchored elastic graph per ``(label, image)`` training letter."""
    letters = list(letters)
    seeds = seed_sequence(seed).spawn(len(letters))
    out = []
    for (label, img), ss in zip(letters, seeds):
        g = extract_elastic_graph(img, part_shape, sparsify_params, edge_params, seed=ss, label=str(label))
        out.append(g.moved((0, 0)))
    return out


def interpret(image, model: CabcModel) -> Interpretation:
    cands = candidate_search(model.graphs, image, model.search)
    return refine_and_pair(cands, model.graphs, image, model.refine)


def classify_cabc(image, markers, model: CabcModel) -> str:
    """``same`` iff both markers go to the same letter of the best pair."""
    chosen = list(interpret(image, model).chosen)
    a, b = (assign_marker(chosen, m) for m in markers)
    return SAME if a == b else DIFFERENT


class CabcClassifier(BaseEstimator, ClassifierMixin):
    """Same/different classifier for two-letter images.

    ``fit`` takes training letters as ``(label, image)`` pairs (or bare
    images) and extracts one elastic graph from each; ``predict`` takes
    :class:`CabcInstance` objects (or ``(image, marker_a, marker_b)``
    triples).
    """

    def __init__(
        self,
        part_radius: float = 2.0,
        perturbation: float = 7.0,
        tolerance: float = 2.0,
        max_length: float = 200.0,
        eta_search: int = 4,
        anchor_stride: int = 3,
        top_per_anchor: int = 3,
        top_overall: int = 20,
        eta_refine: int = 6,
        overlap_penalty: float = 0.33,
        seed: int = 0,
    ):
        self.part_radius = part_radius
        self.perturbation = perturbation
        self.tolerance = tolerance
        self.max_length = max_length
        self.eta_search = eta_search
        self.anchor_stride = anchor_stride
        self.top_per_anchor = top_per_anchor
        self.top_overall = top_overall
        self.eta_refine = eta_refine
        self.overlap_penalty = overlap_penalty
        self.seed = seed

    def fit(self, X, y=None):
        letters = [x if isinstance(x, tuple) else ("", x) for x in X]
        if y is not None:
            letters = [(lab, img) for lab, (_, img) in zip(y, letters)]
        if not letters:
            raise ValueError("need at least one training letter")
        graphs = learn_elastic_graphs(
            letters, disk(0, self.part_radius), None,
            EdgeParams(self.perturbation, self.tolerance, self.max_length), seed=self.seed,
        )
        self.model_ = CabcModel(
            graphs,
            SearchParams(self.eta_search, self.anchor_stride, self.top_per_anchor, self.top_overall),
            RefineParams(self.eta_refine, self.overlap_penalty),
        )
        self.classes_ = np.array([DIFFERENT, SAME])
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        out = []
        for x in X:
            image, a, b = (x.image, x.marker_a, x.marker_b) if isinstance(x, CabcInstance) else x
            out.append(classify_cabc(image, (a, b), self.model_))
        return np.array(out)
