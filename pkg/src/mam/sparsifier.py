"""Sparsifier: explain a binary image with a sparse set of part placements.

A part is a set of pixel offsets. Placing a part at an anchor makes it a
parent of the covered pixels; each pixel is tied to its parents by a leaky
OR factor and each placement carries a unary prior that favours OFF. MAP
inference with the pixels clamped then picks a small set of placements that
covers the ON pixels (explaining away).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .bp import BpConfig, compile_graph, decode, map_score, run_mpbp
from .factors import NEG_INF, OrFactorSpec, Table, Unary, safe_log
from .graph import FactorGraph, GraphBuilder, VariableKind

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartShape:
    """Pixel offsets ``(dr, dc)`` of one part type relative to its anchor."""

    part_type: int
    offsets: tuple[tuple[int, int], ...]

    def __post_init__(self):
        offs = tuple(sorted({(int(r), int(c)) for r, c in self.offsets}))
        object.__setattr__(self, "offsets", offs)

    @property
    def is_empty(self) -> bool:
        return not self.offsets

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """``(min_dr, min_dc, max_dr, max_dc)``."""
        rs = [r for r, _ in self.offsets]
        cs = [c for _, c in self.offsets]
        return min(rs), min(cs), max(rs), max(cs)

    @property
    def size(self) -> int:
        return len(self.offsets)

    def centroid(self) -> tuple[float, float]:
        a = np.asarray(self.offsets, dtype=float)
        return float(a[:, 0].mean()), float(a[:, 1].mean())

    def centered(self) -> "PartShape":
        """Same pixels, re-anchored at the offset nearest the centroid."""
        if self.is_empty:
            return self
        cr, cc = self.centroid()
        ar, ac = min(self.offsets, key=lambda o: ((o[0] - cr) ** 2 + (o[1] - cc) ** 2, o))
        return PartShape(self.part_type, tuple((r - ar, c - ac) for r, c in self.offsets))

    def to_dict(self) -> dict:
        return {"part_type": self.part_type, "offsets": [list(o) for o in self.offsets]}

    @classmethod
    def from_dict(cls, d: dict) -> "PartShape":
        return cls(int(d["part_type"]), tuple(tuple(o) for o in d["offsets"]))


def bar(part_type: int, length: int, horizontal: bool = True) -> PartShape:
    if horizontal:
        return PartShape(part_type, tuple((0, c) for c in range(length)))
    return PartShape(part_type, tuple((r, 0) for r in range(length)))


def disk(part_type: int, radius: float) -> PartShape:
    """Filled disk of the given radius, anchored at its top-left bbox corner."""
    R = int(math.floor(radius))
    offs = [(r + R, c + R) for r in range(-R, R + 1) for c in range(-R, R + 1) if r * r + c * c <= radius * radius]
    return PartShape(part_type, tuple(offs))


def check_catalog(catalog) -> list[PartShape]:
    catalog = list(catalog)
    if not catalog:
        raise ValueError("part catalog is empty")
    for shape in catalog:
        if shape.is_empty:
            raise ValueError(f"part type {shape.part_type} has no pixels")
    return catalog


def as_binary_image(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"binary image must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("binary image entries must be 0 or 1")
    return arr.astype(np.uint8)


@dataclass(frozen=True)
class Placement:
    part_type: int
    row: int
    col: int


def anchor_grid(image_shape, shape: PartShape, stride: int = 1, boundary: str = "inside"):
    """Anchor rows and columns of ``shape`` on the stride grid.

    ``boundary="inside"`` keeps placements whose whole shape fits the image;
    ``"clip"`` keeps every anchor inside the image and clips the shape.
    """
    rows, cols = image_shape
    if stride < 1:
        raise ValueError("stride must be positive")
    r0, c0, r1, c1 = shape.bbox
    if boundary == "inside":
        r_range = np.arange(-r0, rows - r1, stride)
        c_range = np.arange(-c0, cols - c1, stride)
    elif boundary == "clip":
        r_range = np.arange(0, rows, stride)
        c_range = np.arange(0, cols, stride)
    else:
        raise ValueError(f"unknown boundary mode {boundary!r}")
    rr, cc = np.meshgrid(r_range, c_range, indexing="ij")
    return rr.ravel(), cc.ravel()


def covered_counts(img: np.ndarray, shape: PartShape, rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
    """Number of ON pixels of ``img`` under ``shape`` at each anchor."""
    rows, cols = img.shape
    out = np.zeros(len(rr), dtype=np.int64)
    for dr, dc in shape.offsets:
        r, c = rr + dr, cc + dc
        ok = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
        out[ok] += img[r[ok], c[ok]]
    return out


def placements_for(image_shape, catalog, stride: int = 1, boundary: str = "inside", keep=None):
    """Yield ``(placement, covered pixels)`` in catalog, then row-major anchor order.

    ``keep(shape, rows, cols)`` may return a boolean mask over candidate
    anchors; rejected anchors are skipped.
    """
    rows, cols = image_shape
    for shape in catalog:
        rr, cc = anchor_grid(image_shape, shape, stride, boundary)
        if keep is not None:
            mask = np.asarray(keep(shape, rr, cc), dtype=bool)
            rr, cc = rr[mask], cc[mask]
        for r, c in zip(rr.tolist(), cc.tolist()):
            cover = [(r + dr, c + dc) for dr, dc in shape.offsets
                     if 0 <= r + dr < rows and 0 <= c + dc < cols]
            if cover:
                yield Placement(shape.part_type, r, c), cover


@dataclass(eq=False)
class SparsifierGraph:
    """A sparsifier factor graph plus its pixel / placement bookkeeping."""

    graph: FactorGraph
    image_shape: tuple[int, int]
    pixel_ids: np.ndarray
    placements: list[Placement]
    part_ids: list[int]
    coverage: list[list[tuple[int, int]]]

    def pixel_evidence(self, image, strength: float = 1e4) -> np.ndarray:
        ev = np.zeros(self.graph.n_variables)
        img = as_binary_image(image)
        ev[self.pixel_ids.ravel()] = np.where(img.ravel() == 1, strength, -strength)
        return ev


def build_sparsifier(
    image_shape,
    catalog,
    stride: int = 1,
    pi01: float = 0.07,
    pi10: float = 0.0019,
    part_prior: float = -20.0,
    *,
    boundary: str = "inside",
    keep=None,
) -> SparsifierGraph:
    """Sparsifier over an image of the given shape.

    Variables: one pixel variable per pixel (row-major, ids first), then one
    part variable per placement. Each part has ``Unary((0, part_prior))``;
    each pixel with parents has an OR factor, each pixel without parents a
    unary holding the parentless rows of the OR table.

    Args:
        keep: optional vectorised filter ``keep(shape, rows, cols) -> mask``
            over candidate anchors; rejected placements are left out.

    Raises:
        ValueError: empty catalog, or no placement fits the image.
    """
    catalog = check_catalog(catalog)
    rows, cols = int(image_shape[0]), int(image_shape[1])
    if rows < 1 or cols < 1:
        raise ValueError("image dimensions must be positive")
    log01, log10 = safe_log(pi01), safe_log(pi10)
    b = GraphBuilder()
    pixel_ids = np.array(
        [[b.add_variable(VariableKind.PIXEL, f"I_{r}_{c}") for c in range(cols)] for r in range(rows)],
        dtype=np.int64,
    ).reshape(rows, cols)
    placements, part_ids, coverage = [], [], []
    parents: list[list[int]] = [[] for _ in range(rows * cols)]
    if not any(len(anchor_grid((rows, cols), shape, stride, boundary)[0]) for shape in catalog):
        raise ValueError("no part placement fits inside the image")
    for placement, cover in placements_for((rows, cols), catalog, stride, boundary, keep):
        vid = b.add_variable(VariableKind.PART, f"x_t{placement.part_type}_{placement.row}_{placement.col}")
        placements.append(placement)
        part_ids.append(vid)
        coverage.append(cover)
        for r, c in cover:
            parents[r * cols + c].append(vid)
    for vid in part_ids:
        b.add_factor(Unary(vid, (0.0, part_prior)))
    for p in range(rows * cols):
        pix = int(pixel_ids.flat[p])
        if parents[p]:
            b.add_factor(OrFactorSpec(pix, tuple(parents[p]), log01, log10))
        else:
            b.add_factor(Unary(pix, (0.0, log10)))
    return SparsifierGraph(b.build(), (rows, cols), pixel_ids, placements, part_ids, coverage)


def line_example(K: int = 2, pi: float = 0.3, pi10: float = 0.05, pi01: float = 0.1) -> SparsifierGraph:
    """The ``1 x (3K - 1)`` line with 2-or-3 pixel segment parts ``x_1 .. x_{3K-1}``."""
    seg = PartShape(0, ((0, -1), (0, 0), (0, 1)))
    return build_sparsifier((1, 3 * K - 1), [seg], 1, pi01, pi10, math.log(pi), boundary="clip")


# --- sparsification ------------------------------------------------------


@dataclass(frozen=True)
class SparsifyParams:
    pi01: float = 0.07
    pi10: float = 0.0019
    part_prior: float = -20.0
    bp: BpConfig = field(default_factory=BpConfig)
    restarts: int = 10
    noise: float = 1e-3
    pixel_evidence: float = 1e4
    stride: int = 1
    boundary: str = "inside"
    prune: bool = True


@dataclass
class SparsifyResult:
    placements: list[Placement]
    score: float
    assignment: np.ndarray
    model: SparsifierGraph
    converged: bool

    def __iter__(self):
        return iter(self.placements)

    def __len__(self):
        return len(self.placements)

    def explained_fraction(self, image) -> float:
        """Share of ON pixels covered by at least one ON placement."""
        img = as_binary_image(image)
        covered = np.zeros_like(img, dtype=bool)
        on = set(self.placements)
        for p, cover in zip(self.model.placements, self.model.coverage):
            if p in on:
                for r, c in cover:
                    covered[r, c] = True
        n_on = int(img.sum())
        return 1.0 if n_on == 0 else float((covered & (img == 1)).sum()) / n_on


def restart_inits(graph: FactorGraph, restarts: int, noise: float, rng: np.random.Generator):
    """Initial messages for each restart.

    Noise goes only on edges of non-unary factors (a unary factor's message
    is overwritten in the first sweep), drawn in edge order. Unary-only
    prefixes therefore do not shift the draws, which keeps sparsification
    translation equivariant.
    """
    plan = compile_graph(graph)
    n_edges = len(plan.edge_var)
    unary = np.zeros(graph.n_factors, dtype=bool)
    unary[[f for f, fac in enumerate(graph.factors) if isinstance(fac, Unary)]] = True
    noisy = np.flatnonzero(~unary[plan.edge_factor])
    for _ in range(max(1, restarts)):
        if noise > 0:
            init = np.zeros(n_edges)
            init[noisy] = rng.uniform(-noise, noise, size=len(noisy))
            yield init
        else:
            yield None


def seed_sequence(seed) -> np.random.SeedSequence:
    """``seed`` as a SeedSequence (ints and existing sequences both accepted)."""
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def best_of_restarts(graph: FactorGraph, evidence, bp: BpConfig, restarts: int, noise: float,
                     rng: np.random.Generator, fix=None):
    """Run MPBP from several perturbed starts; keep the best-scoring decode.

    ``fix`` optionally maps a decoded assignment to the assignment that is
    scored (e.g. re-clamping observed pixels). Ties keep the earliest run.
    """
    best = None
    for init in restart_inits(graph, restarts, noise, rng):
        msgs, diag = run_mpbp(graph, evidence, bp, init=init)
        x = decode(graph, msgs, evidence)
        if fix is not None:
            x = fix(x)
        s = map_score(graph, x)
        if best is None or s > best[0]:
            best = (s, x, msgs, diag)
    return best


def useful_placement_filter(img: np.ndarray, part_prior: float, pi10: float):
    """Anchor filter keeping placements that could raise the score when ON."""
    per_pixel = -safe_log(pi10)

    def keep(shape, rr, cc):
        k = covered_counts(img, shape, rr, cc)
        if math.isinf(per_pixel):
            return k > 0
        return (k > 0) & (part_prior + k * per_pixel > 0)

    return keep


def sparsify(image, catalog, params: SparsifyParams | None = None, *, seed=0) -> SparsifyResult:
    """Sparse set of ON placements explaining ``image``.

    Pixels are clamped through strong evidence; MPBP is rerun ``restarts``
    times from small random perturbations of the initial messages and the
    decode with the best model score wins.

    With ``prune`` (and a non-positive part prior) placements that can
    never pay for themselves are left out of the graph. Switching a
    placement OFF gains ``-part_prior``, may gain on the OFF pixels it
    covers, and loses at most ``-log pi10`` per ON pixel it covers; when
    ``part_prior + k * (-log pi10) <= 0`` for its ``k`` covered ON pixels,
    OFF is never worse, so some optimum of the full graph survives.
    """
    params = params or SparsifyParams()
    img = as_binary_image(image)
    catalog = check_catalog(catalog)
    keep = None
    if params.prune and params.part_prior <= 0:
        keep = useful_placement_filter(img, params.part_prior, params.pi10)
    model = build_sparsifier(img.shape, catalog, params.stride, params.pi01, params.pi10,
                             params.part_prior, boundary=params.boundary, keep=keep)
    rng = np.random.default_rng(seed)
    pix = model.pixel_ids.ravel()
    truth = img.ravel()
    n_parts = len(model.part_ids)

    if n_parts == 0:
        x = np.zeros(model.graph.n_variables, dtype=np.int8)
        x[pix] = truth
        return SparsifyResult([], map_score(model.graph, x), x, model, True)

    def clamp(x):
        x = x.copy()
        x[pix] = truth
        return x

    ev = model.pixel_evidence(img, params.pixel_evidence)
    score, x, _msgs, diag = best_of_restarts(model.graph, ev, params.bp, params.restarts, params.noise, rng, clamp)
    # a stuck decode can be worse than explaining nothing at all
    off = clamp(np.zeros_like(x))
    off_score = map_score(model.graph, off)
    if off_score > score:
        score, x = off_score, off
    on = [p for p, vid in zip(model.placements, model.part_ids) if x[vid]]
    return SparsifyResult(on, score, x, model, diag.converged)


# --- part learning ---------------------------------------------------------


@dataclass(frozen=True)
class LearnParams:
    pi01: float = 0.07
    pi10: float = 0.0019
    part_prior: float = -20.0
    weight_prior: float = -0.5
    bp: BpConfig = field(default_factory=lambda: BpConfig(max_iters=300, damping=0.5))
    restarts: int = 3
    noise: float = 0.1
    pixel_evidence: float = 1e4
    stride: int = 1
    anchors: str = "center"
    seed_strength: float = 1.0


@dataclass
class LearnResult:
    catalog: list[PartShape]
    empty_types: list[int]
    score: float

    @property
    def degenerate(self) -> bool:
        return bool(self.empty_types)


def _and_table(aux: int, part: int, weight: int) -> Table:
    # aux ON exactly when both the placement and the shared weight are ON
    return Table.from_function((aux, part, weight), lambda a, x, w: 0.0 if a == (x and w) else NEG_INF)


@dataclass(eq=False)
class PartLearningGraph:
    graph: FactorGraph
    weight_ids: np.ndarray
    pixel_ids: list[np.ndarray]
    part_ids: list[int]


def build_part_learning_graph(images, num_parts: int, patch_dims, params: LearnParams) -> PartLearningGraph:
    """Joint sparsifier over several images with shared weight variables.

    One weight variable per (part type, patch offset) is shared by every
    placement of that type in every image. Each (placement, offset) pair
    gets an auxiliary AND variable, which is a parent of the pixel under it.
    With ``anchors="center"`` only windows whose centre pixel is ON get a
    placement; with ``"any"`` every window holding an ON pixel does.
    """
    if params.anchors not in ("center", "any"):
        raise ValueError(f"unknown anchor rule {params.anchors!r}")
    ph, pw = int(patch_dims[0]), int(patch_dims[1])
    b = GraphBuilder()
    weight_ids = np.array(
        [[[b.add_variable(VariableKind.WEIGHT, f"w_t{t}_{r}_{c}") for c in range(pw)] for r in range(ph)]
         for t in range(num_parts)],
        dtype=np.int64,
    )
    log01, log10 = safe_log(params.pi01), safe_log(params.pi10)
    factors = []
    pixel_ids, part_ids = [], []
    for n, img in enumerate(images):
        rows, cols = img.shape
        pids = np.array(
            [[b.add_variable(VariableKind.PIXEL, f"I{n}_{r}_{c}") for c in range(cols)] for r in range(rows)],
            dtype=np.int64,
        )
        pixel_ids.append(pids)
        parents: dict[tuple[int, int], list[int]] = {}
        for t in range(num_parts):
            for r in range(0, rows - ph + 1, params.stride):
                for c in range(0, cols - pw + 1, params.stride):
                    if params.anchors == "center":
                        if not img[r + ph // 2, c + pw // 2]:
                            continue
                    elif not img[r:r + ph, c:c + pw].any():
                        continue
                    x = b.add_variable(VariableKind.PART, f"x{n}_t{t}_{r}_{c}")
                    part_ids.append(x)
                    factors.append(Unary(x, (0.0, params.part_prior)))
                    for dr in range(ph):
                        for dc in range(pw):
                            aux = b.add_variable(VariableKind.PART, f"and{n}_t{t}_{r}_{c}_{dr}_{dc}")
                            factors.append(_and_table(aux, x, int(weight_ids[t, dr, dc])))
                            parents.setdefault((r + dr, c + dc), []).append(aux)
        for r in range(rows):
            for c in range(cols):
                pa = parents.get((r, c))
                if pa:
                    factors.append(OrFactorSpec(int(pids[r, c]), tuple(pa), log01, log10))
                else:
                    factors.append(Unary(int(pids[r, c]), (0.0, log10)))
    for w in weight_ids.ravel():
        factors.append(Unary(int(w), (0.0, params.weight_prior)))
    for f in factors:
        b.add_factor(f)
    return PartLearningGraph(b.build(), weight_ids, pixel_ids, part_ids)


def seed_patches(images, num_parts: int, patch_dims, rng: np.random.Generator) -> np.ndarray:
    """One ON-centred data patch per part type, spread out k-means++ style.

    Every window whose centre pixel is ON is a candidate (repeats count).
    The first seed is drawn uniformly; each next one with probability
    proportional to its squared Hamming distance to the nearest seed so
    far. Returns ``(num_parts, ph, pw)`` 0/1 arrays.
    """
    ph, pw = patch_dims
    cands = []
    for img in images:
        for r in range(img.shape[0] - ph + 1):
            for c in range(img.shape[1] - pw + 1):
                if img[r + ph // 2, c + pw // 2]:
                    cands.append(img[r:r + ph, c:c + pw].ravel())
    if not cands:
        return np.zeros((num_parts, ph, pw), dtype=np.uint8)
    cands = np.asarray(cands, dtype=np.int64)
    chosen = [int(rng.integers(len(cands)))]
    dist = np.abs(cands - cands[chosen[0]]).sum(axis=1).astype(float)
    while len(chosen) < num_parts:
        w = dist ** 2
        pick = int(rng.choice(len(cands), p=w / w.sum())) if w.sum() > 0 else int(rng.integers(len(cands)))
        chosen.append(pick)
        dist = np.minimum(dist, np.abs(cands - cands[pick]).sum(axis=1))
    return cands[chosen].reshape(num_parts, ph, pw).astype(np.uint8)


def learn_parts(images, num_parts: int, patch_dims, params: LearnParams | None = None, *, seed=0) -> LearnResult:
    """Learn ``num_parts`` part shapes by joint MPBP over part, pixel and weight variables.

    Part types are interchangeable, so a symmetric start decodes every type
    to the same shape. Each type's weights therefore get a weak evidence
    term (``seed_strength``) towards a distinct data patch (see
    :func:`seed_patches`); the joint inference is free to override it.

    Returns the ON weight offsets of each type. Types that decode empty are
    listed in ``empty_types`` and a warning is issued.
    """
    params = params or LearnParams()
    if num_parts < 1:
        raise ValueError("num_parts must be at least 1")
    imgs = [as_binary_image(im) for im in images]
    if not imgs:
        raise ValueError("no training images")
    ph, pw = patch_dims
    for im in imgs:
        if im.shape[0] < ph or im.shape[1] < pw:
            raise ValueError(f"patch {patch_dims} does not fit image of shape {im.shape}")
    lg = build_part_learning_graph(imgs, num_parts, patch_dims, params)
    g = lg.graph
    ev = np.zeros(g.n_variables)
    pix = np.concatenate([p.ravel() for p in lg.pixel_ids])
    truth = np.concatenate([im.ravel() for im in imgs])
    ev[pix] = np.where(truth == 1, params.pixel_evidence, -params.pixel_evidence)
    rng = np.random.default_rng(seed)
    if params.seed_strength > 0:
        seeds = seed_patches(imgs, num_parts, patch_dims, rng)
        ev[lg.weight_ids.ravel()] = np.where(seeds.ravel() == 1, params.seed_strength, -params.seed_strength)

    def clamp(x):
        x = x.copy()
        x[pix] = truth
        return x

    score, x, _m, _d = best_of_restarts(g, ev, params.bp, params.restarts, params.noise, rng, clamp)
    catalog, empty = [], []
    for t in range(num_parts):
        w = x[lg.weight_ids[t]].astype(bool)
        offs = tuple((int(r), int(c)) for r, c in zip(*np.nonzero(w)))
        catalog.append(PartShape(t, offs))
        if not offs:
            empty.append(t)
    if empty:
        warnings.warn(f"part types {empty} learned no pixels", RuntimeWarning, stacklevel=2)
    return LearnResult(catalog, empty, score)



# --- estimators ----------------------------------------------------------------


class Sparsifier(BaseEstimator, TransformerMixin):
    """Sparsify binary images with a fixed part catalog.

    ``transform`` returns, per image, the list of ON placements; ``score``
    is the mean share of ON pixels they explain.
    """

    def __init__(self, catalog=None, pi01: float = 0.07, pi10: float = 0.0019, part_prior: float = -20.0,
                 restarts: int = 10, seed: int = 0):
        self.catalog = catalog
        self.pi01 = pi01
        self.pi10 = pi10
        self.part_prior = part_prior
        self.restarts = restarts
        self.seed = seed

    def _params(self) -> SparsifyParams:
        return SparsifyParams(pi01=self.pi01, pi10=self.pi10, part_prior=self.part_prior, restarts=self.restarts)

    def fit(self, X=None, y=None):
        self.catalog_ = check_catalog(self.catalog or [])
        return self

    def sparsify_all(self, X) -> list[SparsifyResult]:
        check_is_fitted(self, "catalog_")
        images = list(X)
        seeds = seed_sequence(self.seed).spawn(len(images))
        return [sparsify(im, self.catalog_, self._params(), seed=ss) for im, ss in zip(images, seeds)]

    def transform(self, X) -> list[list[Placement]]:
        return [r.placements for r in self.sparsify_all(X)]

    def score(self, X, y=None) -> float:
        images = list(X)
        res = self.sparsify_all(images)
        return float(np.mean([r.explained_fraction(im) for r, im in zip(res, images)]))


class PartLearner(Sparsifier):
    """Learn a part catalog from binary images, then sparsify with it."""

    def __init__(self, n_parts: int = 16, patch_dims=(5, 5), pi01: float = 0.07, pi10: float = 0.0019,
                 part_prior: float = -20.0, restarts: int = 10, learn_restarts: int = 3,
                 seed_strength: float = 1.0, seed: int = 0):
        self.n_parts = n_parts
        self.patch_dims = patch_dims
        self.learn_restarts = learn_restarts
        self.seed_strength = seed_strength
        super().__init__(None, pi01, pi10, part_prior, restarts, seed)

    def fit(self, X, y=None):
        params = LearnParams(pi01=self.pi01, pi10=self.pi10, part_prior=self.part_prior,
                             restarts=self.learn_restarts, seed_strength=self.seed_strength)
        self.result_ = learn_parts(list(X), self.n_parts, tuple(self.patch_dims), params, seed=self.seed)
        self.catalog_ = [s for s in self.result_.catalog if not s.is_empty]
        return self
