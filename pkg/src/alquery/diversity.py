"""Batch selection: score-only strategies and diversity-promoting samplers.

Every sampler works on the pool sorted by image id, so "first maximum" in an
argmax is the lexicographically smallest id. That single convention is the
tie-break for all deterministic samplers.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .core_model import Embedding, ScoredImage, stack_embeddings
from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptyPool,
    NotEnoughItems,
    PoolTooLargeForDense,
    SolverDivergence,
)

DENSE_POOL_CAP = 20_000


class ScoreStrategy(str, enum.Enum):
    TOP_N = "topn"
    TOP_THIRD = "topthird"
    TOP_HALF_BOTTOM_HALF = "tophalf-bottomhalf"
    BOTTOM_N = "bottomn"


class Metric(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"


@dataclass(frozen=True)
class SimilaritySpec:
    metric: Metric = Metric.EUCLIDEAN
    source: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))


@dataclass
class SelectionBatch:
    strategy: str
    selected: list
    scores_at_selection: list
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.selected)


ScoresLike = Union[Sequence[ScoredImage], Mapping[str, float]]


def _score_map(scores: ScoresLike) -> dict:
    if isinstance(scores, Mapping):
        out = {str(k): float(v) for k, v in scores.items()}
    else:
        out = {}
        for s in scores:
            if s.image_id in out:
                raise ConfigError(f"image {s.image_id!r} scored twice")
            out[s.image_id] = float(s.score)
    for k, v in out.items():
        if not math.isfinite(v):
            raise ConfigError(f"score for {k!r} is not finite")
    return out


def _target(n: int, pool: int, strict: bool) -> int:
    if n < 0:
        raise ConfigError("N must be non-negative")
    if pool == 0:
        raise EmptyPool("no items to select from")
    if n > pool and strict:
        raise NotEnoughItems(f"requested {n} items from a pool of {pool}")
    return min(n, pool)


# -- score-only --------------------------------------------------------------

def _ranked(score_of: dict) -> list:
    """Ids by descending score, ties by id."""
    return sorted(score_of, key=lambda i: (-score_of[i], i))


def select_score_only(scores: ScoresLike, n: int, strategy: ScoreStrategy = ScoreStrategy.TOP_N,
                      seed: Optional[int] = None, strict: bool = False) -> SelectionBatch:
    strategy = ScoreStrategy(strategy)
    score_of = _score_map(scores)
    n = _target(n, len(score_of), strict)
    ranked = _ranked(score_of)

    if strategy is ScoreStrategy.TOP_N:
        chosen = ranked[:n]
    elif strategy is ScoreStrategy.BOTTOM_N:
        chosen = sorted(score_of, key=lambda i: (score_of[i], i))[:n]
    elif strategy is ScoreStrategy.TOP_HALF_BOTTOM_HALF:
        top = ranked[: (n + 1) // 2]
        taken = set(top)
        bottom = [i for i in sorted(score_of, key=lambda i: (score_of[i], i)) if i not in taken]
        chosen = top + bottom[: n - len(top)]
    else:
        # uniform without replacement from the top third of the ranking,
        # widened to n when the third is too small; returned in rank order
        band = max(math.ceil(len(ranked) / 3), n)
        rng = np.random.default_rng(seed)
        picks = np.sort(rng.choice(band, size=n, replace=False))
        chosen = [ranked[k] for k in picks]
    return SelectionBatch(strategy.value, chosen, [score_of[i] for i in chosen], seed)


def select_random(ids: Iterable[str], n: int, seed: Optional[int] = None,
                  scores: Optional[Mapping[str, float]] = None) -> SelectionBatch:
    pool = sorted(set(ids))
    n = _target(n, len(pool), strict=False)
    rng = np.random.default_rng(seed)
    chosen = [pool[k] for k in rng.choice(len(pool), size=n, replace=False)]
    at = [float(scores[i]) if scores else 0.0 for i in chosen]
    return SelectionBatch("random", chosen, at, seed)


# -- distances ---------------------------------------------------------------

class _Pool:
    """Embeddings and scores aligned and sorted by id."""

    def __init__(self, embeddings, scores: ScoresLike, metric: Metric):
        if isinstance(embeddings, tuple):
            ids, matrix = embeddings
            matrix = np.asarray(matrix, dtype=np.float64)
        else:
            ids, matrix = stack_embeddings(list(embeddings))
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise DimensionMismatch("embedding matrix must be (len(ids), D)")
        score_of = _score_map(scores)
        row_of = {i: k for k, i in enumerate(ids)}
        missing = [i for i in score_of if i not in row_of]
        if missing:
            raise ConfigError(f"{len(missing)} scored items lack embeddings, e.g. {missing[0]!r}")
        self.ids = sorted(score_of)
        if not self.ids:
            raise EmptyPool("no items to select from")
        self.scores = np.array([score_of[i] for i in self.ids], dtype=np.float64)
        if np.any(self.scores < 0):
            raise ConfigError("diversity samplers need non-negative scores")
        self.points = matrix[[row_of[i] for i in self.ids]]
        self.metric = Metric(metric)
        if self.metric is Metric.COSINE:
            norms = np.linalg.norm(self.points, axis=1, keepdims=True)
            self.points = np.divide(self.points, norms, out=np.zeros_like(self.points), where=norms > 0)

    def __len__(self):
        return len(self.ids)

    def row(self, k: int) -> np.ndarray:
        return distance_row(self.points, k, self.metric)

    def batch(self, selected: list, strategy: str, seed) -> SelectionBatch:
        return SelectionBatch(strategy, [self.ids[k] for k in selected],
                              [float(self.scores[k]) for k in selected], seed)


def distance_row(points: np.ndarray, k: int, metric: Metric) -> np.ndarray:
    """Distances from item ``k`` to every item.

    Euclidean is the squared norm of the difference. For cosine, ``points``
    must already be unit rows and ``1 - cos`` is computed as half the squared
    chord length, which is exactly zero for identical directions.
    """
    diff = points - points[k]
    d = np.einsum("ij,ij->i", diff, diff)
    if Metric(metric) is Metric.COSINE:
        d *= 0.5
        np.minimum(d, 2.0, out=d)
    return d


def build_similarity(embeddings, spec: SimilaritySpec = SimilaritySpec(),
                     cap: int = DENSE_POOL_CAP, block: int = 64) -> tuple[list, np.ndarray]:
    """Dense symmetric distance matrix over the embeddings, rows sorted by id."""
    if isinstance(embeddings, tuple):
        ids, matrix = embeddings
        matrix = np.asarray(matrix, dtype=np.float64)
    else:
        ids, matrix = stack_embeddings(list(embeddings))
    if not ids:
        raise EmptyPool("no embeddings")
    pool = _Pool((ids, matrix), {i: 0.0 for i in ids}, spec.metric)
    return pool.ids, _dense_distances(pool, cap, block)


def _dense_distances(pool: _Pool, cap: int = DENSE_POOL_CAP, block: int = 64) -> np.ndarray:
    m = len(pool)
    if m > cap:
        raise PoolTooLargeForDense(m, cap)
    pts = pool.points
    out = np.empty((m, m), dtype=np.float64)
    for start in range(0, m, block):
        diff = pts[start:start + block, None, :] - pts[None, :, :]
        out[start:start + block] = np.einsum("ijk,ijk->ij", diff, diff)
    if pool.metric is Metric.COSINE:
        out *= 0.5
        np.minimum(out, 2.0, out=out)
    return out


# -- k-means++ ---------------------------------------------------------------

def select_kmpp(embeddings, scores: ScoresLike, n: int, spec: SimilaritySpec = SimilaritySpec(),
                seed: Optional[int] = None, strict: bool = False) -> SelectionBatch:
    """Score-weighted k-means++ seeding.

    The first centroid is uniform; each later one is drawn with probability
    proportional to ``score * d_min``. When every remaining weight is zero the
    draw falls back to uniform over unselected items.
    """
    pool = _Pool(embeddings, scores, spec.metric)
    m = len(pool)
    n = _target(n, m, strict)
    rng = np.random.default_rng(seed)
    taken = np.zeros(m, dtype=bool)
    first = int(rng.integers(m))
    selected = [first]
    taken[first] = True
    d_min = pool.row(first)
    fallbacks = 0
    while len(selected) < n:
        weights = pool.scores * d_min
        weights[taken] = 0.0
        total = weights.sum()
        if total > 0 and math.isfinite(total):
            cum = np.cumsum(weights)
            pick = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            if pick >= m or weights[pick] <= 0:  # cumsum rounding at the upper edge
                pick = int(np.flatnonzero(weights > 0)[-1])
        else:
            fallbacks += 1
            free = np.flatnonzero(~taken)
            pick = int(free[rng.integers(free.size)])
        selected.append(pick)
        taken[pick] = True
        np.minimum(d_min, pool.row(pick), out=d_min)
    batch = pool.batch(selected, "kmpp", seed)
    batch.extra["uniform_fallbacks"] = fallbacks
    return batch


def kmpp_probabilities(points: np.ndarray, scores: np.ndarray, chosen: Sequence[int],
                       metric: Metric = Metric.EUCLIDEAN) -> np.ndarray:
    """Analytic next-pick distribution ``s * d_min / sum(s * d_min)`` given chosen centroids."""
    pts = np.asarray(points, dtype=np.float64)
    if Metric(metric) is Metric.COSINE:
        pts = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    d_min = np.min([distance_row(pts, c, metric) for c in chosen], axis=0)
    w = np.asarray(scores, dtype=np.float64) * d_min
    w[list(chosen)] = 0.0
    return w / w.sum()


# -- core-set ----------------------------------------------------------------

def select_coreset(embeddings, scores: ScoresLike, n: int, spec: SimilaritySpec = SimilaritySpec(),
                   seed: Optional[int] = None, first_pick: str = "score",
                   strict: bool = False) -> SelectionBatch:
    """Greedy score-weighted max-min cover.

    Each step takes ``argmax_x s(x) * min_c d(x, c)`` over unselected items.
    ``first_pick="score"`` starts from the highest-scoring item; ``"random"``
    starts from a seeded uniform draw.
    """
    pool = _Pool(embeddings, scores, spec.metric)
    m = len(pool)
    n = _target(n, m, strict)
    if first_pick == "score":
        first = int(np.argmax(pool.scores))
    elif first_pick == "random":
        first = int(np.random.default_rng(seed).integers(m))
    else:
        raise ConfigError(f"unknown first_pick {first_pick!r}")
    selected = [first]
    taken = np.zeros(m, dtype=bool)
    taken[first] = True
    d_min = pool.row(first)
    while len(selected) < n:
        weighted = pool.scores * d_min
        weighted[taken] = -np.inf
        pick = int(np.argmax(weighted))
        selected.append(pick)
        taken[pick] = True
        np.minimum(d_min, pool.row(pick), out=d_min)
    batch = pool.batch(selected, "coreset", seed)
    batch.extra["first_pick"] = first_pick
    return batch


# -- sparse modeling (OMP) ---------------------------------------------------

def box_least_squares(a: np.ndarray, b: np.ndarray, x0: Optional[np.ndarray] = None,
                      tol: float = 1e-8, max_iter: int = 10_000) -> tuple[np.ndarray, int]:
    """Accelerated projected gradient for ``min ||a x - b||^2`` s.t. ``0 <= x <= 1``.

    Nesterov momentum with gradient-based restart; each iterate is a plain
    projected gradient step from the extrapolated point. Returns
    ``(x, iterations)`` once no coordinate moves more than ``tol``.
    """
    q = a.T @ a
    c = a.T @ b
    k = q.shape[0]
    x = np.zeros(k) if x0 is None else np.clip(np.asarray(x0, dtype=np.float64), 0.0, 1.0)
    lipschitz = float(np.linalg.eigvalsh(q)[-1]) if k else 0.0
    if lipschitz <= 0.0:
        return np.zeros(k), 0
    step = 1.0 / lipschitz
    y = x.copy()
    t = 1.0
    for it in range(1, max_iter + 1):
        x_new = y - step * (q @ y - c)
        np.clip(x_new, 0.0, 1.0, out=x_new)
        if not np.all(np.isfinite(x_new)):
            raise SolverDivergence("box least squares produced non-finite iterates")
        delta = x_new - x
        if np.max(np.abs(delta)) < tol:
            return x_new, it
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        if np.dot(y - x_new, delta) > 0:
            # momentum is pointing uphill: restart
            t_new = 1.0
            y = x_new.copy()
        else:
            y = x_new + ((t - 1.0) / t_new) * delta
        x, t = x_new, t_new
    raise SolverDivergence(f"box least squares did not reach tol {tol} in {max_iter} iterations")


def similarity_kernel(distances: np.ndarray) -> tuple[np.ndarray, float]:
    """``exp(-d / sigma)`` with sigma the median off-diagonal distance.

    Falls back to the mean positive off-diagonal distance, then to 1, when the
    median is zero.
    """
    m = distances.shape[0]
    if m < 2:
        return np.ones_like(distances), 1.0
    off = distances[~np.eye(m, dtype=bool)]
    sigma = float(np.median(off))
    if sigma <= 0.0:
        pos = off[off > 0]
        sigma = float(pos.mean()) if pos.size else 1.0
    return np.exp(-distances / sigma), sigma


def omp_select(similarity: np.ndarray, scores: np.ndarray, n: int, tol: float = 1e-8,
               max_iter: int = 10_000) -> tuple[list, np.ndarray]:
    """Greedy solve of ``min ||D x - s||^2`` with ``||x||_0 = n`` and ``0 <= x <= 1``.

    Each round adds the inactive column with the largest absolute correlation
    to the residual (first index wins ties), then refits the active weights by
    box-constrained least squares. Returns the active indices in insertion
    order and their weights.
    """
    d = np.asarray(similarity, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    m = d.shape[0]
    if d.shape != (m, m) or s.shape != (m,):
        raise DimensionMismatch("similarity must be (M, M) and scores (M,)")
    active: list = []
    x = np.zeros(0)
    residual = s.copy()
    inactive = np.ones(m, dtype=bool)
    for _ in range(n):
        corr = np.abs(d.T @ residual)
        corr[~inactive] = -np.inf
        j = int(np.argmax(corr))
        active.append(j)
        inactive[j] = False
        cols = d[:, active]
        x, _ = box_least_squares(cols, s, np.append(x, 0.0), tol=tol, max_iter=max_iter)
        residual = s - cols @ x
    return active, x


def select_omp(embeddings, scores: ScoresLike, n: int, spec: SimilaritySpec = SimilaritySpec(),
               strict: bool = False, cap: int = DENSE_POOL_CAP) -> SelectionBatch:
    pool = _Pool(embeddings, scores, spec.metric)
    n = _target(n, len(pool), strict)
    kernel, sigma = similarity_kernel(_dense_distances(pool, cap))
    active, weights = omp_select(kernel, pool.scores, n)
    batch = pool.batch(active, "omp", None)
    batch.extra["sigma"] = sigma
    batch.extra["weights"] = [float(w) for w in weights]
    return batch


# -- round robin -------------------------------------------------------------

def select_round_robin(scored: Sequence[ScoredImage], classes: Sequence[int], n: int,
                       strict: bool = False) -> SelectionBatch:
    """Alternate over ``classes``, each turn taking that class's best unselected image."""
    if not classes:
        raise ConfigError("round robin needs at least one class")
    items = {}
    for s in scored:
        if s.per_class_scores is None:
            raise ConfigError(f"{s.image_id!r} has no per-class scores")
        items[s.image_id] = s.per_class_scores
    n = _target(n, len(items), strict)
    queues = {}
    for c in dict.fromkeys(classes):
        try:
            queues[c] = sorted(items, key=lambda i: (-items[i][c], i))
        except IndexError:
            raise ConfigError(f"class {c} missing from per-class scores") from None
    cursor = {c: 0 for c in queues}
    chosen: list = []
    at: list = []
    taken = set()
    turn = 0
    while len(chosen) < n:
        c = classes[turn % len(classes)]
        turn += 1
        queue = queues[c]
        while queue[cursor[c]] in taken:
            cursor[c] += 1
        pick = queue[cursor[c]]
        taken.add(pick)
        chosen.append(pick)
        at.append(float(items[pick][c]))
    return SelectionBatch("round-robin", chosen, at, None, {"classes": list(classes)})


# -- selection file ----------------------------------------------------------

def write_selection(path, batch: SelectionBatch, meta: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for rank, (image_id, score) in enumerate(zip(batch.selected, batch.scores_at_selection), start=1):
            fh.write(json.dumps({"rank": rank, "id": image_id, "score": score}) + "\n")


def read_selection(path) -> tuple[dict, list]:
    with open(path, "r", encoding="utf-8") as fh:
        meta = json.loads(fh.readline())["meta"]
        rows = [json.loads(line) for line in fh if line.strip()]
    return meta, rows
