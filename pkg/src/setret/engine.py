"""
Set retrieval engine
====================

Indexes and scoring strategies:

* descriptor-per-set: one unit vector per set, a query identity contributes
  ``sigmoid(w * <v_q, v_set> + b)`` and a set scores the sum over query
  identities;
* descriptor-per-element: all element vectors are kept, and a set scores
  the greedy query/element matching of its pair scores;
* re-ranking: descriptor-per-element rescoring of the head of another
  ranking;
* pre-tagging: closed-world identity tags looked up through an inverted
  index.

Rankings are non-increasing in score with ties broken by ascending set id.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .aggregator import AggregationError, AggregatorModel, LogisticHead, aggregate_many, aggregate_set
from .whitening import WhitenTransform, apply_whitening

log = logging.getLogger(__name__)

__all__ = [
    "SetCollection",
    "SetIndex",
    "ElementIndex",
    "QuerySpec",
    "RankedResult",
    "TagIndex",
    "ClosedWorldError",
    "build_set_index",
    "build_element_index",
    "make_query_descriptors",
    "aggregate_query",
    "score_desc_per_set",
    "score_desc_per_element",
    "score_set_greedy",
    "score_set_optimal",
    "rerank",
    "search_reranked",
    "build_tag_index",
    "score_pretag",
]


class ClosedWorldError(KeyError):
    """Query identity outside the pre-tagged vocabulary."""

    def __str__(self):
        return str(self.args[0]) if self.args else "identity not in tag vocabulary"


def _id_rank(ids: Sequence[str]) -> np.ndarray:
    order = sorted(range(len(ids)), key=ids.__getitem__)
    rank = np.empty(len(ids), dtype=np.int64)
    rank[order] = np.arange(len(ids))
    return rank


def _offsets_from_counts(counts) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)


@dataclass
class SetCollection:
    """Ragged collection of element sets (a dataset).

    ``x`` holds every element row, set ``i`` owns rows
    ``offsets[i]:offsets[i+1]``; ``labels`` gives the identity of each row
    (``-1`` for unknown / distractor faces).
    """

    ids: list
    x: np.ndarray
    offsets: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        if len(self.offsets) != len(self.ids) + 1 or self.offsets[-1] != len(self.x):
            raise ValueError("offsets do not match ids and element rows")
        if self.labels is None:
            self.labels = np.full(len(self.x), -1, dtype=np.int64)

    @classmethod
    def from_sets(cls, sets: Sequence, ids=None, labels=None) -> "SetCollection":
        arrays = [np.asarray(s, dtype=np.float64).reshape(len(s), -1) if len(s) else None for s in sets]
        dim = next((a.shape[1] for a in arrays if a is not None), 0)
        arrays = [a if a is not None else np.zeros((0, dim)) for a in arrays]
        if ids is None:
            width = len(str(max(len(sets) - 1, 0)))
            ids = [f"s{i:0{width}d}" for i in range(len(sets))]
        lab = None
        if labels is not None:
            lab = np.concatenate([np.asarray(l, dtype=np.int64) for l in labels]) if len(labels) else np.zeros(0, np.int64)
        x = np.concatenate(arrays) if arrays else np.zeros((0, dim))
        return cls(list(ids), x, _offsets_from_counts([len(a) for a in arrays]), lab)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def elements(self, i: int) -> np.ndarray:
        return self.x[self.offsets[i]:self.offsets[i + 1]]

    def set_labels(self, i: int) -> np.ndarray:
        return self.labels[self.offsets[i]:self.offsets[i + 1]]

    def subset(self, rows) -> "SetCollection":
        rows = np.asarray(rows, dtype=np.int64)
        counts = self.counts[rows]
        take = np.concatenate([np.arange(self.offsets[r], self.offsets[r + 1]) for r in rows]) if len(rows) else np.zeros(0, np.int64)
        return SetCollection([self.ids[r] for r in rows], self.x[take], _offsets_from_counts(counts), self.labels[take])


@dataclass
class SetIndex:
    ids: list
    vectors: np.ndarray  # (N, D) float32, unit rows
    failures: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if len(self.ids) != len(self.vectors):
            raise ValueError("row count does not match id count")
        self.id_rank = _id_rank(self.ids)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class ElementIndex:
    ids: list
    x: np.ndarray  # (M, D_e) float32
    offsets: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        if len(self.offsets) != len(self.ids) + 1 or self.offsets[-1] != len(self.x):
            raise ValueError("offsets do not match ids and element rows")
        if np.any(np.diff(self.offsets) <= 0):
            raise ValueError("element index cannot hold empty sets")
        self.id_rank = _id_rank(self.ids)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def elements(self, i: int) -> np.ndarray:
        return self.x[self.offsets[i]:self.offsets[i + 1]]

    def gather(self, rows):
        """Element rows and offsets of the given sets, in the given order."""
        rows = np.asarray(rows, dtype=np.int64)
        counts = self.offsets[rows + 1] - self.offsets[rows]
        starts = np.repeat(self.offsets[rows], counts)
        within = np.arange(counts.sum()) - np.repeat(_offsets_from_counts(counts)[:-1], counts)
        return self.x[starts + within], _offsets_from_counts(counts)


@dataclass
class QuerySpec:
    """``examples[q]`` is an ``(N_ex, D_e)`` array for query identity ``q``."""

    examples: list
    identities: list | None = None

    def __post_init__(self):
        self.examples = [np.atleast_2d(np.asarray(e, dtype=np.float64)) for e in self.examples]
        if not self.examples or any(len(e) == 0 for e in self.examples):
            raise ValueError("a query needs at least one identity with at least one example")

    @property
    def Q(self) -> int:
        return len(self.examples)


@dataclass
class RankedResult:
    rows: np.ndarray
    scores: np.ndarray
    all_ids: Sequence[str] = field(repr=False, default=())

    def __len__(self):
        return len(self.rows)

    @property
    def ids(self) -> list:
        return [self.all_ids[r] for r in self.rows]

    def pairs(self):
        return list(zip(self.ids, self.scores.tolist()))


@dataclass
class TagIndex:
    postings: dict  # identity -> sorted unique array of set rows
    threshold: float
    ids: list
    combine: str = "mean"

    def __post_init__(self):
        self.id_rank = _id_rank(self.ids)

    def tags_of(self, row: int) -> set:
        return {ident for ident, p in self.postings.items() if row in set(p.tolist())}


# ---------------------------------------------------------------------------
# ranking helpers
# ---------------------------------------------------------------------------


def select_top(scores: np.ndarray, id_rank: np.ndarray, k: int, rows: np.ndarray | None = None) -> np.ndarray:
    """Positions of the ``k`` best entries (score descending, then set id), unordered.

    Linear time: a partition finds the k-th score and only ties at that
    score are resolved by id.
    """
    scores = np.asarray(scores)
    n = len(scores)
    if k >= n:
        return np.arange(n)
    if k <= 0:
        return np.zeros(0, np.int64)
    kth = np.partition(scores, n - k)[n - k]
    above = np.flatnonzero(scores > kth)
    tied = np.flatnonzero(scores == kth)
    need = k - len(above)
    if need < len(tied):
        ranks = id_rank[tied if rows is None else rows[tied]]
        tied = tied[np.argsort(ranks, kind="stable")[:need]]
    return np.concatenate([above, tied])


def rank_scores(scores: np.ndarray, id_rank: np.ndarray, all_ids, topk: int | None = None,
                rows: np.ndarray | None = None) -> RankedResult:
    """Sort by score (descending) then set id; keep only ``topk`` when given.

    ``scores[i]`` belongs to set ``rows[i]`` (default: set ``i``).
    """
    scores = np.asarray(scores)
    if rows is None:
        rows = np.arange(len(scores))
    cand = np.arange(len(scores)) if topk is None else select_top(scores, id_rank, topk, rows)
    order = np.lexsort((id_rank[rows[cand]], -scores[cand]))
    sel = cand[order]
    return RankedResult(rows[sel], np.asarray(scores[sel], dtype=np.float64), all_ids)


# ---------------------------------------------------------------------------
# index construction
# ---------------------------------------------------------------------------


def _prepare_elements(x, whitening: WhitenTransform | None):
    if whitening is not None and whitening.stage == "before":
        return apply_whitening(x, whitening)
    return np.asarray(x, dtype=np.float64)


def _finish_descriptors(v, whitening: WhitenTransform | None):
    if whitening is not None and whitening.stage == "after":
        return apply_whitening(v, whitening)
    return v


def build_set_index(dataset: SetCollection, model: AggregatorModel,
                    whitening: WhitenTransform | None = None) -> SetIndex:
    counts = dataset.counts
    keep = np.flatnonzero(counts > 0)
    if len(keep) < len(dataset):
        log.warning("skipping %d empty sets", len(dataset) - len(keep))
        dataset = dataset.subset(keep)
    if len(dataset) == 0:
        raise ValueError("dataset has no non-empty sets")
    x = _prepare_elements(dataset.x, whitening)
    failures = {}
    try:
        v = aggregate_many(x, dataset.offsets, model)
        good = np.arange(len(dataset))
    except AggregationError:
        rows, good_list = [], []
        for i in range(len(dataset)):
            try:
                rows.append(aggregate_set(x[dataset.offsets[i]:dataset.offsets[i + 1]], model))
                good_list.append(i)
            except AggregationError as exc:
                failures[dataset.ids[i]] = str(exc)
        if not rows:
            raise AggregationError(f"every set failed to aggregate; first: {next(iter(failures.values()))}")
        v, good = np.stack(rows), np.asarray(good_list)
    v = _finish_descriptors(v, whitening)
    return SetIndex([dataset.ids[i] for i in good], v, failures)


def build_element_index(dataset: SetCollection, whitening: WhitenTransform | None = None) -> ElementIndex:
    keep = np.flatnonzero(dataset.counts > 0)
    if len(keep) < len(dataset):
        log.warning("skipping %d empty sets", len(dataset) - len(keep))
        dataset = dataset.subset(keep)
    return ElementIndex(list(dataset.ids), _prepare_elements(dataset.x, whitening), dataset.offsets)


# ---------------------------------------------------------------------------
# query descriptors
# ---------------------------------------------------------------------------


def make_query_descriptors(q: QuerySpec, model: AggregatorModel, aggregate_examples: bool = True,
                           whitening: WhitenTransform | None = None) -> np.ndarray:
    """One descriptor per query identity, shape ``(Q, D)``."""
    out = []
    for ex in q.examples:
        use = ex if aggregate_examples else ex[:1]
        use = _prepare_elements(use, whitening)
        out.append(aggregate_set(use, model))
    return _finish_descriptors(np.stack(out), whitening)


def aggregate_query(q: QuerySpec, model: AggregatorModel,
                    whitening: WhitenTransform | None = None) -> np.ndarray:
    """All example descriptors of all identities pooled into one, shape ``(1, D)``."""
    x = _prepare_elements(np.concatenate(q.examples), whitening)
    return _finish_descriptors(aggregate_set(x, model)[None, :], whitening)


def element_query_descriptors(q: QuerySpec, whitening: WhitenTransform | None = None) -> np.ndarray:
    """Per-identity element-space descriptors for per-element scoring.

    Several examples are averaged and re-normalized; a single example is
    used as is.
    """
    out = []
    for ex in q.examples:
        ex = _prepare_elements(ex, whitening)
        m = ex.mean(axis=0)
        out.append(m / np.linalg.norm(m))
    return np.stack(out)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def _check_dims(qdescs, dim):
    q = np.atleast_2d(np.asarray(qdescs, dtype=np.float64))
    if q.shape[1] != dim:
        raise ValueError(f"query descriptors have dimension {q.shape[1]}, index has {dim}")
    return q


def score_desc_per_set(index: SetIndex, qdescs, head: LogisticHead, topk: int | None = None) -> RankedResult:
    q = _check_dims(qdescs, index.dim)
    scores = _kernels.set_scores(index.vectors, q, head.w, head.b)
    return rank_scores(scores, index.id_rank, index.ids, topk)


def pair_scores(elements, qdescs, head: LogisticHead) -> np.ndarray:
    """``(Q, F)`` matrix of ``sigmoid(w <q, x_f> + b)``."""
    return head(np.atleast_2d(qdescs) @ np.atleast_2d(elements).T)


def greedy_match(scores: np.ndarray) -> float:
    """Greedy maximal matching on a ``(Q, F)`` score matrix.

    Pairs are taken in decreasing score order (ties: lower query, then lower
    element index), skipping any whose query or element is already used.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n_q, n_f = scores.shape
    order = np.argsort(-scores.ravel(), kind="stable")
    used_q, used_f = set(), set()
    total = 0.0
    for idx in order:
        qi, fi = divmod(int(idx), n_f)
        if qi in used_q or fi in used_f:
            continue
        used_q.add(qi)
        used_f.add(fi)
        total += scores[qi, fi]
        if len(used_q) == min(n_q, n_f):
            break
    return total


def _hungarian_max(scores: np.ndarray) -> float:
    """Maximum-weight assignment via shortest augmenting paths, O(n^2 m)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.shape[0] > s.shape[1]:
        s = s.T
    n, m = s.shape
    cost = -s
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)  # match[j] = row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    total = 0.0
    for j in range(1, m + 1):
        if match[j]:
            total += s[match[j] - 1, j - 1]
    return total


def optimal_match(scores: np.ndarray) -> float:
    """Exact maximum-weight bipartite matching on a ``(Q, F)`` score matrix.

    Exhaustive over injections when there are at most 20k of them,
    Hungarian otherwise.
    Scores are positive (sigmoid outputs), so a maximal matching of size
    ``min(Q, F)`` is optimal.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.shape[0] > s.shape[1]:
        s = s.T
    n, m = s.shape
    if math.perm(m, n) <= 20_000:
        best = -np.inf
        rows = np.arange(n)
        for perm in itertools.permutations(range(m), n):
            best = max(best, s[rows, perm].sum())
        return float(best)
    return _hungarian_max(s)


def score_set_greedy(elements, qdescs, head: LogisticHead) -> float:
    return greedy_match(pair_scores(elements, qdescs, head))


def score_set_optimal(elements, qdescs, head: LogisticHead) -> float:
    return optimal_match(pair_scores(elements, qdescs, head))


_MATCHERS = {"greedy": _kernels.greedy_scores, "optimal": _kernels.optimal_scores}


def score_desc_per_element(eindex: ElementIndex, qdescs, head: LogisticHead, topk: int | None = None,
                           rows: np.ndarray | None = None, matcher: str = "greedy") -> RankedResult:
    """Matching score for every set (or for ``rows`` only).

    ``matcher="optimal"`` uses exhaustive maximum-weight matching and is
    only practical for the handful of queries and elements of retrieval.
    """
    if matcher not in _MATCHERS:
        raise ValueError(f"unknown matcher {matcher!r}")
    q = _check_dims(qdescs, eindex.dim)
    scores = _MATCHERS[matcher](eindex.x, eindex.offsets, q, head.w, head.b, rows)
    return rank_scores(scores, eindex.id_rank, eindex.ids, topk, rows=rows)


def rerank(initial: RankedResult, n_r: int, eindex: ElementIndex, qdescs, head: LogisticHead) -> RankedResult:
    """Rescore the first ``n_r`` entries by per-element matching; the rest keep their place."""
    if n_r < 0:
        raise ValueError("n_r must be non-negative")
    n_r = min(n_r, len(initial))
    if n_r == 0:
        return initial
    head_part = score_desc_per_element(eindex, qdescs, head, rows=initial.rows[:n_r])
    return RankedResult(
        np.concatenate([head_part.rows, initial.rows[n_r:]]),
        np.concatenate([head_part.scores, initial.scores[n_r:]]),
        initial.all_ids,
    )


def search_reranked(index: SetIndex, qdescs, head: LogisticHead, n_r: int, eindex: ElementIndex,
                    element_qdescs, element_head: LogisticHead, topk: int) -> RankedResult:
    """Descriptor-per-set shortlist of ``n_r`` sets, re-scored per element.

    Same ranking as ``rerank(score_desc_per_set(...), ...)`` cut to ``topk``
    but the shortlist is never sorted by its set-level score. Row ``i`` of
    both indexes must describe the same set.
    """
    if len(eindex) != len(index):
        raise ValueError("set index and element index hold different sets")
    if n_r < topk:
        initial = score_desc_per_set(index, qdescs, head, topk=topk)
        out = rerank(initial, n_r, eindex, element_qdescs, element_head)
        return RankedResult(out.rows[:topk], out.scores[:topk], out.all_ids)
    q = _check_dims(qdescs, index.dim)
    scores = _kernels.set_scores(index.vectors, q, head.w, head.b)
    # ascending rows keep the element reads sequential
    short = np.sort(select_top(scores, index.id_rank, n_r))
    return score_desc_per_element(eindex, element_qdescs, element_head, topk=topk, rows=short)


# ---------------------------------------------------------------------------
# pre-tagging
# ---------------------------------------------------------------------------


def build_tag_index(eindex: ElementIndex, examples: Mapping, head: LogisticHead,
                    threshold: float = 0.8, combine: str = "mean") -> TagIndex:
    """Tag identity ``i`` in a set when its example scores against the set's
    best-matching element, combined over examples (``mean`` or ``max``),
    exceed ``threshold``.

    ``examples`` maps identity -> ``(n_tag, D_e)`` example descriptors.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if combine not in ("mean", "max"):
        raise ValueError("combine must be 'mean' or 'max'")
    postings = {}
    starts = eindex.offsets[:-1]
    for ident, ex in examples.items():
        ex = np.atleast_2d(np.asarray(ex, dtype=np.float32))
        s = head(eindex.x @ ex.T)
        per_elem = s.mean(axis=1) if combine == "mean" else s.max(axis=1)
        best = np.maximum.reduceat(per_elem, starts)
        postings[ident] = np.flatnonzero(best > threshold).astype(np.int64)
    return TagIndex(postings, float(threshold), list(eindex.ids), combine)


def score_pretag(tags: TagIndex, query_identities, topk: int | None = None) -> RankedResult:
    """Rank sets by the number of query identities they are tagged with."""
    missing = [q for q in query_identities if q not in tags.postings]
    if missing:
        raise ClosedWorldError(f"identities not in the tag vocabulary: {missing}")
    scores = np.zeros(len(tags.ids))
    for q in dict.fromkeys(query_identities):
        scores[tags.postings[q]] += 1.0
    return rank_scores(scores, tags.id_rank, tags.ids, topk)
