"""
Evaluation harness
==================

nDCG, stress-test dataset synthesis, the Gram-matrix orthogonality
statistic and wall-clock timing of the scoring strategies.
"""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .aggregator import AggregatorModel, aggregate_many
from .engine import RankedResult, SetCollection
from .synth import IdentityPrototype, gallery_matrix, sample_elements
from .whitening import WhitenTransform, apply_whitening

log = logging.getLogger(__name__)

__all__ = [
    "dcg_at_n",
    "ndcg_at_n",
    "ndcg_from_relevances",
    "StressConfig",
    "StressData",
    "synth_stress_datasets",
    "identity_descriptors",
    "gram_diff",
    "time_strategies",
    "single_thread",
]


# ---------------------------------------------------------------------------
# nDCG
# ---------------------------------------------------------------------------


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def dcg_at_n(relevances, n: int) -> float:
    """Sum over the first ``n`` ranks of ``(2**rel - 1) / log2(rank + 1)``.

    Missing ranks past the end of the list count as relevance 0.
    """
    if n < 1:
        raise ValueError("N must be >= 1")
    rel = np.asarray(relevances, dtype=np.float64)[:n]
    if np.any(rel < 0):
        raise ValueError("relevance must be non-negative")
    return float(np.sum((2.0**rel - 1.0) * _discounts(len(rel))))


def ndcg_from_relevances(ranked_rel, all_rel, n: int) -> float:
    ideal = dcg_at_n(np.sort(np.asarray(all_rel))[::-1][:n], n)
    actual = dcg_at_n(ranked_rel, n)
    if ideal == 0.0:
        return 100.0 if actual == 0.0 else 0.0
    return 100.0 * actual / ideal


def ndcg_at_n(ranking: RankedResult, judgments, n: int) -> float:
    """nDCG@n in percent.

    ``judgments`` is either an array of relevances indexed by set row, or a
    mapping ``set id -> relevance`` (absent ids count as 0).
    """
    if isinstance(judgments, Mapping):
        ranked = [judgments.get(i, 0) for i in ranking.ids[:n]]
        all_rel = list(judgments.values())
    else:
        judgments = np.asarray(judgments)
        ranked = judgments[ranking.rows[:n]]
        all_rel = judgments
    return ndcg_from_relevances(ranked, all_rel, n)


# ---------------------------------------------------------------------------
# stress-test data
# ---------------------------------------------------------------------------


@dataclass
class StressConfig:
    n_sets: int = 8000
    identities_per_set: int = 2
    distractors: tuple = (0, 1, 2, 3)
    n_queries: int = 100
    identities_per_query: int = 2
    repeats: int = 10
    noise_sigma: float = 0.25
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distractors"] = list(self.distractors)
        return d


@dataclass
class StressData:
    config: StressConfig
    datasets: dict  # distractor count -> SetCollection
    queries: np.ndarray  # (n_queries, identities_per_query) identity ids
    judgments: np.ndarray  # (n_queries, n_sets) relevance, shared by all datasets
    gallery_ids: np.ndarray
    gallery_centers: np.ndarray

    def query_examples(self, repeat: int, n_ex: int = 1, seed_salt: int = 0) -> np.ndarray:
        """Fresh examples, ``(n_queries, Q, n_ex, D_e)``, for one repeat."""
        rng = np.random.Generator(np.random.PCG64([self.config.seed, 7, repeat, seed_salt]))
        pos = {int(i): k for k, i in enumerate(self.gallery_ids)}
        rows = np.vectorize(pos.__getitem__)(self.queries)
        centers = np.repeat(self.gallery_centers[rows.ravel()], n_ex, axis=0)
        ex = sample_elements(centers, self.config.noise_sigma, rng)
        return ex.reshape(*self.queries.shape, n_ex, -1)

    def judgments_jsonl(self) -> str:
        import json

        base = self.datasets[min(self.datasets)]
        lines = []
        for qi, ident in enumerate(self.queries):
            nz = np.flatnonzero(self.judgments[qi])
            rel = {base.ids[j]: int(self.judgments[qi, j]) for j in nz}
            lines.append(json.dumps({"query": qi, "identities": [int(i) for i in ident], "relevance": rel}))
        return "\n".join(lines) + "\n"


def synth_stress_datasets(gallery: Sequence[IdentityPrototype], unknown_pool: Sequence[IdentityPrototype],
                          cfg: StressConfig) -> StressData:
    """Base sets of labelled identities plus distractor-augmented copies.

    Every dataset shares the same labelled elements; the copy with ``d``
    distractors adds the first ``d`` of a fixed per-set distractor list, so
    relevance judgments are identical across copies.
    """
    ids, centers = gallery_matrix(gallery)
    d_ids, d_centers = gallery_matrix(unknown_pool)
    if np.intersect1d(ids, d_ids).size:
        raise ValueError("gallery and distractor pool share identities")
    k = cfg.identities_per_set
    if len(ids) < max(k, cfg.identities_per_query):
        raise ValueError("gallery too small for the requested set size")
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 3]))
    n = cfg.n_sets
    members = np.stack([rng.choice(len(ids), size=k, replace=False) for _ in range(n)])
    elems = sample_elements(centers[members.ravel()], cfg.noise_sigma, rng).reshape(n, k, -1)
    d_max = max(cfg.distractors)
    if d_max > 0:
        pick = rng.integers(0, len(d_ids), size=n * d_max)
        extra = sample_elements(d_centers[pick], cfg.noise_sigma, rng).reshape(n, d_max, -1)
    width = len(str(n - 1))
    set_ids = [f"s{i:0{width}d}" for i in range(n)]
    datasets = {}
    for d in cfg.distractors:
        x = elems if d == 0 else np.concatenate([elems, extra[:, :d]], axis=1)
        lab = np.concatenate([ids[members], np.full((n, d), -1, dtype=np.int64)], axis=1)
        datasets[d] = SetCollection(
            set_ids, x.reshape(n * (k + d), -1), np.arange(n + 1, dtype=np.int64) * (k + d), lab.ravel()
        )

    # queries: identity groups that co-occur in at least one set
    q = cfg.identities_per_query
    if q > k:
        raise ValueError("queries cannot have more identities than a set holds")
    seen, queries = set(), []
    for j in rng.permutation(n):
        group = tuple(sorted(rng.choice(ids[members[j]], size=q, replace=False).tolist()))
        if group not in seen:
            seen.add(group)
            queries.append(group)
        if len(queries) == cfg.n_queries:
            break
    if len(queries) < cfg.n_queries:
        raise ValueError(f"only {len(queries)} distinct co-occurring query groups available")
    queries = np.asarray(queries, dtype=np.int64)
    set_labels = ids[members]
    judgments = np.stack([np.isin(set_labels, qq).sum(axis=1) for qq in queries]).astype(np.int64)
    return StressData(cfg, datasets, queries, judgments, ids, centers)


# ---------------------------------------------------------------------------
# descriptor orthogonality
# ---------------------------------------------------------------------------


def identity_descriptors(model: AggregatorModel | None, centers: np.ndarray, n_samples: int,
                         noise_sigma: float, rng: np.random.Generator,
                         whitening: WhitenTransform | None = None) -> np.ndarray:
    """L2-normalized mean over ``n_samples`` single-element descriptors per identity.

    ``model=None`` uses the raw element descriptors (the average-pool
    baseline encodes a singleton as the element itself).
    """
    n_id = len(centers)
    x = sample_elements(np.repeat(centers, n_samples, axis=0), noise_sigma, rng)
    if whitening is not None and whitening.stage == "before":
        x = apply_whitening(x, whitening)
    if model is not None:
        x = aggregate_many(x, np.arange(len(x) + 1, dtype=np.int64), model)
    if whitening is not None and whitening.stage == "after":
        x = apply_whitening(x, whitening)
    m = x.reshape(n_id, n_samples, -1).mean(axis=1)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def gram_diff(descriptors) -> float:
    """``||G - I||_F`` of the mean-subtracted, re-normalized descriptors."""
    v = np.asarray(descriptors, dtype=np.float64)
    if v.ndim != 2 or len(v) < 2:
        raise ValueError("gram_diff needs at least two descriptors")
    v = v - v.mean(axis=0)
    norms = np.linalg.norm(v, axis=1)
    tiny = norms <= 1e-12 * max(1.0, float(np.abs(v).max(initial=0.0)))
    if np.any(tiny):
        raise ValueError(f"descriptor of identity {int(np.flatnonzero(tiny)[0])} vanishes after mean subtraction")
    v = v / norms[:, None]
    g = v @ v.T
    return float(np.linalg.norm(g - np.eye(len(v))))


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


@contextmanager
def single_thread():
    """Cap BLAS/OpenMP pools at one thread while timing."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield


def time_strategies(strategies: Mapping[str, Callable[[int], object]], n_queries: int, repeats: int = 1,
                    reference: str = "element") -> list[dict]:
    """Median wall-clock seconds per query for each strategy.

    Each strategy is called as ``fn(query_number)``. One untimed warm-up
    pass runs first (JIT compilation, caches). Strategies are timed in
    interleaved rounds of ``n_queries`` calls and the median round is kept,
    which damps drift on a shared machine. ``speedup`` is relative to the
    ``reference`` strategy when present.
    """
    names = list(strategies)
    rounds = {name: [] for name in names}
    with single_thread():
        for fn in strategies.values():
            for i in range(min(n_queries, 3)):
                fn(i)
        for _ in range(max(1, repeats)):
            for name in names:
                fn = strategies[name]
                t0 = time.perf_counter()
                for i in range(n_queries):
                    fn(i)
                rounds[name].append((time.perf_counter() - t0) / n_queries)
    rows = [{"strategy": n, "seconds": float(np.median(rounds[n]))} for n in names]
    ref = next((r["seconds"] for r in rows if r["strategy"] == reference), None)
    for r in rows:
        r["speedup"] = ref / r["seconds"] if ref else float("nan")
    return rows
