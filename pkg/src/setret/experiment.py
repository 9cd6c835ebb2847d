"""
End-to-end synthetic benchmark: galleries, trained models and the
retrieval-quality measurements shared by the CLI ``eval`` command and the
acceptance tests.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from ._kernels import _sigmoid as sigmoid
from .aggregator import AggregatorModel, aggregate_many
from .bench import StressConfig, StressData, ndcg_from_relevances, synth_stress_datasets
from .engine import (
    ElementIndex,
    build_element_index,
    build_set_index,
    rank_scores,
    rerank,
    score_desc_per_element,
    score_desc_per_set,
    search_reranked,
)
from .synth import EmbeddingSpace, gallery_matrix, gen_gallery, sample_elements
from .trainer import TrainConfig, build_batch, train
from .whitening import WhitenTransform, apply_whitening, fit_whitening

log = logging.getLogger(__name__)


@dataclass
class BenchConfig:
    dim: int = 64
    K: int = 8
    D: int = 64
    space_offset: float = 0.5
    space_decay: float = 2.5
    space_seed: int = 2024
    n_train_identities: int = 1000
    n_test_identities: int = 500
    n_distractor_identities: int = 200
    noise_sigma: float = 0.25
    seed: int = 0
    stress: StressConfig = field(default_factory=StressConfig)
    setnet: TrainConfig = field(default_factory=lambda: TrainConfig(mode="netvlad", set_size=2))
    baseline: TrainConfig = field(default_factory=lambda: TrainConfig(
        mode="average", set_size=2, epochs=6, pretrain_epochs=0, lr_finetune=0.01))
    whitening_sample: int = 20000

    def __post_init__(self):
        sync = dict(D_e=self.dim, noise_sigma=self.noise_sigma)
        self.setnet = replace(self.setnet, K=self.K, D=self.D, **sync)
        self.baseline = replace(self.baseline, D=self.dim, **sync)
        self.stress = replace(self.stress, noise_sigma=self.noise_sigma)

    @property
    def space(self) -> EmbeddingSpace:
        return EmbeddingSpace(self.dim, self.space_offset, self.space_decay, self.space_seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stress"] = self.stress.to_dict()
        d["setnet"] = self.setnet.to_dict()
        d["baseline"] = self.baseline.to_dict()
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchConfig":
        """Inverse of ``to_dict``; unknown keys raise ``ValueError``.

        Nested ``stress``/``setnet``/``baseline`` dicts may be partial.
        """
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown bench config keys: {sorted(unknown)}")
        base = cls()
        if "stress" in doc:
            sd = dict(doc["stress"])
            bad = set(sd) - {f.name for f in fields(StressConfig)}
            if bad:
                raise ValueError(f"unknown stress config keys: {sorted(bad)}")
            if "distractors" in sd:
                sd["distractors"] = tuple(sd["distractors"])
            doc["stress"] = replace(base.stress, **sd)
        for key in ("setnet", "baseline"):
            if key in doc:
                merged = getattr(base, key).to_dict()
                merged.update(doc[key])
                doc[key] = TrainConfig.from_dict(merged)
        return cls(**doc)


@dataclass
class World:
    train_gallery: list
    test_gallery: list
    distractors: list


def make_world(cfg: BenchConfig, seed: int | None = None) -> World:
    """Disjoint training, test and distractor identities from one embedding space."""
    seed = cfg.seed if seed is None else seed
    space = cfg.space
    return World(
        gen_gallery(cfg.n_train_identities, cfg.dim, [seed, 11], space, first_id=0),
        gen_gallery(cfg.n_test_identities, cfg.dim, [seed, 12], space, first_id=100_000),
        gen_gallery(cfg.n_distractor_identities, cfg.dim, [seed, 13], space, first_id=200_000),
    )


@dataclass
class Method:
    name: str
    model: AggregatorModel
    whitening: WhitenTransform | None = None


def fit_element_whitening(gallery, cfg: BenchConfig, seed: int = 0) -> WhitenTransform:
    ids, centers = gallery_matrix(gallery)
    rng = np.random.Generator(np.random.PCG64([seed, 21]))
    x = sample_elements(centers[rng.integers(0, len(ids), cfg.whitening_sample)], cfg.noise_sigma, rng)
    return fit_whitening(x, stage="before")


def fit_set_whitening(gallery, model: AggregatorModel, cfg: BenchConfig, seed: int = 0) -> WhitenTransform:
    """Whitening of set descriptors, fitted on synthesized training sets and singletons."""
    ids, centers = gallery_matrix(gallery)
    rng = np.random.Generator(np.random.PCG64([seed, 22]))
    tcfg = cfg.setnet
    rows = []
    while sum(len(r) for r in rows) < cfg.whitening_sample:
        sets, queries, _ = build_batch((ids, centers), tcfg, rng=rng)
        x = np.concatenate(sets + [queries])
        offsets = np.concatenate([np.arange(len(sets) + 1) * tcfg.set_size,
                                  len(sets) * tcfg.set_size + 1 + np.arange(len(queries))])
        rows.append(aggregate_many(x, offsets, model))
    return fit_whitening(np.concatenate(rows), stage="after")


def train_methods(cfg: BenchConfig, world: World, which=("setnet", "baseline", "baseline_w", "setnet_w")):
    """Trained models keyed by method name, plus training logs."""
    methods, logs = {}, {}
    if "baseline" in which:
        m, logs["baseline"] = train(world.train_gallery, cfg.baseline)
        methods["baseline"] = Method("baseline", m)
    if "baseline_w" in which:
        wt = fit_element_whitening(world.train_gallery, cfg, cfg.seed)
        m, logs["baseline_w"] = train(world.train_gallery, cfg.baseline, whitening=wt)
        methods["baseline_w"] = Method("baseline_w", m, wt)
    if "setnet" in which or "setnet_w" in which:
        m, logs["setnet"] = train(world.train_gallery, cfg.setnet)
        methods["setnet"] = Method("setnet", m)
        if "setnet_w" in which:
            wt = fit_set_whitening(world.train_gallery, m, cfg, cfg.seed)
            methods["setnet_w"] = Method("setnet_w", m, wt)
    return methods, logs


# ---------------------------------------------------------------------------
# batched evaluation
# ---------------------------------------------------------------------------


def _encode_queries(method: Method, examples: np.ndarray, query_agg: bool) -> np.ndarray:
    """Query descriptors for all queries of one repeat.

    ``examples`` is ``(n_queries, Q, N_ex, D_e)``. Returns ``(n_queries, Q, D)``
    or ``(n_queries, 1, D)`` with query aggregation.
    """
    nq, q, n_ex, de = examples.shape
    x = examples.reshape(-1, de)
    wt = method.whitening
    if wt is not None and wt.stage == "before":
        x = apply_whitening(x, wt)
    per = q * n_ex if query_agg else n_ex
    offsets = np.arange(len(x) // per + 1, dtype=np.int64) * per
    v = aggregate_many(x, offsets, method.model)
    if wt is not None and wt.stage == "after":
        v = apply_whitening(v, wt)
    return v.reshape(nq, 1 if query_agg else q, -1)


def _element_queries(examples: np.ndarray, whitening) -> np.ndarray:
    x = examples
    if whitening is not None:
        x = apply_whitening(x, whitening)
    m = x.mean(axis=2)
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


@dataclass
class EvalResult:
    ndcg10: float
    ndcg30: float
    per_repeat10: list = field(default_factory=list)


def evaluate_set_method(stress: StressData, d: int, method: Method, repeats: int | None = None,
                        n_ex: int = 1, query_agg: bool = False, rerank_n: int = 0,
                        element: tuple | None = None, index=None) -> EvalResult:
    """Mean nDCG@10/30 of descriptor-per-set retrieval (optionally re-ranked).

    ``element`` is ``(ElementIndex, head, element whitening)`` for re-ranking.
    """
    repeats = stress.config.repeats if repeats is None else repeats
    if index is None:
        index = build_set_index(stress.datasets[d], method.model, method.whitening)
    head = method.model.head
    topk = max(30, rerank_n)
    vecs = index.vectors.astype(np.float64)
    out10, out30 = [], []
    for r in range(repeats):
        ex = stress.query_examples(r, n_ex)
        qd = _encode_queries(method, ex, query_agg)
        nq, qq, dd = qd.shape
        # all queries of the repeat in one product; same arithmetic as the per-query kernel
        sim = vecs @ qd.reshape(-1, dd).T
        scores = sigmoid(head.w * sim + head.b).reshape(len(index), nq, qq).sum(axis=2)
        if rerank_n:
            eidx, ehead, ewt = element
            eq = _element_queries(ex, ewt)
        r10, r30 = [], []
        for qi in range(nq):
            ranking = rank_scores(scores[:, qi], index.id_rank, index.ids, topk)
            if rerank_n:
                ranking = rerank(ranking, rerank_n, eidx, eq[qi], ehead)
            rel = stress.judgments[qi]
            r10.append(ndcg_from_relevances(rel[ranking.rows[:10]], rel, 10))
            r30.append(ndcg_from_relevances(rel[ranking.rows[:30]], rel, 30))
        out10.append(np.mean(r10))
        out30.append(np.mean(r30))
    return EvalResult(float(np.mean(out10)), float(np.mean(out30)), [float(v) for v in out10])


def evaluate_element_method(stress: StressData, d: int, eidx: ElementIndex, head, whitening,
                            repeats: int | None = None, n_ex: int = 1, matcher: str = "greedy") -> EvalResult:
    repeats = stress.config.repeats if repeats is None else repeats
    out10, out30 = [], []
    for r in range(repeats):
        eq = _element_queries(stress.query_examples(r, n_ex), whitening)
        r10, r30 = [], []
        for qi in range(len(eq)):
            ranking = score_desc_per_element(eidx, eq[qi], head, topk=30, matcher=matcher)
            rel = stress.judgments[qi]
            r10.append(ndcg_from_relevances(rel[ranking.rows[:10]], rel, 10))
            r30.append(ndcg_from_relevances(rel[ranking.rows[:30]], rel, 30))
        out10.append(np.mean(r10))
        out30.append(np.mean(r30))
    return EvalResult(float(np.mean(out10)), float(np.mean(out30)), [float(v) for v in out10])


# ---------------------------------------------------------------------------
# full results table
# ---------------------------------------------------------------------------

EVAL_METHODS = ("baseline", "baseline_w", "setnet", "setnet_w", "setnet_qagg", "setnet_rerank", "element")


def rerank_depth(n_sets: int, fraction: float = 0.25) -> int:
    return max(1, int(round(fraction * n_sets)))


def _query_fns(method_name, methods, stress, d, index_cache, eidx, ehead, n_r, examples):
    """Per-query callables for timing; query encoding happens up front."""
    if method_name == "element":
        eq = _element_queries(examples, None)
        return lambda i: score_desc_per_element(eidx, eq[i], ehead, topk=30)
    base = "setnet" if method_name.startswith("setnet_") and method_name != "setnet_w" else method_name
    m = methods[base]
    index = index_cache[base]
    qd = _encode_queries(m, examples, method_name == "setnet_qagg")
    if method_name == "setnet_rerank":
        eq = _element_queries(examples, None)
        return lambda i: search_reranked(index, qd[i], m.model.head, n_r, eidx, eq[i], ehead, 30)
    return lambda i: score_desc_per_set(index, qd[i], m.model.head, topk=30)


def run_eval(cfg: BenchConfig, distractors=None, methods_wanted=EVAL_METHODS, timing: bool = True,
             timing_queries: int = 20, timing_rounds: int = 3, world: World | None = None,
             trained: dict | None = None) -> tuple[list[dict], StressData]:
    """nDCG@10/30 (and optionally per-query seconds) for every method and distractor count.

    Rows are dicts with keys ``method, d, ndcg10, ndcg30, seconds, speedup``.
    Timing uses the first repeat's queries, single-threaded, and excludes
    query encoding. The per-element scorer and the re-ranker use raw element
    descriptors with the average-pool baseline's logistic head.
    """
    from .bench import time_strategies

    world = world or make_world(cfg)
    stress = synth_stress_datasets(world.test_gallery, world.distractors, cfg.stress)
    distractors = list(cfg.stress.distractors if distractors is None else distractors)
    unknown = set(methods_wanted) - set(EVAL_METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    if trained is None:
        need = {"baseline"}
        for name in methods_wanted:
            need.add({"setnet_qagg": "setnet", "setnet_rerank": "setnet", "element": "baseline"}.get(name, name))
        trained, _ = train_methods(cfg, world, tuple(need))
    ehead = trained["baseline"].model.head
    rows = []
    for d in distractors:
        if d not in stress.datasets:
            raise ValueError(f"distractor count {d} not in the stress config")
        ds = stress.datasets[d]
        n_r = rerank_depth(len(ds))
        eidx = build_element_index(ds)
        index_cache = {name: build_set_index(ds, m.model, m.whitening) for name, m in trained.items()}
        block = {}
        for name in methods_wanted:
            if name == "element":
                res = evaluate_element_method(stress, d, eidx, ehead, None)
            elif name == "setnet_qagg":
                res = evaluate_set_method(stress, d, trained["setnet"], query_agg=True, index=index_cache["setnet"])
            elif name == "setnet_rerank":
                res = evaluate_set_method(stress, d, trained["setnet"], rerank_n=n_r,
                                          element=(eidx, ehead, None), index=index_cache["setnet"])
            else:
                res = evaluate_set_method(stress, d, trained[name], index=index_cache[name])
            block[name] = {"method": name, "d": d, "ndcg10": res.ndcg10, "ndcg30": res.ndcg30,
                           "seconds": None, "speedup": None}
        if timing:
            examples = stress.query_examples(0, 1)
            fns = {name: _query_fns(name, trained, stress, d, index_cache, eidx, ehead, n_r, examples)
                   for name in methods_wanted}
            for t in time_strategies(fns, min(timing_queries, len(examples)), timing_rounds):
                block[t["strategy"]]["seconds"] = t["seconds"]
                block[t["strategy"]]["speedup"] = t["speedup"] if "element" in fns else None
        rows.extend(block.values())
        log.info("d=%d done", d)
    return rows, stress


def gram_diffs(cfg: BenchConfig, world: World, methods: dict, n_samples: int = 100, seed: int = 5) -> dict:
    """gram_diff on the test identities for each method (``None`` model = raw elements)."""
    from .bench import gram_diff, identity_descriptors

    _, centers = gallery_matrix(world.test_gallery)
    out = {}
    for name, m in methods.items():
        rng = np.random.Generator(np.random.PCG64([seed, 31]))
        model = None if m.model.mode == "average" else m.model
        out[name] = gram_diff(identity_descriptors(model, centers, n_samples, cfg.noise_sigma, rng, m.whitening))
    return out
