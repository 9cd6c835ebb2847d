import math
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from setret.bench import (
    StressConfig,
    dcg_at_n,
    gram_diff,
    ndcg_at_n,
    ndcg_from_relevances,
    synth_stress_datasets,
    time_strategies,
)
from setret.engine import RankedResult
from setret.synth import gen_gallery


def literal_dcg(rel, n):
    """DCG@n written out term by term: (2^rel_i - 1) / log2(i + 1), i = 1..n."""
    total = 0.0
    for i in range(1, n + 1):
        r = rel[i - 1] if i <= len(rel) else 0
        total += (2**r - 1) / math.log2(i + 1)
    return total


class TestDCG:
    def test_worked_values(self):
        assert dcg_at_n([2, 1, 0], 3) == pytest.approx(3 + 1 / math.log2(3), abs=1e-12)
        assert dcg_at_n([2, 1, 0], 3) == pytest.approx(3.63093, abs=1e-5)
        assert dcg_at_n([1, 2], 2) == pytest.approx(2.89279, abs=1e-5)
        assert dcg_at_n([0, 0, 0], 3) == 0.0

    def test_ndcg_worked_value(self):
        assert ndcg_from_relevances([1, 2], [2, 1], 2) == pytest.approx(79.67, abs=5e-3)

    def test_perfect_ranking_is_100(self):
        assert ndcg_from_relevances([2, 2, 1, 0], [0, 1, 2, 2], 4) == pytest.approx(100.0)

    def test_truncation(self):
        assert ndcg_from_relevances([1, 0, 2], [2, 1, 0], 2) == ndcg_from_relevances([1, 0, 2, 0, 0], [2, 1, 0], 2)

    def test_zero_ideal_is_vacuous(self):
        assert ndcg_from_relevances([0, 0], [0, 0, 0], 2) == 100.0

    def test_errors(self):
        with pytest.raises(ValueError):
            dcg_at_n([1], 0)
        with pytest.raises(ValueError):
            dcg_at_n([-1], 1)

    @given(st.lists(st.integers(0, 3), min_size=0, max_size=40), st.integers(1, 50))
    def test_matches_literal_formula(self, rel, n):
        assert abs(dcg_at_n(rel, n) - literal_dcg(rel, n)) < 1e-12

    @given(st.lists(st.integers(0, 3), min_size=1, max_size=40), st.integers(1, 50), st.integers(0, 2**32 - 1))
    def test_ndcg_bounded(self, rel, n, seed):
        rel = np.asarray(rel)
        ranked = np.random.default_rng(seed).permutation(rel)
        v = ndcg_from_relevances(ranked[:n], rel, n)
        assert 0.0 <= v <= 100.0 + 1e-9
        assert ndcg_from_relevances(np.sort(rel)[::-1][:n], rel, n) == pytest.approx(100.0)

    def test_ranked_result_and_mapping(self):
        r = RankedResult(np.array([2, 0, 1]), np.array([3.0, 2.0, 1.0]), ["a", "b", "c"])
        by_row = ndcg_at_n(r, np.array([1, 0, 2]), 3)
        by_id = ndcg_at_n(r, {"a": 1, "c": 2}, 3)
        assert by_row == by_id == pytest.approx(100.0)


class TestStressData:
    gallery = gen_gallery(60, 8, seed=1, first_id=0)
    pool = gen_gallery(10, 8, seed=2, first_id=1000)
    cfg = StressConfig(n_sets=200, n_queries=20, distractors=(0, 1, 3))

    def test_shapes_and_judgments(self):
        data = synth_stress_datasets(self.gallery, self.pool, self.cfg)
        assert sorted(data.datasets) == [0, 1, 3]
        for d, ds in data.datasets.items():
            assert len(ds) == 200
            np.testing.assert_array_equal(ds.counts, 2 + d)
            assert np.sum(ds.labels == -1) == 200 * d
        base = data.datasets[0]
        for d in (1, 3):
            for i in range(0, 200, 37):
                np.testing.assert_array_equal(data.datasets[d].elements(i)[:2], base.elements(i))
        assert data.judgments.shape == (20, 200)
        assert data.judgments.min() >= 0 and data.judgments.max() <= 2

    def test_queries_co_occur(self):
        data = synth_stress_datasets(self.gallery, self.pool, self.cfg)
        assert len({tuple(q) for q in data.queries}) == 20
        for qi in range(20):
            assert data.judgments[qi].max() == 2
            assert ndcg_from_relevances(np.zeros(10), data.judgments[qi], 10) == 0.0
        ex = data.query_examples(0, 3)
        assert ex.shape == (20, 2, 3, 8)

    def test_deterministic(self):
        a = synth_stress_datasets(self.gallery, self.pool, self.cfg)
        b = synth_stress_datasets(self.gallery, self.pool, self.cfg)
        assert a.datasets[3].x.tobytes() == b.datasets[3].x.tobytes()
        np.testing.assert_array_equal(a.queries, b.queries)

    def test_unsatisfiable_query_count(self):
        small = StressConfig(n_sets=3, n_queries=50, distractors=(0,))
        with pytest.raises(ValueError, match="co-occurring"):
            synth_stress_datasets(self.gallery, self.pool, small)

    def test_overlapping_pools_rejected(self):
        with pytest.raises(ValueError, match="share"):
            synth_stress_datasets(self.gallery, self.gallery[:5], self.cfg)

    def test_judgments_jsonl(self):
        import json

        data = synth_stress_datasets(self.gallery, self.pool, self.cfg)
        lines = data.judgments_jsonl().splitlines()
        assert len(lines) == 20
        rec = json.loads(lines[0])
        assert len(rec["identities"]) == 2 and max(rec["relevance"].values()) == 2


class TestGramDiff:
    @pytest.mark.parametrize("n", [2, 3, 5, 8])
    def test_simplex_is_the_floor(self, n):
        """Orthonormal rows become a regular simplex after centring: ||G - I|| = sqrt(n / (n - 1))."""
        v = np.eye(n) + 3.0  # common offset is removed by the mean subtraction
        assert gram_diff(v) == pytest.approx(math.sqrt(n / (n - 1)), abs=1e-12)

    def test_row_order_irrelevant(self, rng):
        v = rng.normal(size=(20, 6))
        assert gram_diff(v) == pytest.approx(gram_diff(v[rng.permutation(20)]), abs=1e-12)

    def test_opposite_pair(self):
        d = np.array([0.6, 0.8])
        assert gram_diff(np.vstack([d, -d])) == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_identical_descriptors_rejected(self):
        with pytest.raises(ValueError, match="identity 0"):
            gram_diff(np.ones((3, 4)))


class TestTiming:
    def test_reports_median_and_speedup(self):
        calls = {"fast": 0, "slow": 0}

        def fast(i):
            calls["fast"] += 1

        def slow(i):
            calls["slow"] += 1
            time.sleep(0.002)

        rows = time_strategies({"fast": fast, "element": slow, "slow": slow}, n_queries=4, repeats=3)
        by = {r["strategy"]: r for r in rows}
        assert by["element"]["speedup"] == 1.0
        assert by["fast"]["seconds"] < by["slow"]["seconds"]
        assert by["fast"]["speedup"] > 10
        assert calls["fast"] == 3 + 3 * 4  # warm-up plus three timed rounds

    def test_no_reference(self):
        rows = time_strategies({"a": lambda i: None}, n_queries=2)
        assert math.isnan(rows[0]["speedup"])


class TestBenchTrends:
    def test_quality_does_not_rise_with_distractors(self, bench_eval):
        """No method gains more than one nDCG@10 point when distractors are added."""
        methods = {m for m, _ in bench_eval}
        for m in methods:
            curve = [bench_eval[m, d]["ndcg10"] for d in range(4)]
            assert all(b <= a + 1.0 for a, b in zip(curve, curve[1:])), (m, curve)

    def test_per_set_faster_than_per_element(self, bench_eval):
        for d in range(4):
            assert bench_eval["setnet", d]["seconds"] < bench_eval["element", d]["seconds"]
            # one aggregated descriptor scans the index once instead of Q times
            assert bench_eval["setnet_qagg", d]["seconds"] < bench_eval["setnet", d]["seconds"]

    def test_aggregated_query_keeps_ndcg30(self, bench):
        """Two-identity aggregated query, three examples each, stays within 2 nDCG@30 points."""
        from setret.experiment import evaluate_set_method

        m = bench["methods"]["setnet"]
        a = evaluate_set_method(bench["stress"], 0, m, n_ex=3)
        b = evaluate_set_method(bench["stress"], 0, m, n_ex=3, query_agg=True)
        print(f"nDCG@30 per-identity {a.ndcg30:.2f} aggregated {b.ndcg30:.2f}")
        assert abs(a.ndcg30 - b.ndcg30) <= 2.0

    @pytest.mark.slow
    def test_trained_model_more_orthogonal_than_baseline(self):
        """gram_diff of the trained set model beats the average-pool baseline on >= 8 of 10 seeds."""
        from setret.experiment import BenchConfig, gram_diffs, make_world, train_methods

        wins = []
        for seed in range(10):
            cfg = BenchConfig(seed=seed)
            world = make_world(cfg)
            methods, _ = train_methods(cfg, world, ("baseline", "setnet"))
            g = gram_diffs(cfg, world, methods)
            wins.append(g["setnet"] < g["baseline"])
        assert sum(wins) >= 8
