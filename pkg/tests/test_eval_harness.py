"""
Metrics against brute-force references, the depth sweep, the tradeoff plot
and the confidence probe
"""

import itertools
import math

import matplotlib.pyplot as plt
import numpy as np
import pytest

from src.models.collections import Qrels, RunFile, RunRow
from src.models.schemas import TradeoffPoint
from src.services import eval_harness
from src.services.budget_reranker import BudgetReranker, plan_fixed_depth
from src.utils import svg_plot
from src.utils.errors import ConfigError


def _reference_dcg(grades, cutoff=10):
    total = 0.0
    for i, grade in enumerate(grades[:cutoff]):
        total += (2 ** grade - 1) / math.log2(i + 2)
    return total


def _reference_ndcg(ranked, judged, cutoff=10):
    ideal = max(_reference_dcg(list(p), cutoff) for p in itertools.permutations(judged.values()))
    return _reference_dcg([judged.get(d, 0) for d in ranked], cutoff) / ideal


def _reference_mrr(ranked, judged, cutoff=10):
    for i, doc_id in enumerate(ranked[:cutoff]):
        if judged.get(doc_id, 0) >= 1:
            return 1.0 / (i + 1)
    return 0.0


def _run(query_id, doc_ids):
    n = len(doc_ids)
    return RunFile(tuple(RunRow(query_id, d, i + 1, float(n - i), "t") for i, d in enumerate(doc_ids)))


class TestMetricOracles:

    def test_random_instances(self):
        rng = np.random.default_rng(0)
        checked = 0
        for trial in range(100):
            n = int(rng.integers(1, 9))
            docs = [f"d{i}" for i in range(n)]
            grades = rng.integers(0, 4, size=n)
            if grades.max() == 0:
                grades[int(rng.integers(n))] = int(rng.integers(1, 4))
            qid = f"q{trial}"
            judged = {d: int(g) for d, g in zip(docs, grades)}
            qrels = Qrels({(qid, d): g for d, g in judged.items()})
            ranked = [docs[int(i)] for i in rng.permutation(n)]
            run = _run(qid, ranked)
            ndcg = eval_harness.ndcg_at(run, qrels, 10).mean
            mrr = eval_harness.mrr_at(run, qrels, 10).mean
            assert abs(ndcg - _reference_ndcg(ranked, judged)) < 1e-9
            assert abs(mrr - _reference_mrr(ranked, judged)) < 1e-9
            checked += 1
        assert checked == 100

    def test_rank_two_binary(self):
        qrels = Qrels({("q", "rel"): 1, ("q", "non"): 0})
        run = _run("q", ["non", "rel"])
        assert eval_harness.ndcg_at(run, qrels).mean == pytest.approx(1 / math.log2(3), abs=1e-9)
        assert eval_harness.mrr_at(run, qrels).mean == pytest.approx(0.5, abs=1e-9)

    def test_unjudged_retrieved_docs_gain_nothing(self):
        qrels = Qrels({("q", "rel"): 2})
        run = _run("q", ["x", "y", "rel"])
        expected = (3 / math.log2(4)) / 3
        assert eval_harness.ndcg_at(run, qrels).mean == pytest.approx(expected)

    def test_ties_ranked_by_doc_id(self):
        run = RunFile((RunRow("q", "b", 1, 1.0, "t"), RunRow("q", "a", 2, 1.0, "t")))
        qrels = Qrels({("q", "a"): 1})
        assert eval_harness.mrr_at(run, qrels).mean == 1.0

    def test_queries_without_relevance_are_excluded(self):
        qrels = Qrels({("q1", "a"): 1, ("q2", "b"): 0})
        run = RunFile(_run("q1", ["a"]).rows + _run("q2", ["b"]).rows + _run("q3", ["c"]).rows)
        report = eval_harness.ndcg_at(run, qrels)
        assert report.n_queries == 1
        assert report.excluded == ["q2", "q3"]
        assert report.metric == "ndcg@10"

    def test_parse_metric(self):
        assert eval_harness.parse_metric("NDCG@5") == ("ndcg", 5)
        assert eval_harness.parse_metric("mrr") == ("mrr", 10)
        with pytest.raises(ConfigError):
            eval_harness.parse_metric("map@10")
        with pytest.raises(ConfigError):
            eval_harness.parse_metric("ndcg@0")

    def test_evaluate_run_keys(self):
        qrels = Qrels({("q", "a"): 1})
        reports = eval_harness.evaluate_run(_run("q", ["a"]), qrels, ["ndcg@10", "mrr@3"])
        assert sorted(reports) == ["mrr@3", "ndcg@10"]
        assert reports["mrr@3"].mean == 1.0

    @pytest.mark.parametrize("transform", [lambda s: 3.0 * s + 7.0, math.exp, lambda s: s ** 3])
    def test_monotone_score_transform_leaves_metrics_unchanged(self, transform):
        rng = np.random.default_rng(4)
        docs = [f"d{i}" for i in range(15)]
        scores = sorted((float(s) for s in rng.uniform(-3.0, 3.0, size=15)), reverse=True)
        qrels = Qrels({("q", "d1"): 1, ("q", "d4"): 2, ("q", "d9"): 1, ("q", "d12"): 0})

        def run_with(f):
            return RunFile(tuple(RunRow("q", d, i + 1, f(s), "t") for i, (d, s) in enumerate(zip(docs, scores))))

        base, moved = run_with(lambda s: s), run_with(transform)
        for name in ("ndcg@10", "mrr@10", "ndcg@5"):
            assert eval_harness.metric_value(moved, qrels, name) == pytest.approx(
                eval_harness.metric_value(base, qrels, name), abs=1e-12
            )


class TestSweep:

    def test_points_and_csv(self, small_model, synthetic, index, tmp_path):
        path = tmp_path / "tradeoff.csv"
        points = eval_harness.sweep(
            small_model, index, synthetic.corpus, synthetic.queries, synthetic.qrels, [1, 5, 20], "ndcg@10", path,
        )
        assert [p.k for p in points] == [1, 5, 20]
        assert all(0.0 <= p.metric_value <= 1.0 and p.mean_latency_ms > 0.0 for p in points)
        assert path.read_text().splitlines()[0] == "k,mean_latency_ms,metric"
        reloaded = eval_harness.read_tradeoff_csv(path)
        assert [p.k for p in reloaded] == [1, 5, 20]
        assert reloaded[1].metric_value == pytest.approx(points[1].metric_value, abs=1e-6)

    def test_point_matches_standalone_run(self, small_model, synthetic, index):
        points = eval_harness.sweep(small_model, index, synthetic.corpus, synthetic.queries, synthetic.qrels, [5])
        run, _ = BudgetReranker(small_model, index, synthetic.corpus).run(
            synthetic.queries, plan_fixed_depth(5), n_retrieve=10, record_latency=False
        )
        assert points[0].metric_value == pytest.approx(eval_harness.ndcg_at(run, synthetic.qrels, 10).mean, abs=1e-12)

    @pytest.mark.parametrize("grid", [[], [5, 1], [0, 1], [1, 1001]])
    def test_bad_grid(self, small_model, synthetic, index, grid):
        with pytest.raises(ConfigError):
            eval_harness.sweep(small_model, index, synthetic.corpus, synthetic.queries, synthetic.qrels, grid)

    def test_best_within_budget(self):
        points = [
            TradeoffPoint(k=1, mean_latency_ms=2.0, metric_value=0.4, metric_name="ndcg@10"),
            TradeoffPoint(k=10, mean_latency_ms=8.0, metric_value=0.6, metric_name="ndcg@10"),
            TradeoffPoint(k=100, mean_latency_ms=80.0, metric_value=0.7, metric_name="ndcg@10"),
        ]
        assert eval_harness.best_within_budget(points, 50.0).k == 10
        assert eval_harness.best_within_budget(points, 1.0) is None


class TestPlot:

    def test_low_latency_zone_geometry(self):
        fig = svg_plot.tradeoff_figure({"tiny": [(1.0, 0.3), (10.0, 0.5), (100.0, 0.6)]}, 50.0, "ndcg@10")
        try:
            ax = fig.axes[0]
            assert ax.get_xscale() == "log"
            assert ax.get_xlim() == pytest.approx((1.0, 100.0))
            zones = [p for p in ax.patches if p.get_gid() == svg_plot.ZONE_ID]
            assert len(zones) == 1
            xs = zones[0].get_patch_transform().transform(zones[0].get_path().vertices)[:, 0]
            assert min(xs) == pytest.approx(1.0)
            assert max(xs) == pytest.approx(50.0)
        finally:
            plt.close(fig)

    def test_decade_padding(self):
        assert svg_plot.latency_limits([3.0, 30.0]) == pytest.approx((1.0, 100.0))
        assert svg_plot.latency_limits([10.0]) == pytest.approx((10.0, 100.0))

    def test_svg_is_written_and_repeatable(self, tmp_path):
        points = [
            TradeoffPoint(k=k, mean_latency_ms=ms, metric_value=v, metric_name="ndcg@10")
            for k, ms, v in [(1, 1.0, 0.3), (10, 10.0, 0.5), (100, 100.0, 0.6)]
        ]
        svg = eval_harness.plot_tradeoff({"tiny": points}, tmp_path / "tradeoff.svg", 50.0)
        assert (tmp_path / "tradeoff.svg").read_text(encoding="utf-8") == svg
        assert svg.lstrip().startswith("<?xml")
        assert 'id="low-latency-zone"' in svg
        assert "50 ms" in svg
        assert eval_harness.plot_tradeoff({"tiny": points}, tmp_path / "again.svg", 50.0) == svg

    def test_one_line_per_series(self, tmp_path):
        a = [TradeoffPoint(k=1, mean_latency_ms=3.0, metric_value=0.2, metric_name="ndcg@10")]
        b = [TradeoffPoint(k=1, mean_latency_ms=30.0, metric_value=0.5, metric_name="ndcg@10")]
        svg = eval_harness.plot_tradeoff({"tiny": a, "small & co": b}, tmp_path / "plot.svg")
        assert 'id="series-0"' in svg and 'id="series-1"' in svg
        assert 'id="series-2"' not in svg
        assert "small &amp; co" in svg

    def test_empty_series(self, tmp_path):
        with pytest.raises(ValueError):
            eval_harness.plot_tradeoff({"tiny": []}, tmp_path / "plot.svg")


def test_confidence_probe(small_model, synthetic, index, tmp_path):
    path = tmp_path / "confidence.csv"
    rows = eval_harness.probe_confidence(small_model, index, synthetic.corpus, synthetic.queries, 10, path)
    assert [row.rank for row in rows] == list(range(1, 11))
    means = [row.mean_p for row in rows]
    assert all(a >= b - 1e-12 for a, b in zip(means, means[1:]))
    assert all(row.min_p <= row.mean_p <= row.max_p for row in rows)
    assert path.read_text().splitlines()[0] == "rank,mean_p,min_p,max_p"
    with pytest.raises(ConfigError):
        eval_harness.probe_confidence(small_model, index, synthetic.corpus, synthetic.queries, 0)
