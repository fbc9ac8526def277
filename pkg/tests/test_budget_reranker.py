import math

import numpy as np
import pytest

from src.models.collections import Candidates, Qrels, Query, RunFile
from src.models.schemas import LatencyProfile, ModelConfig
from src.services import budget_reranker, eval_harness
from src.services.bm25_index import retrieve
from src.services.budget_reranker import BudgetReranker
from src.services.cross_encoder import CrossEncoderModel, ScoreBatch, init_params
from src.utils.errors import BudgetError


def _profile(lambda_ms=0.5, first_stage_ms=2.0, tokenize_ms_per_pair=0.1):
    return LatencyProfile(lambda_ms=lambda_ms, first_stage_ms=first_stage_ms, tokenize_ms_per_pair=tokenize_ms_per_pair)


class TestPlanning:

    def test_k_max_arithmetic(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            profile = _profile(
                lambda_ms=float(rng.uniform(0.01, 5.0)),
                first_stage_ms=float(rng.uniform(0.0, 20.0)),
                tokenize_ms_per_pair=float(rng.uniform(0.0, 1.0)),
            )
            omega = float(rng.uniform(0.5, 200.0))
            per_pair = profile.lambda_ms + profile.tokenize_ms_per_pair
            expected = max(0, math.floor((omega - profile.first_stage_ms) / per_pair))
            assert budget_reranker.plan_budget(profile, omega).k_max == expected

    def test_worked_example(self):
        plan = budget_reranker.plan_budget(_profile(), 50.0)
        assert plan.k_max == 80
        assert plan.fallback is None

    def test_budget_below_first_stage_is_passthrough(self):
        plan = budget_reranker.plan_budget(_profile(first_stage_ms=10.0), 5.0)
        assert plan.k_max == 0
        assert plan.fallback == "passthrough"

    @pytest.mark.parametrize("omega", [0.0, -1.0, float("nan")])
    def test_non_positive_budget(self, omega):
        with pytest.raises(BudgetError):
            budget_reranker.plan_budget(_profile(), omega)

    def test_fixed_depth(self):
        plan = budget_reranker.plan_fixed_depth(25)
        assert plan.k_max == 25 and plan.forced and math.isinf(plan.omega_ms)
        with pytest.raises(BudgetError):
            budget_reranker.plan_fixed_depth(-1)


class TestRerank:

    def test_head_sorted_by_model_tail_untouched(self, small_model, synthetic, index):
        query = synthetic.queries.queries[0]
        candidates = retrieve(index, query.text, 30, query_id=query.query_id)
        outcome = budget_reranker.rerank_candidates(small_model, synthetic.corpus, query, candidates, 10)
        assert outcome.n_scored == 10
        assert list(outcome.p_plus) == sorted(outcome.p_plus, reverse=True)
        assert set(outcome.ranked.doc_ids()[:10]) == set(candidates.doc_ids()[:10])
        assert outcome.ranked.entries[10:] == candidates.entries[10:]
        scores = [score for _, score in outcome.ranked.entries]
        assert all(a > b for a, b in zip(scores[:10], scores[1:11]))
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_saturated_margins_keep_model_order(self, small_model, synthetic, monkeypatch):
        monkeypatch.setattr(
            small_model, "score_encoded", lambda batch: ScoreBatch(np.array([14.0, 15.0, 40.0]), np.zeros(3)),
        )
        candidates = Candidates("q", (("D000000", 3.0), ("D000001", 2.0), ("D000002", 1.0)))
        outcome = budget_reranker.rerank_candidates(small_model, synthetic.corpus, Query("q", "t1"), candidates, 3)
        rows = outcome.ranked.to_rows("saturated")
        assert [row.doc_id for row in rows] == ["D000002", "D000001", "D000000"]
        assert rows[0].score > rows[1].score > rows[2].score
        assert all(0.0 < p < 1.0 for p in outcome.p_plus)

        run = RunFile(tuple(rows))
        qrels = Qrels({("q", "D000002"): 1})
        assert eval_harness.ndcg_at(run, qrels).mean == pytest.approx(1.0)
        assert eval_harness.mrr_at(run, qrels).mean == pytest.approx(1.0)

    def test_zero_depth_keeps_bm25_order(self, small_model, synthetic, index):
        query = synthetic.queries.queries[1]
        candidates = retrieve(index, query.text, 20, query_id=query.query_id)
        outcome = budget_reranker.rerank_candidates(small_model, synthetic.corpus, query, candidates, 0)
        assert outcome.n_scored == 0
        assert outcome.ranked.entries == candidates.entries

    def test_depth_beyond_candidates(self, small_model, synthetic, index):
        query = synthetic.queries.queries[2]
        candidates = retrieve(index, query.text, 5, query_id=query.query_id)
        outcome = budget_reranker.rerank_candidates(small_model, synthetic.corpus, query, candidates, 50)
        assert outcome.n_scored == len(candidates)

    def test_scored_pairs_never_exceed_k_max(self, small_model, synthetic, index):
        reranker = BudgetReranker(small_model, index, synthetic.corpus)
        for omega in (0.5, 5.0, 20.0, 1000.0):
            plan = budget_reranker.plan_budget(_profile(), omega)
            run, records = reranker.run(synthetic.queries, plan, n_retrieve=50)
            assert len(records) == len(synthetic.queries)
            assert all(r.k_used <= plan.k_max for r in records)
            assert set(run.query_ids()) <= {q.query_id for q in synthetic.queries}

    def test_threaded_untimed_run_matches_sequential(self, small_model, synthetic, index):
        reranker = BudgetReranker(small_model, index, synthetic.corpus)
        plan = budget_reranker.plan_fixed_depth(10)
        sequential, _ = reranker.run(synthetic.queries, plan, n_retrieve=30, record_latency=False)
        threaded, records = reranker.run(synthetic.queries, plan, n_retrieve=30, record_latency=False, threads=4)
        assert records == []
        assert threaded == sequential

    def test_n_retrieve_must_be_positive(self, small_model, synthetic, index):
        reranker = BudgetReranker(small_model, index, synthetic.corpus)
        with pytest.raises(BudgetError):
            reranker.rerank(synthetic.queries.queries[0], budget_reranker.plan_fixed_depth(5), n_retrieve=0)


class TestCalibration:

    def test_needs_ten_queries(self, small_model, synthetic, index):
        few = list(synthetic.queries)[:9]
        with pytest.raises(BudgetError, match="10"):
            BudgetReranker(small_model, index, synthetic.corpus).calibrate(few)

    @pytest.mark.parametrize("n_samples,warmup", [(29, 5), (30, 4), (3, 1)])
    def test_rejects_short_schedules(self, small_model, synthetic, index, n_samples, warmup):
        reranker = BudgetReranker(small_model, index, synthetic.corpus)
        with pytest.raises(BudgetError, match="warm-up"):
            reranker.calibrate(synthetic.queries, n_samples=n_samples, warmup=warmup)

    def test_profile_round_trip(self, small_model, synthetic, index, tmp_path):
        profile = BudgetReranker(small_model, index, synthetic.corpus).calibrate(
            synthetic.queries, batch_size=4, n_retrieve=50,
        )
        assert profile.lambda_ms > 0.0
        assert profile.batch_size == 4 and profile.n_samples == 30 and profile.warmup_runs == 5
        assert profile.model_name == "small"
        path = tmp_path / "profile.json"
        budget_reranker.save_profile(profile, path)
        assert budget_reranker.load_profile(path) == profile

    def test_repeated_calibration_agrees(self, vocab, synthetic, index):
        config = ModelConfig.preset("tiny", vocab_size=vocab.vocab_size, max_len=64)
        model = CrossEncoderModel(init_params(config, seed=0), vocab, batch_size=8, name="tiny")
        reranker = BudgetReranker(model, index, synthetic.corpus)
        first = reranker.calibrate(synthetic.queries, n_retrieve=50).lambda_ms
        second = reranker.calibrate(synthetic.queries, n_retrieve=50).lambda_ms
        assert abs(first - second) <= 0.5 * max(first, second)

    def test_deeper_wider_preset_costs_more_per_pair(self, vocab, synthetic, index):
        costs = {}
        for preset in ("tiny", "small"):
            config = ModelConfig.preset(preset, vocab_size=vocab.vocab_size, max_len=64)
            model = CrossEncoderModel(init_params(config, seed=0), vocab, batch_size=8, name=preset)
            costs[preset] = BudgetReranker(model, index, synthetic.corpus).calibrate(
                synthetic.queries, n_retrieve=50,
            ).lambda_ms
        assert costs["tiny"] < costs["small"]


def test_latency_csv(tmp_path, small_model, synthetic, index):
    _, records = BudgetReranker(small_model, index, synthetic.corpus).run(
        list(synthetic.queries)[:3], budget_reranker.plan_fixed_depth(3), n_retrieve=10,
    )
    path = tmp_path / "latency.csv"
    budget_reranker.write_latency_records(records, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "qid,first_stage_ms,tokenize_ms,score_ms,total_ms,k_used"
    assert len(lines) == 4
    assert lines[1].split(",")[-1] == "3"
