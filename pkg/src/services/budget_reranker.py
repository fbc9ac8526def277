"""
Budget Reranker - latency calibration and budget-capped reranking.

    k_max = floor((omega - first_stage_ms) / (lambda_ms + tokenize_ms_per_pair))

The cap on model-scored pairs is hard; wall-clock against omega is advisory.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

from config import settings
from src.models.collections import Candidates, Corpus, Query, RankedList, RunFile, RunRow
from src.models.schemas import BudgetPlan, LatencyProfile, LatencyRecord
from src.services.bm25_index import InvertedIndex, retrieve
from src.services.cross_encoder import CrossEncoderModel, compute_logits
from src.utils.errors import BudgetError
from src.utils.timing import median_ms, timed, timer_resolution_ms

logger = logging.getLogger(__name__)

MIN_CALIBRATION_QUERIES = 10
MIN_CALIBRATION_SAMPLES = 30
MIN_WARMUP_RUNS = 5
COARSE_TIMER_MS = 0.1


def save_profile(profile: LatencyProfile, path: Union[str, Path]) -> None:
    Path(path).write_text(profile.model_dump_json(indent=2) + "\n", encoding="utf-8")


def load_profile(path: Union[str, Path]) -> LatencyProfile:
    return LatencyProfile.model_validate_json(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------

def plan_budget(profile: LatencyProfile, omega_ms: float) -> BudgetPlan:
    if not omega_ms > 0.0:
        raise BudgetError(f"omega_ms must be > 0, got {omega_ms}")
    per_pair = profile.lambda_ms + profile.tokenize_ms_per_pair
    k_max = max(0, math.floor((omega_ms - profile.first_stage_ms) / per_pair))
    plan = BudgetPlan(omega_ms=omega_ms, k_max=k_max, fallback="passthrough" if k_max == 0 else None)
    if plan.fallback:
        logger.warning(f"⚠️ Budget {omega_ms} ms leaves no room for a single pair; serving BM25 order")
    return plan


def plan_fixed_depth(k: int) -> BudgetPlan:
    """Depth chosen by the caller (sweeps, fixed-depth evaluation)"""
    if k < 0:
        raise BudgetError(f"depth must be >= 0, got {k}")
    return BudgetPlan(omega_ms=math.inf, k_max=k, fallback="passthrough" if k == 0 else None, forced=True)


# ---------------------------------------------------------------------------
# reranking
# ---------------------------------------------------------------------------

@dataclass
class RerankOutcome:
    ranked: RankedList
    n_scored: int
    tokenize_ms: float = 0.0
    score_ms: float = 0.0
    record: Optional[LatencyRecord] = None
    p_plus: Tuple[float, ...] = ()  # reranked head, in final order


def rerank_candidates(
    model: CrossEncoderModel,
    corpus: Corpus,
    query: Query,
    candidates: Candidates,
    k: int,
) -> RerankOutcome:
    """
    Score the top-k candidates and put them, by descending margin (ties by
    ascending doc_id), above the untouched BM25 tail.

    The head entry at position i gets score best_bm25 + 1 + (k - i): whole
    steps, so the model's order survives run-file rounding and re-sorting.
    The tail keeps its BM25 scores; p_plus is reported on the outcome.
    """
    k = max(0, min(k, len(candidates)))
    if k == 0:
        return RerankOutcome(RankedList(query.query_id, candidates.entries), 0)

    head = candidates.entries[:k]
    timer = timed()
    encoded = model.encode(query.text, [corpus.text(doc_id) for doc_id, _ in head])
    tokenize_ms = timer()

    timer = timed()
    scores = model.score_encoded(encoded)
    score_ms = timer()

    margin = scores.margin
    p_plus = scores.p_plus
    order = sorted(range(k), key=lambda i: (-margin[i], head[i][0]))
    offset = 1.0 + candidates.entries[0][1]
    entries = [(head[i][0], offset + float(k - position)) for position, i in enumerate(order)]
    entries.extend(candidates.entries[k:])
    return RerankOutcome(
        RankedList(query.query_id, tuple(entries)),
        k,
        tokenize_ms,
        score_ms,
        p_plus=tuple(float(p_plus[i]) for i in order),
    )


class BudgetReranker:
    """One cross-encoder serving one index and corpus: calibration plus budgeted runs"""

    def __init__(self, model: CrossEncoderModel, index: InvertedIndex, corpus: Corpus):
        self.model = model
        self.index = index
        self.corpus = corpus

    def calibrate(
        self,
        queries: Iterable[Query],
        batch_size: Optional[int] = None,
        n_samples: int = settings.CALIBRATION_SAMPLES,
        warmup: int = settings.CALIBRATION_WARMUP,
        n_retrieve: int = settings.N_RETRIEVE,
    ) -> LatencyProfile:
        """
        Time first-stage retrieval, tokenization and model scoring on sample queries.

        Each run retrieves for one query, then tokenizes and scores one batch of
        batch_size pairs from its candidates (topped up with corpus passages when
        the query has fewer). The first `warmup` runs are discarded; the profile
        holds medians of the rest, per pair for tokenization and scoring.
        """
        sample = list(queries)
        if len(sample) < MIN_CALIBRATION_QUERIES:
            raise BudgetError(f"calibration needs >= {MIN_CALIBRATION_QUERIES} sample queries, got {len(sample)}")
        if n_samples < MIN_CALIBRATION_SAMPLES or warmup < MIN_WARMUP_RUNS:
            raise BudgetError(
                f"calibration needs >= {MIN_CALIBRATION_SAMPLES} timed samples after >= {MIN_WARMUP_RUNS} "
                f"warm-up runs, got n_samples={n_samples}, warmup={warmup}"
            )
        batch_size = batch_size or self.model.batch_size
        if batch_size < 1:
            raise BudgetError(f"batch_size must be >= 1, got {batch_size}")

        warnings: List[str] = []
        resolution = timer_resolution_ms()
        if resolution > COARSE_TIMER_MS:
            message = f"timer resolution {resolution:.4f} ms is coarser than {COARSE_TIMER_MS} ms"
            logger.warning(f"⚠️ {message}")
            warnings.append(message)

        filler = [doc.text for doc in self.corpus.documents[:batch_size]]
        first_stage, tokenize, score = [], [], []
        for run in range(warmup + n_samples):
            query = sample[run % len(sample)]

            timer = timed()
            candidates = retrieve(self.index, query.text, n_retrieve, query_id=query.query_id)
            first_stage_ms = timer()

            docs = [self.corpus.text(doc_id) for doc_id in candidates.doc_ids()[:batch_size]]
            while len(docs) < batch_size:
                docs.append(filler[len(docs) % len(filler)])

            timer = timed()
            encoded = self.model.encode(query.text, docs)
            tokenize_ms = timer()

            timer = timed()
            compute_logits(self.model._tensors, self.model.config, encoded.trimmed())
            score_ms = timer()

            if run >= warmup:
                first_stage.append(first_stage_ms)
                tokenize.append(tokenize_ms / batch_size)
                score.append(score_ms / batch_size)

        lambda_ms = median_ms(score)
        if lambda_ms <= 0.0:
            lambda_ms = max(resolution / batch_size, 1e-6)
            message = f"per-pair model time below timer resolution; lambda_ms floored to {lambda_ms:.6f}"
            logger.warning(f"⚠️ {message}")
            warnings.append(message)

        profile = LatencyProfile(
            lambda_ms=lambda_ms,
            first_stage_ms=median_ms(first_stage),
            tokenize_ms_per_pair=median_ms(tokenize),
            n_samples=n_samples,
            warmup_runs=warmup,
            batch_size=batch_size,
            timer_resolution_ms=resolution,
            model_name=self.model.name,
            warnings=warnings,
        )
        logger.info(
            f"📊 Calibrated: lambda={profile.lambda_ms:.4f} ms/pair, first stage={profile.first_stage_ms:.3f} ms, "
            f"tokenize={profile.tokenize_ms_per_pair:.4f} ms/pair (batch {batch_size}, {n_samples} samples)"
        )
        return profile

    def rerank(self, query: Query, plan: BudgetPlan, n_retrieve: int = settings.N_RETRIEVE) -> RerankOutcome:
        if n_retrieve < 1:
            raise BudgetError(f"n_retrieve must be >= 1, got {n_retrieve}")
        total = timed()
        timer = timed()
        candidates = retrieve(self.index, query.text, n_retrieve, query_id=query.query_id)
        first_stage_ms = timer()
        outcome = rerank_candidates(self.model, self.corpus, query, candidates, min(plan.k_max, n_retrieve))
        outcome.record = LatencyRecord(
            query_id=query.query_id,
            first_stage_ms=first_stage_ms,
            tokenize_ms=outcome.tokenize_ms,
            score_ms=outcome.score_ms,
            total_ms=total(),
            k_used=outcome.n_scored,
        )
        return outcome

    def run(
        self,
        queries: Iterable[Query],
        plan: BudgetPlan,
        n_retrieve: int = settings.N_RETRIEVE,
        record_latency: bool = True,
        threads: int = 1,
        tag: str = settings.RUN_TAG,
    ) -> Tuple[RunFile, List[LatencyRecord]]:
        """
        Rerank every query into one RunFile. Timed runs are sequential; with
        record_latency off, distinct queries may run on `threads` workers.
        """
        queries = list(queries)

        def one(query: Query) -> RerankOutcome:
            return self.rerank(query, plan, n_retrieve)

        if threads > 1 and not record_latency:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outcomes = list(pool.map(one, queries))
        else:
            outcomes = [one(query) for query in queries]

        rows: List[RunRow] = []
        for outcome in outcomes:
            if outcome.n_scored > plan.k_max:
                raise BudgetError(
                    f"query {outcome.ranked.query_id} scored {outcome.n_scored} pairs > k_max {plan.k_max}"
                )
            rows.extend(outcome.ranked.to_rows(tag))
        records = [o.record for o in outcomes] if record_latency else []
        if record_latency and records:
            mean_total = sum(r.total_ms for r in records) / len(records)
            over = sum(1 for r in records if r.total_ms > 1.2 * plan.omega_ms)
            logger.info(f"Reranked {len(records)} queries (k_max={plan.k_max}), mean {mean_total:.2f} ms/query")
            if over and math.isfinite(plan.omega_ms):
                logger.warning(f"⚠️ {over}/{len(records)} queries exceeded 1.2 x omega ({plan.omega_ms} ms)")
        return RunFile(tuple(rows)), records


LATENCY_CSV_HEADER = ["qid", "first_stage_ms", "tokenize_ms", "score_ms", "total_ms", "k_used"]


def write_latency_records(records: Sequence[LatencyRecord], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LATENCY_CSV_HEADER)
        for r in records:
            writer.writerow([
                r.query_id,
                f"{r.first_stage_ms:.6f}",
                f"{r.tokenize_ms:.6f}",
                f"{r.score_ms:.6f}",
                f"{r.total_ms:.6f}",
                r.k_used,
            ])
