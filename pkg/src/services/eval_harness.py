"""
Eval Harness - NDCG@k / MRR@k over TREC runs, the rerank-depth sweep behind
the latency/effectiveness curve, and the rank-wise confidence probe.
"""

import csv
import logging
import math
import re
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import settings
from src.models.collections import Corpus, Qrels, Query, RunFile, RunRow
from src.models.schemas import ConfidenceRow, MetricReport, TradeoffPoint
from src.services.bm25_index import InvertedIndex, retrieve
from src.services.budget_reranker import BudgetReranker, plan_fixed_depth, rerank_candidates
from src.services.cross_encoder import CrossEncoderModel
from src.utils.errors import ConfigError
from src.utils.svg_plot import render_tradeoff_svg

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def gain(grade: int) -> float:
    """Exponential gain 2^rel - 1 (equals linear gain for binary grades)"""
    return float(2 ** grade - 1)


def dcg(grades: Sequence[int], cutoff: int) -> float:
    return sum(gain(g) / math.log2(i + 2) for i, g in enumerate(grades[:cutoff]))


def _ranked_doc_ids(rows: Sequence[RunRow]) -> List[str]:
    """Rank-only view: descending score, ties by ascending doc_id"""
    return [row.doc_id for row in sorted(rows, key=lambda r: (-r.score, r.doc_id))]


def _check_cutoff(cutoff: int) -> None:
    if cutoff < 1:
        raise ConfigError(f"cutoff must be >= 1, got {cutoff}")


def _per_query(
    run: RunFile,
    qrels: Qrels,
    cutoff: int,
    metric: str,
    score_fn: Callable[[List[str], Dict[str, int]], float],
) -> MetricReport:
    _check_cutoff(cutoff)
    per_query: Dict[str, float] = {}
    excluded: List[str] = []
    unknown: List[str] = []
    for query_id, rows in run.by_query().items():
        if not qrels.has_query(query_id):
            unknown.append(query_id)
            continue
        judged = qrels.for_query(query_id)
        if not any(grade >= 1 for grade in judged.values()):
            excluded.append(query_id)
            continue
        per_query[query_id] = score_fn(_ranked_doc_ids(rows), judged)
    if unknown:
        logger.warning(f"⚠️ {len(unknown)} run quer(ies) have no judgments and were excluded: {unknown[:5]}")
    if excluded:
        logger.info(f"{len(excluded)} quer(ies) without relevant documents excluded from {metric}")
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return MetricReport(
        metric=f"{metric}@{cutoff}",
        cutoff=cutoff,
        mean=mean,
        n_queries=len(per_query),
        per_query=per_query,
        excluded=sorted(excluded + unknown),
    )


def ndcg_at(run: RunFile, qrels: Qrels, cutoff: int = settings.METRIC_CUTOFF) -> MetricReport:
    def score(ranked: List[str], judged: Dict[str, int]) -> float:
        ideal = dcg(sorted(judged.values(), reverse=True), cutoff)
        return dcg([judged.get(doc_id, 0) for doc_id in ranked], cutoff) / ideal

    return _per_query(run, qrels, cutoff, "ndcg", score)


def mrr_at(run: RunFile, qrels: Qrels, cutoff: int = settings.METRIC_CUTOFF) -> MetricReport:
    def score(ranked: List[str], judged: Dict[str, int]) -> float:
        for rank, doc_id in enumerate(ranked[:cutoff], start=1):
            if judged.get(doc_id, 0) >= 1:
                return 1.0 / rank
        return 0.0

    return _per_query(run, qrels, cutoff, "mrr", score)


METRICS = {"ndcg": ndcg_at, "mrr": mrr_at}


def parse_metric(name: str) -> Tuple[str, int]:
    """'ndcg@10' -> ('ndcg', 10); a bare name uses the default cutoff"""
    match = re.fullmatch(r"(ndcg|mrr)(?:@(\d+))?", name.strip().lower())
    if not match:
        raise ConfigError(f"unknown metric {name!r} (expected ndcg[@k] or mrr[@k])")
    cutoff = int(match.group(2)) if match.group(2) else settings.METRIC_CUTOFF
    _check_cutoff(cutoff)
    return match.group(1), cutoff


def evaluate_run(run: RunFile, qrels: Qrels, metrics: Iterable[str] = ("ndcg@10", "mrr@10")) -> Dict[str, MetricReport]:
    reports = {}
    for name in metrics:
        kind, cutoff = parse_metric(name)
        report = METRICS[kind](run, qrels, cutoff)
        reports[report.metric] = report
    return reports


def metric_value(run: RunFile, qrels: Qrels, metric: str) -> float:
    kind, cutoff = parse_metric(metric)
    return METRICS[kind](run, qrels, cutoff).mean


# ---------------------------------------------------------------------------
# tradeoff sweep
# ---------------------------------------------------------------------------

def sweep(
    model: CrossEncoderModel,
    index: InvertedIndex,
    corpus: Corpus,
    queries: Iterable[Query],
    qrels: Qrels,
    k_grid: Sequence[int] = tuple(settings.SWEEP_GRID),
    metric: str = "ndcg@10",
    csv_path: Optional[PathLike] = None,
) -> List[TradeoffPoint]:
    """
    One timed, single-threaded run per depth K. Latency is the mean per-query
    wall clock including BM25 retrieval and tokenization. Each point retrieves
    max(K, metric cutoff) candidates so shallow depths are still judged on a
    full top-10.
    """
    if not k_grid or list(k_grid) != sorted(k_grid) or k_grid[0] < 1 or k_grid[-1] > 1000:
        raise ConfigError(f"k_grid must be ascending within [1, 1000], got {list(k_grid)}")
    _, cutoff = parse_metric(metric)
    queries = list(queries)
    reranker = BudgetReranker(model, index, corpus)
    points = []
    for k in k_grid:
        run, records = reranker.run(queries, plan_fixed_depth(k), n_retrieve=max(k, cutoff), record_latency=True)
        mean_latency = float(np.mean([r.total_ms for r in records])) if records else 0.0
        value = metric_value(run, qrels, metric)
        points.append(TradeoffPoint(k=k, mean_latency_ms=mean_latency, metric_value=value, metric_name=metric))
        logger.info(f"📊 K={k}: {metric}={value:.4f}, {mean_latency:.2f} ms/query")
    if csv_path is not None:
        write_tradeoff_csv(points, csv_path)
    return points


def write_tradeoff_csv(points: Sequence[TradeoffPoint], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["k", "mean_latency_ms", "metric"])
        for p in points:
            writer.writerow([p.k, f"{p.mean_latency_ms:.6f}", f"{p.metric_value:.6f}"])


def read_tradeoff_csv(path: PathLike, metric_name: str = "ndcg@10") -> List[TradeoffPoint]:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        return [
            TradeoffPoint(
                k=int(row["k"]),
                mean_latency_ms=float(row["mean_latency_ms"]),
                metric_value=float(row["metric"]),
                metric_name=metric_name,
            )
            for row in csv.DictReader(handle)
        ]


def best_within_budget(points: Sequence[TradeoffPoint], omega_ms: float) -> Optional[TradeoffPoint]:
    """Highest-metric point whose mean latency fits in omega (smallest K on ties)"""
    eligible = [p for p in points if p.mean_latency_ms <= omega_ms]
    if not eligible:
        return None
    return max(eligible, key=lambda p: (p.metric_value, -p.k))


def plot_tradeoff(
    series: Dict[str, Sequence[TradeoffPoint]],
    path: PathLike,
    low_latency_cutoff_ms: float = settings.LOW_LATENCY_CUTOFF_MS,
) -> str:
    svg = render_tradeoff_svg(
        {name: [(p.mean_latency_ms, p.metric_value) for p in points] for name, points in series.items()},
        low_latency_cutoff_ms=low_latency_cutoff_ms,
        y_label=next((pts[0].metric_name for pts in series.values() if pts), "metric"),
    )
    Path(path).write_text(svg, encoding="utf-8")
    return svg


# ---------------------------------------------------------------------------
# confidence probe
# ---------------------------------------------------------------------------

def probe_confidence(
    model: CrossEncoderModel,
    index: InvertedIndex,
    corpus: Corpus,
    queries: Iterable[Query],
    depth: int,
    csv_path: Optional[PathLike] = None,
) -> List[ConfidenceRow]:
    """
    Rerank the top-depth candidates of each query and summarize p_plus by
    final rank. Queries with fewer than depth candidates are skipped so every
    rank averages over the same queries.
    """
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    by_rank: List[List[float]] = [[] for _ in range(depth)]
    skipped = 0
    for query in queries:
        candidates = retrieve(index, query.text, depth, query_id=query.query_id)
        if len(candidates) < depth:
            skipped += 1
            continue
        outcome = rerank_candidates(model, corpus, query, candidates, depth)
        for rank, p in enumerate(outcome.p_plus):
            by_rank[rank].append(p)
    if skipped:
        logger.info(f"{skipped} quer(ies) with fewer than {depth} candidates skipped by the probe")

    rows = []
    for rank, values in enumerate(by_rank, start=1):
        if not values:
            continue
        rows.append(ConfidenceRow(rank=rank, mean_p=float(np.mean(values)), min_p=float(min(values)), max_p=float(max(values))))
    if csv_path is not None:
        write_confidence_csv(rows, csv_path)
    return rows


def write_confidence_csv(rows: Sequence[ConfidenceRow], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["rank", "mean_p", "min_p", "max_p"])
        for row in rows:
            writer.writerow([row.rank, f"{row.mean_p:.6f}", f"{row.min_p:.6f}", f"{row.max_p:.6f}"])
