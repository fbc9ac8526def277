"""
gBCE Trainer - negative sampling from BM25 candidates with the calibrated
binary cross-entropy loss.

Each batch holds B queries, each with one positive and k negatives sampled
from its BM25 top-pool, so B * (k + 1) pairs. With alpha = k / pool_size the
positive term is scaled by

    beta(t) = alpha * (t * (1 - 1/alpha) + 1/alpha)

giving loss = -[y * beta * log(p) + (1 - y) * log(1 - p)]. t = 0 (beta = 1)
is plain BCE.
"""

import csv
import json
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import settings
from src.models.collections import Candidates, Corpus, Qrels, Query, QuerySet, RunFile, RunRow
from src.models.schemas import AblationCell, ModelConfig, SamplingRate, TrainConfig, TrainLogEntry
from src.services.bm25_index import InvertedIndex, retrieve
from src.services.budget_reranker import rerank_candidates
from src.services.corpus_io import split_queries
from src.services.cross_encoder import CrossEncoderModel, ModelParams, compute_logits, init_params
from src.services.eval_harness import metric_value, parse_metric
from src.services.tokenizer import EncodedBatch, Vocab, encode_batch
from src.utils import tensor as T
from src.utils.errors import ConfigError, CorpusError, TrainingDivergedError
from src.utils.optim import AdamWState, adamw_step
from src.utils.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

MAX_VALIDATION_FRACTION = 0.25


# ---------------------------------------------------------------------------
# calibration and losses
# ---------------------------------------------------------------------------

def beta_of_t(alpha: float, t: float) -> float:
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must be in (0, 1], got {alpha}")
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"t must be in [0, 1], got {t}")
    # alpha * (t * (1 - 1/alpha) + 1/alpha), rearranged so beta(0) is exactly 1
    return 1.0 - t * (1.0 - alpha)


def sampling_rate(config: TrainConfig) -> SamplingRate:
    """alpha = k / pool_size, counted before judged positives are removed from the pool"""
    alpha = config.negatives_per_positive / config.candidate_pool_size
    beta = 1.0 if config.loss_kind == "bce" else beta_of_t(alpha, config.calibration_t)
    return SamplingRate(alpha=alpha, beta=beta)


def loss(p_plus: float, y: int, beta: float) -> float:
    """Per-pair gBCE; beta = 1 is BCE"""
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y}")
    if y == 1:
        return -beta * math.log(p_plus)
    return -math.log(1.0 - p_plus)


def bce(p_plus: float, y: int) -> float:
    return -(y * math.log(p_plus) + (1 - y) * math.log(1.0 - p_plus))


def gbce_loss(logits: Tensor, labels: np.ndarray, beta: float, clamp: float = settings.LOSS_CLAMP) -> Tensor:
    """Mean gBCE over the batch, from (n, 2) logits; p_plus is clamped to [clamp, 1 - clamp]"""
    p_plus = T.clip(T.select(T.softmax(logits, axis=-1), 1, axis=1), clamp, 1.0 - clamp)
    labels = np.asarray(labels, dtype=logits.dtype)
    positive = T.scale(T.mul(T.log(p_plus), labels), beta)
    negative = T.mul(T.log(T.sub(1.0, p_plus)), 1.0 - labels)
    return T.scale(T.mean(T.add(positive, negative)), -1.0)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingQuery:
    """A query that survived the pre-filter, with its sampling pools"""
    query: Query
    positives: Tuple[str, ...]
    negatives: Tuple[str, ...]


def filter_trainable_queries(
    queries: QuerySet,
    qrels: Qrels,
    index: InvertedIndex,
    pool_size: int = settings.CANDIDATE_POOL_SIZE,
    corpus: Optional[Corpus] = None,
) -> List[TrainingQuery]:
    """Keep queries with at least one judged-relevant doc in their BM25 top-pool_size"""
    kept = []
    for query in queries:
        relevant = set(qrels.relevant(query.query_id))
        if corpus is not None:
            relevant = {doc_id for doc_id in relevant if doc_id in corpus}
        if not relevant:
            continue
        pool = retrieve(index, query.text, pool_size, query_id=query.query_id)
        if not relevant.intersection(pool.doc_ids()):
            continue
        negatives = tuple(doc_id for doc_id in pool.doc_ids() if doc_id not in relevant)
        kept.append(TrainingQuery(query, tuple(sorted(relevant)), negatives))
    logger.info(f"📊 {len(kept)}/{len(queries)} queries have a relevant document in the BM25 top-{pool_size}")
    return kept


@dataclass(frozen=True)
class TrainBatch:
    batch: EncodedBatch
    labels: np.ndarray
    query_ids: Tuple[str, ...]
    doc_ids: Tuple[str, ...]

    def __len__(self) -> int:
        return int(self.labels.size)


def build_batch(
    items: Sequence[TrainingQuery],
    corpus: Corpus,
    vocab: Vocab,
    config: TrainConfig,
    rng: np.random.Generator,
) -> TrainBatch:
    """
    One positive (uniform over the query's relevant docs) followed by k
    negatives sampled without replacement from its non-relevant pool; a pool
    smaller than k is sampled with replacement, with a warning.
    """
    k = config.negatives_per_positive
    pairs: List[Tuple[str, str]] = []
    labels: List[float] = []
    query_ids: List[str] = []
    doc_ids: List[str] = []
    for item in items:
        if not item.negatives:
            raise CorpusError(f"query {item.query.query_id} has no negative candidates (should have been filtered)")
        positive = item.positives[int(rng.integers(len(item.positives)))]
        replace = len(item.negatives) < k
        if replace:
            logger.warning(
                f"⚠️ query {item.query.query_id}: only {len(item.negatives)} negatives for k={k}, sampling with replacement"
            )
        picks = rng.choice(len(item.negatives), size=k, replace=replace)
        for doc_id, label in [(positive, 1.0)] + [(item.negatives[int(j)], 0.0) for j in picks]:
            pairs.append((item.query.text, corpus.text(doc_id)))
            labels.append(label)
            query_ids.append(item.query.query_id)
            doc_ids.append(doc_id)
    encoded = encode_batch(pairs, vocab, config.max_len)
    return TrainBatch(encoded, np.asarray(labels, dtype=np.float32), tuple(query_ids), tuple(doc_ids))


def sample_batch(
    items: Sequence[TrainingQuery],
    corpus: Corpus,
    vocab: Vocab,
    config: TrainConfig,
    step: int,
) -> TrainBatch:
    """Batch for a given step, seeded from (seed, step) alone"""
    rng = np.random.default_rng([config.seed, step])
    picks = rng.choice(len(items), size=config.batch_positives, replace=len(items) < config.batch_positives)
    return build_batch([items[int(i)] for i in picks], corpus, vocab, config, rng)


class BatchPrefetcher:
    """Builds upcoming batches on a worker thread, handing them over through a bounded queue"""

    def __init__(self, make_batch: Callable[[int], TrainBatch], depth: int, first_step: int = 1):
        self._make_batch = make_batch
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(depth, 1))
        self._stop = threading.Event()
        self._next_step = first_step
        self._thread = threading.Thread(target=self._run, name="batch-prefetch", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        step = self._next_step
        while not self._stop.is_set():
            try:
                item = (step, self._make_batch(step), None)
            except Exception as e:  # handed to the consumer
                item = (step, None, e)
            while not self._stop.is_set():
                try:
                    self._queue.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if item[2] is not None:
                return
            step += 1

    def get(self, step: int) -> TrainBatch:
        produced_step, batch, error = self._queue.get()
        if error is not None:
            raise error
        if produced_step != step:
            raise RuntimeError(f"prefetcher out of sync: expected step {step}, got {produced_step}")
        return batch

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5.0)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def validation_split_size(n_judged: int, validation_size: int) -> int:
    """Queries held out for validation: at least one, at most a quarter of n_judged, never all of them"""
    cap = max(1, int(n_judged * MAX_VALIDATION_FRACTION))
    return max(1, min(validation_size, cap, n_judged - 1))


@dataclass
class TrainResult:
    params: ModelParams
    log: List[TrainLogEntry] = field(default_factory=list)
    best_step: int = 0
    best_metric: float = float("-inf")
    steps: int = 0
    sampling: Optional[SamplingRate] = None
    metric: str = "ndcg@10"


def _validation_run(
    model: CrossEncoderModel,
    corpus: Corpus,
    queries: Sequence[Query],
    pools: Dict[str, Candidates],
) -> RunFile:
    rows: List[RunRow] = []
    for query in queries:
        candidates = pools[query.query_id]
        outcome = rerank_candidates(model, corpus, query, candidates, len(candidates))
        rows.extend(outcome.ranked.to_rows("validation"))
    return RunFile(tuple(rows))


def _dump_batch(batch: TrainBatch, step: int, loss_value: float, run_dir: Path) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / f"diverged_batch_step{step}.json"
    payload = {
        "step": step,
        "loss": repr(loss_value),
        "query_ids": list(batch.query_ids),
        "doc_ids": list(batch.doc_ids),
        "labels": batch.labels.tolist(),
        "token_ids": batch.batch.token_ids.tolist(),
        "attention_mask": batch.batch.attention_mask.tolist(),
    }
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def train(
    corpus: Corpus,
    queries: QuerySet,
    qrels: Qrels,
    index: InvertedIndex,
    model_config: ModelConfig,
    config: TrainConfig,
    vocab: Vocab,
    run_dir: Optional[Union[str, Path]] = None,
    validation_queries: Optional[QuerySet] = None,
    metric: str = "ndcg@10",
) -> TrainResult:
    """
    Train from a seeded random init with early stopping on validation NDCG@10.

    Validation queries are held out from `queries` unless given explicitly:
    validation_size of them, at most a quarter of the judged queries. Every
    validation_every steps the model reranks each validation query's top
    validation_depth candidates; the best parameters seen are returned and
    training stops after `patience` validations without improvement.
    """
    run_dir = Path(run_dir) if run_dir is not None else Path.cwd()
    if config.max_len > model_config.max_len:
        raise ConfigError(f"max_len {config.max_len} exceeds the model position table ({model_config.max_len})")
    judged = QuerySet([q for q in queries if qrels.relevant(q.query_id)])
    if validation_queries is None:
        if len(judged) < 2:
            raise ConfigError("training needs at least 2 queries with relevant documents (train + validation)")
        n_validation = validation_split_size(len(judged), config.validation_size)
        train_queries, validation_queries = split_queries(judged, n_validation, config.seed)
    else:
        held = {q.query_id for q in validation_queries}
        train_queries = QuerySet([q for q in judged if q.query_id not in held])

    items = filter_trainable_queries(train_queries, qrels, index, config.candidate_pool_size, corpus)
    if not items:
        raise ConfigError("no training query has a relevant document among its BM25 candidates")
    pools = {
        q.query_id: retrieve(index, q.text, config.validation_depth, query_id=q.query_id) for q in validation_queries
    }

    sampling = sampling_rate(config)
    logger.info(
        f"🚀 Training {config.loss_kind} (k={config.negatives_per_positive}, B={config.batch_positives}, "
        f"alpha={sampling.alpha:.4f}, beta={sampling.beta:.4f}) on {len(items)} queries, "
        f"validating on {len(validation_queries)}"
    )

    params = init_params(model_config, config.seed)
    params.encode_max_len = min(config.max_len, model_config.max_len)
    tensors = params.tensors(requires_grad=True)
    state = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    eval_model = CrossEncoderModel(params, vocab, batch_size=settings.VALIDATION_BATCH_SIZE)

    result = TrainResult(params=params.copy(), sampling=sampling, metric=metric)
    losses: List[float] = []
    stale = 0
    step = 0

    def make_batch(s: int) -> TrainBatch:
        return sample_batch(items, corpus, vocab, config, s)

    prefetcher = BatchPrefetcher(make_batch, config.prefetch_batches) if config.prefetch_batches > 0 else None

    def validate() -> bool:
        nonlocal stale
        value = metric_value(_validation_run(eval_model, corpus, list(validation_queries), pools), qrels, metric)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        losses.clear()
        result.log.append(TrainLogEntry(step=step, train_loss=train_loss, val_metric=value))
        improved = value > result.best_metric
        if improved:
            result.best_metric = value
            result.best_step = step
            result.params = params.copy()
            stale = 0
        else:
            stale += 1
        logger.info(
            f"📊 step {step}: train_loss={train_loss:.4f} val_{metric}={value:.4f}"
            + (" ✅ best" if improved else f" (no improvement {stale}/{config.patience})")
        )
        return stale >= config.patience

    try:
        while config.max_steps is None or step < config.max_steps:
            step += 1
            batch = prefetcher.get(step) if prefetcher else make_batch(step)
            dropout_rng = np.random.default_rng([config.seed, step, 1])
            with Tape() as tape:
                logits = compute_logits(tensors, model_config, batch.batch.trimmed(), train=True, rng=dropout_rng)
                batch_loss = gbce_loss(logits, batch.labels, sampling.beta, config.loss_clamp)
            loss_value = batch_loss.item()
            if not math.isfinite(loss_value):
                dump = _dump_batch(batch, step, loss_value, run_dir)
                raise TrainingDivergedError(f"non-finite loss {loss_value} at step {step}", str(dump))
            grads = T.backward(tape, batch_loss, tensors)
            adamw_step(params.arrays, grads, state)
            losses.append(loss_value)
            if step % config.validation_every == 0 and validate():
                logger.info(f"Early stop at step {step}: {config.patience} validations without improvement")
                break
        else:
            if step % config.validation_every != 0:
                validate()
    finally:
        if prefetcher:
            prefetcher.close()

    result.steps = step
    logger.info(f"✅ Training done after {step} steps; best {metric}={result.best_metric:.4f} at step {result.best_step}")
    return result


def train_log_column(metric: str) -> str:
    """ndcg@10 -> val_ndcg10, mrr@5 -> val_mrr5"""
    kind, cutoff = parse_metric(metric)
    return f"val_{kind}{cutoff}"


def write_train_log(log: Sequence[TrainLogEntry], path: Union[str, Path], metric: str = "ndcg@10") -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["step", "train_loss", train_log_column(metric)])
        for entry in log:
            val = "" if entry.val_metric is None else f"{entry.val_metric:.6f}"
            writer.writerow([entry.step, f"{entry.train_loss:.6f}", val])


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

def evaluate_depth(
    model: CrossEncoderModel,
    index: InvertedIndex,
    corpus: Corpus,
    queries: Sequence[Query],
    qrels: Qrels,
    depth: int,
    metric: str = "ndcg@10",
) -> float:
    """Metric after reranking each query's top-depth BM25 candidates"""
    pools = {q.query_id: retrieve(index, q.text, depth, query_id=q.query_id) for q in queries}
    return metric_value(_validation_run(model, corpus, list(queries), pools), qrels, metric)


def ablation_grid(
    corpus: Corpus,
    queries: QuerySet,
    qrels: Qrels,
    index: InvertedIndex,
    model_config: ModelConfig,
    base_config: TrainConfig,
    vocab: Vocab,
    eval_queries: QuerySet,
    loss_kinds: Sequence[str] = ("bce", "gbce"),
    negative_counts: Sequence[int] = tuple(settings.ABLATION_NEGATIVES),
    metric: str = "ndcg@10",
    run_dir: Optional[Union[str, Path]] = None,
) -> List[AblationCell]:
    """Train and evaluate one model per (loss, k) cell, all from the same seed"""
    if not loss_kinds or not negative_counts:
        raise ConfigError("ablation grid needs at least one loss kind and one negative count")
    cells = []
    for loss_kind in loss_kinds:
        for k in negative_counts:
            cell_config = TrainConfig(**{**base_config.model_dump(), "loss_kind": loss_kind, "negatives_per_positive": k})
            result = train(corpus, queries, qrels, index, model_config, cell_config, vocab, run_dir, metric=metric)
            model = CrossEncoderModel(result.params, vocab, batch_size=settings.VALIDATION_BATCH_SIZE)
            value = evaluate_depth(model, index, corpus, list(eval_queries), qrels, cell_config.validation_depth, metric)
            cells.append(AblationCell(
                loss_kind=loss_kind,
                negatives=k,
                metric_name=metric,
                metric_value=value,
                best_step=result.best_step,
                steps=result.steps,
            ))
            logger.info(f"📊 {loss_kind} k={k}: {metric}={value:.4f}")
    return cells


def write_ablation_csv(cells: Sequence[AblationCell], path: Union[str, Path]) -> None:
    """Rows are loss kinds, columns negative counts"""
    counts = sorted({c.negatives for c in cells})
    losses: List[str] = []
    for c in cells:
        if c.loss_kind not in losses:
            losses.append(c.loss_kind)
    table = {(c.loss_kind, c.negatives): c.metric_value for c in cells}
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["loss"] + [str(k) for k in counts])
        for loss_kind in losses:
            writer.writerow([loss_kind] + [
                f"{table[(loss_kind, k)]:.6f}" if (loss_kind, k) in table else "" for k in counts
            ])
