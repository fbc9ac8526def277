"""
Corpus I/O - MSMARCO-style TSV collections and queries, TREC qrels and run
files, plus a deterministic synthetic corpus generator for desk-scale runs.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from src.models.collections import Corpus, Document, Qrels, Query, QuerySet, RunFile, RunRow
from src.utils.errors import CorpusError, ParseError, RunFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# TSV collections and queries
# ---------------------------------------------------------------------------

def _read_lines(path: PathLike) -> List[str]:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        return [line.rstrip("\r\n") for line in handle]


def _parse_tsv_pairs(path: PathLike, kind: str) -> List[Tuple[str, str]]:
    pairs = []
    for line_no, line in enumerate(_read_lines(path), start=1):
        fields = line.split("\t")
        if len(fields) != 2:
            raise ParseError(
                f"expected `{kind}_id<TAB>text`, found {len(fields)} field(s)", str(path), line_no
            )
        item_id, text = fields
        if not item_id:
            raise ParseError(f"empty {kind}_id", str(path), line_no)
        if not text:
            raise ParseError(f"empty text for {kind} {item_id}", str(path), line_no)
        pairs.append((item_id, text))
    return pairs


def load_collection(path: PathLike, format: str = "tsv") -> Corpus:
    """Load `doc_id<TAB>text` lines, preserving file order"""
    if format != "tsv":
        raise CorpusError(f"unsupported collection format {format!r} (only tsv)")
    seen = set()
    documents = []
    for line_no, (doc_id, text) in enumerate(_parse_tsv_pairs(path, "doc"), start=1):
        if doc_id in seen:
            raise ParseError(f"duplicate doc_id {doc_id}", str(path), line_no)
        seen.add(doc_id)
        documents.append(Document(doc_id, text))
    logger.info(f"Loaded {len(documents)} documents from {path}")
    return Corpus(documents)


def load_queries(path: PathLike) -> QuerySet:
    seen = set()
    queries = []
    for line_no, (query_id, text) in enumerate(_parse_tsv_pairs(path, "query"), start=1):
        if query_id in seen:
            raise ParseError(f"duplicate query_id {query_id}", str(path), line_no)
        seen.add(query_id)
        queries.append(Query(query_id, text))
    logger.info(f"Loaded {len(queries)} queries from {path}")
    return QuerySet(queries)


def write_collection(corpus: Corpus, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for doc in corpus:
            handle.write(f"{doc.doc_id}\t{doc.text}\n")


def write_queries(queries: QuerySet, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for query in queries:
            handle.write(f"{query.query_id}\t{query.text}\n")


# ---------------------------------------------------------------------------
# qrels
# ---------------------------------------------------------------------------

def load_qrels(path: PathLike) -> Qrels:
    """Parse `query_id 0 doc_id grade`; a later duplicate overwrites with a warning"""
    judgments: Dict[Tuple[str, str], int] = {}
    for line_no, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ParseError(f"expected 4 whitespace-separated fields, found {len(fields)}", str(path), line_no)
        query_id, _, doc_id, raw_grade = fields
        try:
            grade = int(raw_grade)
        except ValueError:
            raise ParseError(f"grade {raw_grade!r} is not an integer", str(path), line_no) from None
        if grade < 0:
            raise ParseError(f"negative grade {grade}", str(path), line_no)
        key = (query_id, doc_id)
        if key in judgments:
            logger.warning(
                f"⚠️ {path}:{line_no}: duplicate judgment for ({query_id}, {doc_id}), "
                f"{judgments[key]} replaced by {grade}"
            )
        judgments[key] = grade
    logger.info(f"Loaded {len(judgments)} judgments from {path}")
    return Qrels(judgments)


def write_qrels(qrels: Qrels, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for (query_id, doc_id), grade in qrels.judgments.items():
            handle.write(f"{query_id} 0 {doc_id} {grade}\n")


# ---------------------------------------------------------------------------
# TREC run files
# ---------------------------------------------------------------------------

def format_run_row(row: RunRow) -> str:
    return f"{row.query_id} Q0 {row.doc_id} {row.rank} {row.score:.6f} {row.tag}"


def write_run(run: RunFile, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for row in run.rows:
            handle.write(format_run_row(row) + "\n")


def read_run(path: PathLike) -> RunFile:
    rows = []
    for line_no, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 6:
            raise ParseError(f"expected 6 fields `qid Q0 docid rank score tag`, found {len(fields)}", str(path), line_no)
        query_id, _, doc_id, raw_rank, raw_score, tag = fields
        try:
            rank = int(raw_rank)
            score = float(raw_score)
        except ValueError:
            raise ParseError(f"bad rank/score {raw_rank!r}/{raw_score!r}", str(path), line_no) from None
        rows.append(RunRow(query_id, doc_id, rank, score, tag))
    try:
        return RunFile(tuple(rows))
    except RunFormatError as e:
        raise RunFormatError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# validation and splitting
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    """Qrels entries pointing at queries or documents that were not loaded"""
    missing_queries: List[Tuple[str, str]] = field(default_factory=list)
    missing_docs: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.missing_queries and not self.missing_docs


def validate(corpus: Corpus, queries: QuerySet, qrels: Qrels) -> ValidationReport:
    report = ValidationReport()
    for (query_id, doc_id) in qrels.judgments:
        if query_id not in queries:
            report.missing_queries.append((query_id, doc_id))
        if doc_id not in corpus:
            report.missing_docs.append((query_id, doc_id))
    if report.missing_queries:
        logger.warning(f"⚠️ {len(report.missing_queries)} judgment(s) reference unknown queries")
    if report.missing_docs:
        logger.warning(f"⚠️ {len(report.missing_docs)} judgment(s) reference unknown documents")
    return report


def split_queries(queries: QuerySet, n_holdout: int, seed: int) -> Tuple[QuerySet, QuerySet]:
    """Randomly hold out n_holdout queries (at least one query is always kept)"""
    n_holdout = max(0, min(n_holdout, len(queries) - 1))
    rng = np.random.default_rng(seed)
    held = set(int(i) for i in rng.permutation(len(queries))[:n_holdout])
    kept = [q for i, q in enumerate(queries) if i not in held]
    held_out = [q for i, q in enumerate(queries) if i in held]
    return QuerySet(kept), QuerySet(held_out)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticCorpus:
    corpus: Corpus
    queries: QuerySet
    qrels: Qrels
    terms: List[str]

    def __iter__(self):
        return iter((self.corpus, self.queries, self.qrels))


def synthetic_terms(vocab_size: int) -> List[str]:
    return [f"t{i}" for i in range(vocab_size)]


def _insert(tokens: List[str], planted: Sequence[str], rng: np.random.Generator) -> None:
    for term in planted:
        tokens.insert(int(rng.integers(0, len(tokens) + 1)), term)


def generate_synthetic(
    seed: int,
    n_docs: int,
    n_queries: int,
    vocab_size: int,
    relevant_per_query: int,
    min_doc_len: int = 12,
    max_doc_len: int = 40,
    distractors_per_relevant: int = 3,
    near_miss_tf: int = 4,
) -> SyntheticCorpus:
    """
    Build a corpus where each query's relevant documents contain both of its
    two rare terms once, padded to max_doc_len. Filler text follows a Zipfian
    distribution over the common terms, which never include rare ones.

    Near-miss distractors are short documents repeating a single rare term
    near_miss_tf times next to the query's common terms. BM25 rewards the
    repetition and the short length, so it usually ranks the distractors above
    the relevant documents; telling them apart takes both rare terms together.
    Planted documents are drawn from untouched ones while any remain.
    """
    if min(n_docs, n_queries, relevant_per_query) < 1:
        raise CorpusError("n_docs, n_queries and relevant_per_query must all be >= 1")
    if relevant_per_query > n_docs:
        raise CorpusError(f"relevant_per_query ({relevant_per_query}) exceeds n_docs ({n_docs})")
    if vocab_size < 10:
        raise CorpusError(f"vocab_size must be >= 10 to plant rare terms, got {vocab_size}")
    if distractors_per_relevant < 0 or near_miss_tf < 1:
        raise CorpusError("distractors_per_relevant must be >= 0 and near_miss_tf >= 1")

    rng = np.random.default_rng(seed)
    terms = synthetic_terms(vocab_size)
    n_rare = min(max(4, vocab_size // 2), vocab_size - 4)
    common = terms[: vocab_size - n_rare]
    rare = terms[vocab_size - n_rare:]

    zipf = 1.0 / np.arange(1, len(common) + 1)
    zipf /= zipf.sum()
    head = max(2, min(20, len(common)))

    def filler(length: int) -> List[str]:
        return [common[int(j)] for j in rng.choice(len(common), size=length, p=zipf)]

    # rare-term pairs, cycling through permutations to spread terms across queries
    order: List[int] = []
    while len(order) < 2 * n_queries:
        order.extend(int(i) for i in rng.permutation(n_rare))
    pairs = []
    for i in range(n_queries):
        a, b = order[2 * i], order[2 * i + 1]
        if a == b:
            b = (a + 1) % n_rare
        pairs.append((rare[a], rare[b]))

    doc_tokens = [filler(int(rng.integers(min_doc_len, max_doc_len + 1))) for _ in range(n_docs)]
    fresh = list(range(n_docs))

    def take_fresh(n: int) -> List[int]:
        picks = sorted((int(i) for i in rng.choice(len(fresh), size=n, replace=False)), reverse=True)
        return [fresh.pop(i) for i in picks]

    queries = []
    judgments: Dict[Tuple[str, str], int] = {}
    doc_ids = [f"D{i:06d}" for i in range(n_docs)]
    for i, (rare_a, rare_b) in enumerate(pairs):
        query_id = f"Q{i:04d}"
        common_terms = [common[int(j)] for j in rng.choice(head, size=2, replace=False)]
        query_terms = [rare_a, rare_b] + common_terms
        query_terms = [query_terms[int(j)] for j in rng.permutation(len(query_terms))]
        queries.append(Query(query_id, " ".join(query_terms)))

        if len(fresh) >= relevant_per_query:
            relevant = take_fresh(relevant_per_query)
        else:
            relevant = [int(j) for j in rng.choice(n_docs, size=relevant_per_query, replace=False)]
            fresh[:] = [j for j in fresh if j not in relevant]
        for j in relevant:
            doc_tokens[j].extend(filler(max(0, max_doc_len - len(doc_tokens[j]))))
            _insert(doc_tokens[j], [rare_a, rare_b], rng)
            judgments[(query_id, doc_ids[j])] = 1

        n_near = min(distractors_per_relevant * relevant_per_query, len(fresh))
        if n_near:
            for n, j in enumerate(take_fresh(n_near)):
                single = rare_a if n % 2 == 0 else rare_b
                doc_tokens[j] = doc_tokens[j][:min_doc_len]
                _insert(doc_tokens[j], [single] * near_miss_tf + common_terms, rng)

    corpus = Corpus([Document(doc_ids[j], " ".join(tokens)) for j, tokens in enumerate(doc_tokens)])
    logger.info(
        f"📊 Synthetic corpus: {n_docs} docs, {n_queries} queries, "
        f"{len(judgments)} judgments, {n_rare} rare terms (seed={seed})"
    )
    return SyntheticCorpus(corpus, QuerySet(queries), Qrels(judgments), terms)
