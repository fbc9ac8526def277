"""
BM25 first stage - exact top-k Okapi BM25 over an in-memory inverted index.

Index file layout (all integers little-endian u32):

    b"SXBM" | header_len | JSON header {format_version, n_docs, analyzer, n_terms, k1, b}
    doc ids:      n_docs x (len | utf-8 bytes)
    doc lengths:  n_docs x u32
    postings:     n_terms x (term_len | term utf-8 | count | count x ordinal | count x tf)

Terms are written in sorted order so identical corpora give identical bytes.
"""

import heapq
import json
import logging
import math
import struct
from collections import Counter
from pathlib import Path
from typing import Callable, Dict, List, Tuple, Union

import numpy as np

from config import settings
from src.models.collections import Candidates, Corpus
from src.utils.analyzer import ANALYZER_ID, analyze
from src.utils.errors import CorpusError, IndexFormatError

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"SXBM"
INDEX_FORMAT_VERSION = 1

Analyzer = Callable[[str], List[str]]


class InvertedIndex:
    """Immutable postings plus the per-document statistics BM25 needs"""

    def __init__(
        self,
        doc_ids: List[str],
        doc_lengths: np.ndarray,
        postings: Dict[str, Tuple[np.ndarray, np.ndarray]],
        k1: float = settings.BM25_K1,
        b: float = settings.BM25_B,
        analyzer_id: str = ANALYZER_ID,
    ):
        self.doc_ids = list(doc_ids)
        self.doc_lengths = np.asarray(doc_lengths, dtype=np.uint32)
        self.postings = postings
        self.k1 = k1
        self.b = b
        self.analyzer_id = analyzer_id
        self.n_docs = len(self.doc_ids)
        if self.doc_lengths.shape != (self.n_docs,):
            raise IndexFormatError(f"{self.n_docs} doc ids but {self.doc_lengths.size} doc lengths")
        self.avg_doc_length = float(self.doc_lengths.mean()) if self.n_docs else 0.0
        self.ordinal_of = {doc_id: i for i, doc_id in enumerate(self.doc_ids)}

        # Length normalization k1 * (1 - b + b * |d| / avgdl), fixed per document
        avgdl = self.avg_doc_length if self.avg_doc_length > 0 else 1.0
        lengths = self.doc_lengths.astype(np.float64)
        self._norm = self.k1 * (1.0 - self.b + self.b * lengths / avgdl)

    @property
    def n_terms(self) -> int:
        return len(self.postings)

    def df(self, term: str) -> int:
        entry = self.postings.get(term)
        return 0 if entry is None else int(entry[0].size)

    def idf(self, term: str) -> float:
        df = self.df(term)
        if df == 0:
            return 0.0
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)


def build_index(
    corpus: Corpus,
    analyzer: Analyzer = analyze,
    k1: float = settings.BM25_K1,
    b: float = settings.BM25_B,
) -> InvertedIndex:
    if len(corpus) == 0:
        raise CorpusError("cannot index an empty corpus")

    doc_ids = []
    doc_lengths = np.zeros(len(corpus), dtype=np.uint32)
    ordinals: Dict[str, List[int]] = {}
    tfs: Dict[str, List[int]] = {}
    empty = 0
    for ordinal, doc in enumerate(corpus):
        doc_ids.append(doc.doc_id)
        tokens = analyzer(doc.text)
        doc_lengths[ordinal] = len(tokens)
        if not tokens:
            empty += 1
            logger.warning(f"⚠️ Document {doc.doc_id} has no indexable terms (indexed with length 0)")
            continue
        for term, count in Counter(tokens).items():
            ordinals.setdefault(term, []).append(ordinal)
            tfs.setdefault(term, []).append(count)

    postings = {
        term: (np.asarray(ordinals[term], dtype=np.uint32), np.asarray(tfs[term], dtype=np.uint32))
        for term in sorted(ordinals)
    }
    index = InvertedIndex(doc_ids, doc_lengths, postings, k1=k1, b=b)
    logger.info(
        f"✅ Indexed {index.n_docs} documents, {index.n_terms} terms, "
        f"avgdl={index.avg_doc_length:.2f}" + (f" ({empty} empty)" if empty else "")
    )
    return index


def _score_vector(index: InvertedIndex, terms: List[str]) -> np.ndarray:
    scores = np.zeros(index.n_docs, dtype=np.float64)
    for term in terms:
        entry = index.postings.get(term)
        if entry is None:
            continue
        ords, tf = entry
        tf = tf.astype(np.float64)
        idf = index.idf(term)
        scores[ords] += idf * (tf * (index.k1 + 1.0)) / (tf + index._norm[ords])
    return scores


def retrieve(index: InvertedIndex, query_text: str, k: int, query_id: str = "") -> Candidates:
    """
    Exact top-k by BM25; ties broken by ascending doc_id.

    Each query-token occurrence contributes once, so repeated query terms weigh
    more. Documents without term overlap (score 0) are never returned.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    terms = analyze(query_text)
    if not terms:
        return Candidates(query_id, ())
    scores = _score_vector(index, terms)
    hits = np.flatnonzero(scores > 0.0)
    doc_ids = index.doc_ids
    top = heapq.nsmallest(k, hits.tolist(), key=lambda i: (-scores[i], doc_ids[i]))
    return Candidates(query_id, tuple((doc_ids[i], float(scores[i])) for i in top))


def brute_force_scores(
    corpus: Corpus,
    query_text: str,
    k1: float = settings.BM25_K1,
    b: float = settings.BM25_B,
) -> Dict[str, float]:
    """Score every document directly from its text (reference for retrieve)"""
    term_frequencies = [Counter(analyze(doc.text)) for doc in corpus]
    doc_lengths = [sum(tf.values()) for tf in term_frequencies]
    n_docs = len(doc_lengths)
    avg_doc_length = sum(doc_lengths) / n_docs if n_docs else 0.0
    avgdl = avg_doc_length if avg_doc_length > 0 else 1.0
    doc_frequencies: Counter = Counter()
    for tf in term_frequencies:
        doc_frequencies.update(tf.keys())

    scores = {}
    for doc, tf, doc_length in zip(corpus, term_frequencies, doc_lengths):
        score = 0.0
        for term in analyze(query_text):
            df = doc_frequencies.get(term, 0)
            term_freq = tf.get(term, 0)
            if df == 0 or term_freq == 0:
                continue
            idf = math.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)
            numerator = term_freq * (k1 + 1.0)
            denominator = term_freq + k1 * (1.0 - b + b * doc_length / avgdl)
            score += idf * numerator / denominator
        scores[doc.doc_id] = score
    return scores


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def save_index(index: InvertedIndex, path: Union[str, Path]) -> None:
    header = {
        "format_version": INDEX_FORMAT_VERSION,
        "n_docs": index.n_docs,
        "analyzer": index.analyzer_id,
        "n_terms": index.n_terms,
        "k1": index.k1,
        "b": index.b,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [INDEX_MAGIC, _u32(len(header_bytes)), header_bytes]
    for doc_id in index.doc_ids:
        encoded = doc_id.encode("utf-8")
        parts.append(_u32(len(encoded)))
        parts.append(encoded)
    parts.append(index.doc_lengths.astype("<u4").tobytes())
    for term in sorted(index.postings):
        ords, tfs = index.postings[term]
        encoded = term.encode("utf-8")
        parts.extend([_u32(len(encoded)), encoded, _u32(ords.size)])
        parts.append(ords.astype("<u4").tobytes())
        parts.append(tfs.astype("<u4").tobytes())
    with open(path, "wb") as handle:
        handle.write(b"".join(parts))
    logger.info(f"Saved index ({index.n_docs} docs, {index.n_terms} terms) to {path}")


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise IndexFormatError(f"{self.path}: truncated at byte {self.offset} (wanted {n} more)")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<u4").astype(np.uint32)


def load_index(path: Union[str, Path]) -> InvertedIndex:
    with open(path, "rb") as handle:
        reader = _Reader(handle.read(), str(path))
    if reader.take(4) != INDEX_MAGIC:
        raise IndexFormatError(f"{path}: not an index file (bad magic)")
    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IndexFormatError(f"{path}: unreadable header ({e})") from None
    if header.get("format_version") != INDEX_FORMAT_VERSION:
        raise IndexFormatError(
            f"{path}: unsupported format version {header.get('format_version')} "
            f"(expected {INDEX_FORMAT_VERSION})"
        )
    if header.get("analyzer") != ANALYZER_ID:
        raise IndexFormatError(f"{path}: built with analyzer {header.get('analyzer')!r}, expected {ANALYZER_ID!r}")

    n_docs = int(header["n_docs"])
    doc_ids = [reader.take(reader.u32()).decode("utf-8") for _ in range(n_docs)]
    doc_lengths = reader.u32_array(n_docs)
    postings: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for _ in range(int(header["n_terms"])):
        term = reader.take(reader.u32()).decode("utf-8")
        count = reader.u32()
        ords = reader.u32_array(count)
        tfs = reader.u32_array(count)
        if count and int(ords.max()) >= n_docs:
            raise IndexFormatError(f"{path}: posting for {term!r} points past n_docs")
        postings[term] = (ords, tfs)
    if reader.offset != len(reader.data):
        raise IndexFormatError(f"{path}: {len(reader.data) - reader.offset} trailing bytes")
    return InvertedIndex(doc_ids, doc_lengths, postings, k1=float(header["k1"]), b=float(header["b"]))
