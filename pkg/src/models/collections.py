from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from src.utils.errors import CorpusError, RunFormatError


@dataclass(frozen=True)
class Document:
    """One passage of a collection"""
    doc_id: str
    text: str


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str


class Corpus:
    """Ordered, immutable passage collection with id lookup"""

    def __init__(self, documents: Sequence[Document]):
        self.documents: Tuple[Document, ...] = tuple(documents)
        self._by_id: Dict[str, Document] = {}
        for doc in self.documents:
            if not doc.doc_id:
                raise CorpusError("empty doc_id")
            if not doc.text:
                raise CorpusError(f"document {doc.doc_id} has empty text")
            if doc.doc_id in self._by_id:
                raise CorpusError(f"duplicate doc_id {doc.doc_id}")
            self._by_id[doc.doc_id] = doc

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def get(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise CorpusError(f"unknown doc_id {doc_id}") from None

    def text(self, doc_id: str) -> str:
        return self.get(doc_id).text


class QuerySet:
    def __init__(self, queries: Sequence[Query]):
        self.queries: Tuple[Query, ...] = tuple(queries)
        self._by_id: Dict[str, Query] = {}
        for query in self.queries:
            if not query.query_id:
                raise CorpusError("empty query_id")
            if query.query_id in self._by_id:
                raise CorpusError(f"duplicate query_id {query.query_id}")
            self._by_id[query.query_id] = query

    def __len__(self) -> int:
        return len(self.queries)

    def __iter__(self) -> Iterator[Query]:
        return iter(self.queries)

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._by_id

    def get(self, query_id: str) -> Query:
        try:
            return self._by_id[query_id]
        except KeyError:
            raise CorpusError(f"unknown query_id {query_id}") from None

    def subset(self, query_ids: Sequence[str]) -> "QuerySet":
        return QuerySet([self.get(qid) for qid in query_ids])


class Qrels:
    """Graded judgments; an absent (query, doc) pair has grade 0"""

    def __init__(self, judgments: Optional[Dict[Tuple[str, str], int]] = None):
        self.judgments: Dict[Tuple[str, str], int] = {}
        self._by_query: Dict[str, Dict[str, int]] = {}
        for (qid, did), grade in (judgments or {}).items():
            if not isinstance(grade, int) or grade < 0:
                raise CorpusError(f"grade for ({qid}, {did}) must be a non-negative integer, got {grade!r}")
            self.judgments[(qid, did)] = grade
            self._by_query.setdefault(qid, {})[did] = grade

    def __len__(self) -> int:
        return len(self.judgments)

    def grade(self, query_id: str, doc_id: str) -> int:
        return self.judgments.get((query_id, doc_id), 0)

    def for_query(self, query_id: str) -> Dict[str, int]:
        return dict(self._by_query.get(query_id, {}))

    def relevant(self, query_id: str) -> List[str]:
        """Doc ids with grade ≥ 1, sorted for determinism"""
        return sorted(did for did, grade in self._by_query.get(query_id, {}).items() if grade >= 1)

    def query_ids(self) -> List[str]:
        return sorted(self._by_query)

    def has_query(self, query_id: str) -> bool:
        return query_id in self._by_query


@dataclass(frozen=True)
class RunRow:
    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str


@dataclass(frozen=True)
class RunFile:
    """TREC run; rows grouped per query with contiguous 1-based ranks"""
    rows: Tuple[RunRow, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        expected: Dict[str, int] = {}
        last_score: Dict[str, float] = {}
        for row in self.rows:
            want = expected.get(row.query_id, 1)
            if row.rank != want:
                raise RunFormatError(f"query {row.query_id}: expected rank {want}, got {row.rank}")
            if row.query_id in last_score and row.score > last_score[row.query_id]:
                raise RunFormatError(
                    f"query {row.query_id}: score increases at rank {row.rank} "
                    f"({last_score[row.query_id]} -> {row.score})"
                )
            expected[row.query_id] = want + 1
            last_score[row.query_id] = row.score

    def __len__(self) -> int:
        return len(self.rows)

    def query_ids(self) -> List[str]:
        seen: Dict[str, None] = {}
        for row in self.rows:
            seen.setdefault(row.query_id, None)
        return list(seen)

    def by_query(self) -> Dict[str, List[RunRow]]:
        grouped: Dict[str, List[RunRow]] = {}
        for row in self.rows:
            grouped.setdefault(row.query_id, []).append(row)
        return grouped


@dataclass(frozen=True)
class Candidates:
    """First-stage output for one query, descending BM25 score"""
    query_id: str
    entries: Tuple[Tuple[str, float], ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.entries)

    def doc_ids(self) -> List[str]:
        return [doc_id for doc_id, _ in self.entries]


@dataclass(frozen=True)
class RankedList:
    """Final ordering for one query after reranking and merging"""
    query_id: str
    entries: Tuple[Tuple[str, float], ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.entries)

    def doc_ids(self) -> List[str]:
        return [doc_id for doc_id, _ in self.entries]

    def to_rows(self, tag: str) -> List[RunRow]:
        return [
            RunRow(self.query_id, doc_id, rank, round(score, 6), tag)
            for rank, (doc_id, score) in enumerate(self.entries, start=1)
        ]
