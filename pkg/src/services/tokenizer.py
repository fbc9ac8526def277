"""
WordPiece tokenization and cross-encoder input assembly.

Pairs are laid out BERT style:

    [CLS] query... [SEP] document... [SEP] [PAD]...
    segment 0 ---------| segment 1 ------| 0 ------

Words come from the same analyzer the BM25 index uses (lowercase, split on
non-alphanumeric), then each word is split greedily into the longest pieces
found in the vocab, with "##" marking word continuations.
"""

import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from config import settings
from src.utils.analyzer import analyze
from src.utils.errors import ModelInputError, VocabError

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
REQUIRED_SPECIALS = (PAD, UNK, CLS, SEP)
CONTINUATION = "##"
MAX_CHARS_PER_WORD = 100
MIN_MAX_LEN = 8


class Vocab:
    """
    Token <-> id mapping; ids are the zero-based line numbers of vocab.txt.

    The mapping never changes after construction. The only mutable part is the
    per-word WordPiece cache, written under a lock so one Vocab can serve
    several threads.
    """

    def __init__(self, tokens: Sequence[str]):
        self.tokens: Tuple[str, ...] = tuple(tokens)
        self.token_to_id: Dict[str, int] = {}
        for i, token in enumerate(self.tokens):
            if token in self.token_to_id:
                raise VocabError(f"duplicate token {token!r} at ids {self.token_to_id[token]} and {i}")
            self.token_to_id[token] = i
        missing = [t for t in REQUIRED_SPECIALS if t not in self.token_to_id]
        if missing:
            raise VocabError(f"vocab is missing special token(s): {', '.join(missing)}")
        self.pad_id = self.token_to_id[PAD]
        self.unk_id = self.token_to_id[UNK]
        self.cls_id = self.token_to_id[CLS]
        self.sep_id = self.token_to_id[SEP]
        self.special_ids = frozenset(self.token_to_id[t] for t in SPECIAL_TOKENS if t in self.token_to_id)
        self._pieces: Dict[str, Tuple[str, ...]] = {}
        self._pieces_lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)


def load_vocab(path: Union[str, Path]) -> Vocab:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        tokens = [line.rstrip("\r\n") for line in handle]
    vocab = Vocab(tokens)
    logger.info(f"Loaded vocab of {vocab.vocab_size} tokens from {path}")
    return vocab


def write_vocab(vocab: Vocab, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for token in vocab.tokens:
            handle.write(token + "\n")


def build_vocab(terms: Iterable[str]) -> Vocab:
    """
    Small BERT-layout vocab for synthetic runs: the special tokens, every
    analyzer word of the given terms, then each single character both as a
    word start and as a "##" continuation so any word made of those
    characters can still be spelled out.
    """
    tokens: List[str] = list(SPECIAL_TOKENS)
    seen = set(tokens)
    chars = set()
    for term in terms:
        for word in analyze(term):
            chars.update(word)
            if word not in seen:
                seen.add(word)
                tokens.append(word)
    for char in sorted(chars):
        for piece in (char, CONTINUATION + char):
            if piece not in seen:
                seen.add(piece)
                tokens.append(piece)
    return Vocab(tokens)


def _split_word(word: str, vocab: Vocab) -> Tuple[str, ...]:
    with vocab._pieces_lock:
        cached = vocab._pieces.get(word)
    if cached is not None:
        return cached
    if len(word) > MAX_CHARS_PER_WORD:
        pieces: Tuple[str, ...] = (UNK,)
    else:
        found = []
        start = 0
        while start < len(word):
            end = len(word)
            piece = None
            while start < end:
                candidate = word[start:end]
                if start > 0:
                    candidate = CONTINUATION + candidate
                if candidate in vocab.token_to_id:
                    piece = candidate
                    break
                end -= 1
            if piece is None:
                found = [UNK]
                break
            found.append(piece)
            start = end
        pieces = tuple(found)
    with vocab._pieces_lock:
        return vocab._pieces.setdefault(word, pieces)


def wordpiece(text: str, vocab: Vocab) -> List[str]:
    """Greedy longest-match-first WordPiece; an unmatchable word becomes one [UNK]"""
    tokens: List[str] = []
    for word in analyze(text):
        tokens.extend(_split_word(word, vocab))
    return tokens


@dataclass(frozen=True)
class EncodedPair:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    n_query_tokens: int
    n_doc_tokens: int

    @property
    def length(self) -> int:
        """Unmasked length: 3 specials plus the kept query and document tokens"""
        return 3 + self.n_query_tokens + self.n_doc_tokens


def encode_pair(query: str, doc: str, vocab: Vocab, max_len: int = settings.MAX_LEN) -> EncodedPair:
    """
    Truncation drops document tokens first; query tokens are only cut when the
    query alone overflows max_len - 3.
    """
    if max_len < MIN_MAX_LEN:
        raise ModelInputError(f"max_len must be >= {MIN_MAX_LEN}, got {max_len}")
    budget = max_len - 3
    query_tokens = wordpiece(query, vocab)
    doc_tokens = wordpiece(doc, vocab)
    n_query = min(len(query_tokens), budget)
    n_doc = min(len(doc_tokens), budget - n_query)

    ids = [vocab.cls_id]
    ids.extend(vocab.id_of(t) for t in query_tokens[:n_query])
    ids.append(vocab.sep_id)
    ids.extend(vocab.id_of(t) for t in doc_tokens[:n_doc])
    ids.append(vocab.sep_id)
    length = len(ids)

    token_ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    token_ids[:length] = ids
    segment_ids = np.zeros(max_len, dtype=np.int64)
    segment_ids[n_query + 2:length] = 1
    attention_mask = np.zeros(max_len, dtype=np.int64)
    attention_mask[:length] = 1
    return EncodedPair(token_ids, segment_ids, attention_mask, n_query, n_doc)


@dataclass(frozen=True)
class EncodedBatch:
    """Row-stacked EncodedPairs, shape (n, max_len) each"""
    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    def trimmed(self) -> "EncodedBatch":
        """Drop trailing columns that are padding in every row"""
        if len(self) == 0:
            return self
        width = max(int(self.attention_mask.sum(axis=1).max()), 1)
        return EncodedBatch(
            self.token_ids[:, :width], self.segment_ids[:, :width], self.attention_mask[:, :width]
        )

    def rows(self, start: int, stop: int) -> "EncodedBatch":
        return EncodedBatch(
            self.token_ids[start:stop], self.segment_ids[start:stop], self.attention_mask[start:stop]
        )


def stack(pairs: Sequence[EncodedPair], max_len: int = settings.MAX_LEN) -> EncodedBatch:
    if not pairs:
        empty = np.zeros((0, max_len), dtype=np.int64)
        return EncodedBatch(empty, empty.copy(), empty.copy())
    return EncodedBatch(
        np.stack([p.token_ids for p in pairs]),
        np.stack([p.segment_ids for p in pairs]),
        np.stack([p.attention_mask for p in pairs]),
    )


def encode_batch(pairs: Sequence[Tuple[str, str]], vocab: Vocab, max_len: int = settings.MAX_LEN) -> EncodedBatch:
    return stack([encode_pair(query, doc, vocab, max_len) for query, doc in pairs], max_len)


def decode(token_ids: Iterable[int], vocab: Vocab, skip_special: bool = True) -> List[str]:
    """Map ids back to words, re-joining "##" continuations onto the previous piece"""
    words: List[str] = []
    for token_id in token_ids:
        token_id = int(token_id)
        if skip_special and token_id in vocab.special_ids:
            continue
        token = vocab.tokens[token_id]
        if token.startswith(CONTINUATION) and words:
            words[-1] += token[len(CONTINUATION):]
        else:
            words.append(token)
    return words
