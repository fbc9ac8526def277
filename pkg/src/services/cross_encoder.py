"""
Shallow BERT-style cross-encoder.

Embeddings (token + position + segment, then LayerNorm), n_layers post-LN
transformer blocks, an optional tanh pooler on the [CLS] state and a two-way
classifier. Logit column 1 is the relevance logit s_plus, column 0 is s_minus;
p_plus = softmax(s)[1].

Parameter names follow the Hugging Face BERT layout so manifests line up with
published checkpoints. Dense weights are stored (in_features, out_features).
"""

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from config import settings
from src.models.schemas import ModelConfig
from src.services.tokenizer import EncodedBatch, Vocab, encode_batch, load_vocab
from src.utils import tensor as T
from src.utils.errors import CheckpointError, ModelInputError
from src.utils.tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SXCE"
CHECKPOINT_FORMAT_VERSION = 1
MASK_BIAS = -1e9
P_PLUS_EPS = 1e-12


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def param_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    d, ff = config.d_model, config.d_ff
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["embeddings.word_embeddings.weight"] = (config.vocab_size, d)
    shapes["embeddings.position_embeddings.weight"] = (config.max_len, d)
    shapes["embeddings.token_type_embeddings.weight"] = (config.type_vocab_size, d)
    shapes["embeddings.LayerNorm.weight"] = (d,)
    shapes["embeddings.LayerNorm.bias"] = (d,)
    for i in range(config.n_layers):
        prefix = f"encoder.layer.{i}"
        for proj in ("query", "key", "value"):
            shapes[f"{prefix}.attention.self.{proj}.weight"] = (d, d)
            shapes[f"{prefix}.attention.self.{proj}.bias"] = (d,)
        shapes[f"{prefix}.attention.output.dense.weight"] = (d, d)
        shapes[f"{prefix}.attention.output.dense.bias"] = (d,)
        shapes[f"{prefix}.attention.output.LayerNorm.weight"] = (d,)
        shapes[f"{prefix}.attention.output.LayerNorm.bias"] = (d,)
        shapes[f"{prefix}.intermediate.dense.weight"] = (d, ff)
        shapes[f"{prefix}.intermediate.dense.bias"] = (ff,)
        shapes[f"{prefix}.output.dense.weight"] = (ff, d)
        shapes[f"{prefix}.output.dense.bias"] = (d,)
        shapes[f"{prefix}.output.LayerNorm.weight"] = (d,)
        shapes[f"{prefix}.output.LayerNorm.bias"] = (d,)
    if config.pooler:
        shapes["pooler.dense.weight"] = (d, d)
        shapes["pooler.dense.bias"] = (d,)
    shapes["classifier.weight"] = (d, 2)
    shapes["classifier.bias"] = (2,)
    return shapes


def count_parameters(config: ModelConfig) -> int:
    return int(sum(np.prod(shape) for shape in param_shapes(config).values()))


@dataclass
class ModelParams:
    """Named weight arrays of one cross-encoder, in manifest order"""
    config: ModelConfig
    arrays: Dict[str, np.ndarray]
    encode_max_len: int = settings.MAX_LEN

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.arrays) != list(expected):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            raise CheckpointError(f"parameter names do not match config (missing={missing[:3]}, extra={extra[:3]})")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise CheckpointError(f"{name}: shape {self.arrays[name].shape} does not match config {shape}")

    @property
    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((k, v.copy()) for k, v in self.arrays.items()), self.encode_max_len)

    def tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return OrderedDict(
            (name, Tensor(array, requires_grad=requires_grad, name=name)) for name, array in self.arrays.items()
        )


def _truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    values = rng.standard_normal(shape)
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return (values * std).astype(np.float32)


def init_params(config: ModelConfig, seed: int, std: float = settings.INIT_STD) -> ModelParams:
    """Truncated normal (cut at 2 std) weights, zero biases, unit LayerNorm gains"""
    rng = np.random.default_rng(seed)
    arrays: Dict[str, np.ndarray] = OrderedDict()
    for name, shape in param_shapes(config).items():
        if "LayerNorm.weight" in name:
            arrays[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            arrays[name] = np.zeros(shape, dtype=np.float32)
        else:
            arrays[name] = _truncated_normal(rng, shape, std)
    params = ModelParams(config, arrays)
    logger.info(
        f"Initialized {config.n_layers}-layer d={config.d_model} cross-encoder "
        f"({params.num_parameters:,} parameters, seed={seed})"
    )
    return params


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _dense(x: Tensor, params: Dict[str, Tensor], prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{prefix}.weight"]), params[f"{prefix}.bias"])


def _layer_norm(x: Tensor, params: Dict[str, Tensor], prefix: str) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def _self_attention(
    x: Tensor,
    mask_bias: np.ndarray,
    params: Dict[str, Tensor],
    prefix: str,
    config: ModelConfig,
    train: bool,
    rng: Optional[np.random.Generator],
    attention_sink: Optional[List[np.ndarray]],
) -> Tensor:
    n, length, d = x.shape
    h, hd = config.n_heads, config.head_dim

    def heads(name: str) -> Tensor:
        projected = _dense(x, params, f"{prefix}.attention.self.{name}")
        return T.transpose(T.reshape(projected, (n, length, h, hd)), (0, 2, 1, 3))

    q, k, v = heads("query"), heads("key"), heads("value")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    probs = T.softmax(T.add(scores, mask_bias), axis=-1)
    if attention_sink is not None:
        attention_sink.append(probs.data)
    probs = T.dropout(probs, config.dropout, train, rng)
    context = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (n, length, d))
    return _dense(context, params, f"{prefix}.attention.output.dense")


def compute_logits(
    params: Dict[str, Tensor],
    config: ModelConfig,
    batch: EncodedBatch,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    attention_sink: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """(n, 2) logits; records on the active tape when params require grad"""
    ids = np.asarray(batch.token_ids)
    n, length = ids.shape
    if length > config.max_len:
        raise ModelInputError(f"sequence length {length} exceeds model max_len {config.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ModelInputError(
            f"token id out of range [0, {config.vocab_size}): min {ids.min()}, max {ids.max()}"
        )
    segments = np.asarray(batch.segment_ids)
    if segments.size and (segments.min() < 0 or segments.max() >= config.type_vocab_size):
        raise ModelInputError(f"segment id out of range [0, {config.type_vocab_size})")

    word = params["embeddings.word_embeddings.weight"]
    x = T.add(
        T.add(
            T.embedding_lookup(word, ids),
            T.embedding_lookup(params["embeddings.position_embeddings.weight"], np.arange(length)),
        ),
        T.embedding_lookup(params["embeddings.token_type_embeddings.weight"], segments),
    )
    x = _layer_norm(x, params, "embeddings.LayerNorm")
    x = T.dropout(x, config.dropout, train, rng)

    # Additive key mask: padded keys get a large negative score before softmax
    mask = np.asarray(batch.attention_mask)
    mask_bias = ((1.0 - mask) * MASK_BIAS).astype(word.dtype)[:, None, None, :]

    for i in range(config.n_layers):
        prefix = f"encoder.layer.{i}"
        attended = _self_attention(x, mask_bias, params, prefix, config, train, rng, attention_sink)
        attended = T.dropout(attended, config.dropout, train, rng)
        x = _layer_norm(T.add(x, attended), params, f"{prefix}.attention.output.LayerNorm")
        hidden = T.gelu(_dense(x, params, f"{prefix}.intermediate.dense"))
        hidden = T.dropout(_dense(hidden, params, f"{prefix}.output.dense"), config.dropout, train, rng)
        x = _layer_norm(T.add(x, hidden), params, f"{prefix}.output.LayerNorm")

    cls = T.select(x, 0, axis=1)
    if config.pooler:
        cls = T.tanh(_dense(cls, params, "pooler.dense"))
    cls = T.dropout(cls, config.dropout, train, rng)
    return _dense(cls, params, "classifier")


@dataclass(frozen=True)
class ScoreBatch:
    """Per-pair logits and relevance probability p_plus = softmax(s)[1]"""
    s_plus: np.ndarray
    s_minus: np.ndarray

    @property
    def margin(self) -> np.ndarray:
        return self.s_plus.astype(np.float64) - self.s_minus.astype(np.float64)

    @property
    def p_plus(self) -> np.ndarray:
        # sigmoid(s_plus - s_minus) without overflow, kept inside the open interval
        return np.clip(np.exp(-np.logaddexp(0.0, -self.margin)), P_PLUS_EPS, 1.0 - P_PLUS_EPS)

    def __len__(self) -> int:
        return int(self.s_plus.shape[0])


def forward(
    params: ModelParams,
    batch: EncodedBatch,
    train: bool = False,
    seed: Optional[int] = None,
    attention_sink: Optional[List[np.ndarray]] = None,
) -> ScoreBatch:
    rng = np.random.default_rng(seed) if train else None
    logits = compute_logits(params.tensors(), params.config, batch, train, rng, attention_sink).data
    return ScoreBatch(s_plus=logits[:, 1].copy(), s_minus=logits[:, 0].copy())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path: Union[str, Path]) -> None:
    manifest = []
    offset = 0
    for name, array in params.arrays.items():
        nbytes = int(array.size) * 4
        manifest.append({"name": name, "shape": list(array.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": params.config.model_dump(),
        "encode_max_len": params.encode_max_len,
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<I", len(header_bytes)))
        handle.write(header_bytes)
        for array in params.arrays.values():
            handle.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    logger.info(f"💾 Saved checkpoint ({params.num_parameters:,} parameters, {offset / 1e6:.1f} MB) to {path}")


def read_checkpoint_header(data: bytes, path: str) -> Tuple[dict, int]:
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<I", data[4:8])
    if 8 + header_len > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from None
    return header, 8 + header_len


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    with open(path, "rb") as handle:
        data = handle.read()
    header, payload_start = read_checkpoint_header(data, str(path))
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format {header.get('format_version')} "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    try:
        config = ModelConfig(**header["config"])
    except (KeyError, TypeError, ValidationError) as e:
        raise CheckpointError(f"{path}: invalid model config in header ({e})") from None

    expected = param_shapes(config)
    manifest = header.get("tensors", [])
    if [entry["name"] for entry in manifest] != list(expected):
        raise CheckpointError(f"{path}: tensor manifest does not match the model config")

    arrays: Dict[str, np.ndarray] = OrderedDict()
    offset = 0
    for entry in manifest:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        if shape != expected[entry["name"]] or entry["offset"] != offset or entry["nbytes"] != nbytes:
            raise CheckpointError(f"{path}: manifest entry {entry['name']} inconsistent with config {expected[entry['name']]}")
        start = payload_start + offset
        if start + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated payload in {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape).astype(np.float32)
        offset += nbytes
    if payload_start + offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - payload_start - offset} unexpected trailing bytes")
    return ModelParams(config, arrays, int(header.get("encode_max_len", settings.MAX_LEN)))


# ---------------------------------------------------------------------------
# serving bundle
# ---------------------------------------------------------------------------

@dataclass
class CrossEncoderModel:
    """Frozen params plus everything needed to score raw (query, doc) text"""
    params: ModelParams
    vocab: Vocab
    batch_size: int = settings.SERVING_BATCH_SIZE
    max_len: int = field(default=0)
    name: Optional[str] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ModelInputError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.max_len:
            self.max_len = min(self.params.encode_max_len, self.params.config.max_len)
        if self.vocab.vocab_size > self.params.config.vocab_size:
            raise ModelInputError(
                f"vocab has {self.vocab.vocab_size} tokens but the model embeds only {self.params.config.vocab_size}"
            )
        self._tensors = self.params.tensors()

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    @classmethod
    def from_files(
        cls,
        checkpoint: Union[str, Path],
        vocab: Union[str, Path],
        batch_size: int = settings.SERVING_BATCH_SIZE,
    ) -> "CrossEncoderModel":
        return cls(load_checkpoint(checkpoint), load_vocab(vocab), batch_size, name=Path(checkpoint).stem)

    def encode(self, query: str, docs: Sequence[str]) -> EncodedBatch:
        return encode_batch([(query, doc) for doc in docs], self.vocab, self.max_len)

    def score_encoded(self, batch: EncodedBatch) -> ScoreBatch:
        """Eval-mode scores in row order, run batch_size rows at a time"""
        s_plus, s_minus = [], []
        for start in range(0, len(batch), self.batch_size):
            chunk = batch.rows(start, start + self.batch_size).trimmed()
            logits = compute_logits(self._tensors, self.config, chunk).data
            s_plus.append(logits[:, 1])
            s_minus.append(logits[:, 0])
        if not s_plus:
            empty = np.zeros(0, dtype=np.float32)
            return ScoreBatch(empty, empty.copy())
        return ScoreBatch(np.concatenate(s_plus), np.concatenate(s_minus))

    def score(self, query: str, docs: Sequence[str]) -> np.ndarray:
        return self.score_encoded(self.encode(query, docs)).p_plus


def score_pairs(
    params: ModelParams,
    vocab: Vocab,
    query: str,
    docs: Sequence[str],
    batch_size: int = settings.SERVING_BATCH_SIZE,
    max_len: Optional[int] = None,
) -> List[float]:
    """p_plus for each (query, doc) in input order"""
    model = CrossEncoderModel(params, vocab, batch_size, max_len or 0)
    return [float(p) for p in model.score(query, docs)]
