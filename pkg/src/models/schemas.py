from datetime import datetime
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from config import settings


class ModelConfig(BaseModel):
    """Shape of a BERT-style cross-encoder"""
    model_config = ConfigDict(extra="forbid")

    n_layers: int = Field(ge=1)
    d_model: int = Field(ge=1)
    n_heads: int = Field(ge=1)
    d_ff: Optional[int] = None  # defaults to 4 * d_model
    vocab_size: int = Field(default=30522, ge=5)
    max_len: int = Field(default=512, ge=8)  # rows of the position table
    type_vocab_size: int = 2
    dropout: float = Field(default=settings.DROPOUT, ge=0.0, lt=1.0)
    pooler: bool = True

    @model_validator(mode="after")
    def check_shapes(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            shape = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})") from None
        fields = dict(shape)
        fields.update(overrides)
        return cls(**fields)


# Transformer Layers / Embedding Size / Attention Heads of the shallow BERT checkpoints
PRESETS: Dict[str, Dict[str, int]] = {
    "tiny": {"n_layers": 2, "d_model": 128, "n_heads": 2},
    "mini": {"n_layers": 4, "d_model": 256, "n_heads": 4},
    "small": {"n_layers": 4, "d_model": 512, "n_heads": 8},
}


class TrainConfig(BaseModel):
    """gBCE training run; JSON config files use exactly these key names"""
    model_config = ConfigDict(extra="forbid")

    batch_positives: int = Field(default=settings.BATCH_POSITIVES, ge=1)
    negatives_per_positive: int = Field(default=settings.NEGATIVES_PER_POSITIVE, ge=1)
    candidate_pool_size: int = Field(default=settings.CANDIDATE_POOL_SIZE, ge=1)
    calibration_t: float = Field(default=settings.CALIBRATION_T, ge=0.0, le=1.0)
    loss_kind: Literal["bce", "gbce"] = settings.LOSS_KIND
    lr: float = Field(default=settings.LEARNING_RATE, ge=0.0)
    weight_decay: float = Field(default=settings.WEIGHT_DECAY, ge=0.0)
    validation_every: int = Field(default=settings.VALIDATION_EVERY, ge=1)
    patience: int = Field(default=settings.PATIENCE, ge=1)
    validation_size: int = Field(default=settings.VALIDATION_SIZE, ge=1)
    validation_depth: int = Field(default=settings.VALIDATION_DEPTH, ge=1)
    seed: int = 0
    max_len: int = Field(default=settings.MAX_LEN, ge=8)
    max_steps: Optional[int] = Field(default=None, ge=1)
    prefetch_batches: int = Field(default=settings.PREFETCH_BATCHES, ge=0)
    loss_clamp: float = Field(default=settings.LOSS_CLAMP, gt=0.0, lt=0.5)

    @model_validator(mode="after")
    def check_pool(self):
        if self.negatives_per_positive > self.candidate_pool_size:
            raise ValueError(
                f"negatives_per_positive ({self.negatives_per_positive}) exceeds "
                f"candidate_pool_size ({self.candidate_pool_size})"
            )
        return self


class SamplingRate(BaseModel):
    alpha: float = Field(gt=0.0, le=1.0)
    beta: float


class LatencyProfile(BaseModel):
    """Measured per-stage costs; lambda_ms is the per-pair model time"""
    lambda_ms: float = Field(gt=0.0)
    first_stage_ms: float = Field(ge=0.0)
    tokenize_ms_per_pair: float = Field(ge=0.0)
    n_samples: int = 0
    warmup_runs: int = 0
    batch_size: int = Field(default=settings.SERVING_BATCH_SIZE, ge=1)
    timer_resolution_ms: float = 0.0
    timestamp: str = Field(default_factory=lambda: datetime.now().isoformat())
    model_name: Optional[str] = None
    warnings: List[str] = Field(default_factory=list)


class BudgetPlan(BaseModel):
    omega_ms: float
    k_max: int = Field(ge=0)
    fallback: Optional[Literal["passthrough"]] = None
    forced: bool = False  # depth fixed by the caller instead of derived from a profile


class LatencyRecord(BaseModel):
    query_id: str
    first_stage_ms: float
    tokenize_ms: float
    score_ms: float
    total_ms: float
    k_used: int


class TradeoffPoint(BaseModel):
    k: int = Field(ge=1)
    mean_latency_ms: float
    metric_value: float = Field(ge=0.0, le=1.0)
    metric_name: str


class TrainLogEntry(BaseModel):
    step: int
    train_loss: float
    val_metric: Optional[float] = None


class MetricReport(BaseModel):
    metric: str
    cutoff: int
    mean: float
    n_queries: int
    per_query: Dict[str, float] = Field(default_factory=dict)
    excluded: List[str] = Field(default_factory=list)


class ConfidenceRow(BaseModel):
    rank: int
    mean_p: float
    min_p: float
    max_p: float


class AblationCell(BaseModel):
    loss_kind: str
    negatives: int
    metric_name: str
    metric_value: float
    best_step: int
    steps: int


class CliConfig(BaseModel):
    """Contents of a --config JSON file; flags override these values"""
    model_config = ConfigDict(extra="forbid")

    corpus: Optional[str] = None
    queries: Optional[str] = None
    qrels: Optional[str] = None
    index: Optional[str] = None
    checkpoint: Optional[str] = None
    vocab: Optional[str] = None
    profile: Optional[str] = None
    run: Optional[str] = None
    run_dir: Optional[str] = None
    preset: Optional[str] = None
    train: Dict[str, Any] = Field(default_factory=dict)
    omega_ms: Optional[float] = Field(default=None, gt=0.0)
    k_grid: Optional[List[int]] = None
    depth: Optional[int] = Field(default=None, ge=0)
    n_retrieve: Optional[int] = Field(default=None, ge=1)
    batch_size: Optional[int] = Field(default=None, ge=1)
    metric: Optional[str] = None
    seed: Optional[int] = None
    threads: Optional[int] = Field(default=None, ge=1)

    @field_validator("k_grid")
    @classmethod
    def check_grid(cls, v):
        if v is None:
            return v
        if not v or any(k < 1 or k > 1000 for k in v) or v != sorted(v):
            raise ValueError("k_grid must be a non-empty ascending list within [1, 1000]")
        return v
