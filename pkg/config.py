from typing import List
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Toolkit defaults, overridable from environment variables or a .env file"""

    # Logging
    LOG_LEVEL: str = "INFO"

    # First stage (Okapi BM25)
    BM25_K1: float = 1.2
    BM25_B: float = 0.75
    CANDIDATE_POOL_SIZE: int = 1000  # BM25 candidates for negative mining

    # Tokenization
    MAX_LEN: int = 256

    # Model
    DEFAULT_PRESET: str = "tiny"
    DROPOUT: float = 0.1
    INIT_STD: float = 0.02

    # gBCE training
    BATCH_POSITIVES: int = 8
    NEGATIVES_PER_POSITIVE: int = 128
    CALIBRATION_T: float = 0.75
    LOSS_KIND: str = "gbce"
    LEARNING_RATE: float = 3e-4
    WEIGHT_DECAY: float = 0.01
    VALIDATION_EVERY: int = 600  # batches between validations
    PATIENCE: int = 200  # validations without improvement
    VALIDATION_SIZE: int = 200  # held-out validation queries
    VALIDATION_DEPTH: int = 100  # BM25 candidates reranked during validation
    LOSS_CLAMP: float = 1e-7
    PREFETCH_BATCHES: int = 2

    # Budgeted serving
    SERVING_BATCH_SIZE: int = 8
    VALIDATION_BATCH_SIZE: int = 64
    CALIBRATION_SAMPLES: int = 30
    CALIBRATION_WARMUP: int = 5
    N_RETRIEVE: int = 1000
    RUN_TAG: str = "shallow-ce"

    # Evaluation
    METRIC_CUTOFF: int = 10
    LOW_LATENCY_CUTOFF_MS: float = 50.0
    SWEEP_GRID: List[int] = [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000]
    ABLATION_NEGATIVES: List[int] = [1, 2, 8, 32, 128]

    # Concurrency
    THREADS: int = 1

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True)


settings = Settings()
