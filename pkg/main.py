import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from colorama import Fore, Style
from colorama import init as colorama_init
from pydantic import ValidationError

from config import settings
from src import __version__
from src.models.collections import QuerySet
from src.models.schemas import CliConfig, ModelConfig, PRESETS, TrainConfig
from src.services import bm25_index, budget_reranker, corpus_io, cross_encoder, eval_harness, gbce_trainer, tokenizer
from src.utils.errors import ConfigError, RerankToolkitError

logger = logging.getLogger("main")

# Exit codes
EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

# TrainConfig fields reachable from flags: flag dest -> TrainConfig key
TRAIN_FLAGS = {
    "loss": "loss_kind",
    "negatives": "negatives_per_positive",
    "t": "calibration_t",
    "batch_positives": "batch_positives",
    "pool_size": "candidate_pool_size",
    "lr": "lr",
    "weight_decay": "weight_decay",
    "validation_every": "validation_every",
    "patience": "patience",
    "validation_size": "validation_size",
    "validation_depth": "validation_depth",
    "max_steps": "max_steps",
    "max_len": "max_len",
    "prefetch": "prefetch_batches",
}


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True
    )


def success(message: str) -> None:
    print(f"{Fore.GREEN}✅ {message}{Style.RESET_ALL}")


def fail(code: str, message: str, exit_code: int) -> int:
    """One machine-parseable line on stderr"""
    print(json.dumps({"status": "error", "error": code, "message": message}), file=sys.stderr)
    return exit_code


class MissingInputError(RerankToolkitError):
    """A required input file does not exist"""


# ---------------------------------------------------------------------------
# config resolution: flags > --config file > defaults
# ---------------------------------------------------------------------------

class Resolver:
    def __init__(self, args: argparse.Namespace, config: CliConfig):
        self.args = args
        self.config = config

    def get(self, name: str, default: Any = None) -> Any:
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        value = getattr(self.config, name, None)
        return default if value is None else value

    def path(self, name: str, must_exist: bool = True) -> Path:
        value = self.get(name)
        if value is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required for `{self.args.command}`")
        path = Path(value)
        if must_exist and not path.exists():
            raise MissingInputError(f"{name.replace('_', ' ')} file not found: {path}")
        return path

    def optional_path(self, name: str) -> Optional[Path]:
        return self.path(name) if self.get(name) is not None else None

    def run_dir(self) -> Path:
        run_dir = self.path("run_dir", must_exist=False)
        run_dir.mkdir(parents=True, exist_ok=True)
        return run_dir

    @property
    def seed(self) -> int:
        return int(self.get("seed", 0))

    @property
    def threads(self) -> int:
        return int(self.get("threads", settings.THREADS))

    def train_config(self) -> TrainConfig:
        fields: Dict[str, Any] = dict(self.config.train)
        for flag, key in TRAIN_FLAGS.items():
            value = getattr(self.args, flag, None)
            if value is not None:
                fields[key] = value
        fields["seed"] = self.seed
        return TrainConfig(**fields)


def load_cli_config(path: Optional[str]) -> CliConfig:
    if path is None:
        return CliConfig()
    config_path = Path(path)
    if not config_path.exists():
        raise MissingInputError(f"config file not found: {config_path}")
    return CliConfig.model_validate_json(config_path.read_text(encoding="utf-8"))


def parse_int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_str_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


# ---------------------------------------------------------------------------
# shared loaders
# ---------------------------------------------------------------------------

def load_model(r: Resolver, batch_size: Optional[int] = None) -> cross_encoder.CrossEncoderModel:
    return cross_encoder.CrossEncoderModel.from_files(
        r.path("checkpoint"), r.path("vocab"), batch_size or r.get("batch_size", settings.SERVING_BATCH_SIZE)
    )


def model_config_for(r: Resolver, vocab: tokenizer.Vocab) -> ModelConfig:
    overrides = {"vocab_size": vocab.vocab_size}
    for flag, key in (("layers", "n_layers"), ("d_model", "d_model"), ("heads", "n_heads"), ("d_ff", "d_ff")):
        value = getattr(r.args, flag, None)
        if value is not None:
            overrides[key] = value
    preset = r.get("preset", settings.DEFAULT_PRESET)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
    return ModelConfig.preset(preset, **overrides)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_build_index(r: Resolver) -> None:
    corpus = corpus_io.load_collection(r.path("corpus"))
    index = bm25_index.build_index(corpus)
    out = r.run_dir() / "index.bin"
    bm25_index.save_index(index, out)
    success(f"Index of {index.n_docs} documents written to {out}")


def cmd_synth(r: Resolver) -> None:
    data = corpus_io.generate_synthetic(
        seed=r.seed,
        n_docs=r.args.n_docs,
        n_queries=r.args.n_queries,
        vocab_size=r.args.vocab_size,
        relevant_per_query=r.args.relevant_per_query,
    )
    run_dir = r.run_dir()
    corpus_io.write_collection(data.corpus, run_dir / "collection.tsv")
    corpus_io.write_queries(data.queries, run_dir / "queries.tsv")
    corpus_io.write_qrels(data.qrels, run_dir / "qrels.txt")
    tokenizer.write_vocab(tokenizer.build_vocab(data.terms), run_dir / "vocab.txt")
    if r.args.holdout:
        kept, held_out = corpus_io.split_queries(data.queries, r.args.holdout, r.seed)
        corpus_io.write_queries(kept, run_dir / "queries.train.tsv")
        corpus_io.write_queries(held_out, run_dir / "queries.test.tsv")
    success(f"Synthetic corpus ({len(data.corpus)} docs, {len(data.queries)} queries) written to {run_dir}")


def _training_inputs(r: Resolver):
    corpus = corpus_io.load_collection(r.path("corpus"))
    queries = corpus_io.load_queries(r.path("queries"))
    qrels = corpus_io.load_qrels(r.path("qrels"))
    index = bm25_index.load_index(r.path("index"))
    vocab = tokenizer.load_vocab(r.path("vocab"))
    report = corpus_io.validate(corpus, queries, qrels)
    if report.missing_docs:
        logger.warning(f"⚠️ {len(report.missing_docs)} judged documents are not in the collection")
    return corpus, queries, qrels, index, vocab


def cmd_train(r: Resolver) -> None:
    corpus, queries, qrels, index, vocab = _training_inputs(r)
    model_config = model_config_for(r, vocab)
    train_config = r.train_config()
    run_dir = r.run_dir()
    (run_dir / "train_config.json").write_text(train_config.model_dump_json(indent=2) + "\n", encoding="utf-8")
    result = gbce_trainer.train(
        corpus, queries, qrels, index, model_config, train_config, vocab, run_dir=run_dir,
        metric=r.get("metric", "ndcg@10"),
    )
    cross_encoder.save_checkpoint(result.params, run_dir / "checkpoint.bin")
    gbce_trainer.write_train_log(result.log, run_dir / "train_log.csv", result.metric)
    success(f"Trained {result.steps} steps; best val {result.metric} {result.best_metric:.4f} at step {result.best_step}")


def cmd_ablate(r: Resolver) -> None:
    corpus, queries, qrels, index, vocab = _training_inputs(r)
    eval_path = r.optional_path("eval_queries")
    if eval_path is not None:
        eval_queries = corpus_io.load_queries(eval_path)
    else:
        queries, eval_queries = corpus_io.split_queries(queries, max(1, len(queries) // 5), r.seed)
    run_dir = r.run_dir()
    cells = gbce_trainer.ablation_grid(
        corpus, queries, qrels, index, model_config_for(r, vocab), r.train_config(), vocab,
        eval_queries=eval_queries,
        loss_kinds=r.args.losses,
        negative_counts=r.args.negatives_grid,
        metric=r.get("metric", "ndcg@10"),
        run_dir=run_dir,
    )
    gbce_trainer.write_ablation_csv(cells, run_dir / "ablation.csv")
    (run_dir / "ablation.json").write_text(
        json.dumps([c.model_dump() for c in cells], indent=2) + "\n", encoding="utf-8"
    )
    success(f"Ablation of {len(cells)} cells written to {run_dir / 'ablation.csv'}")


def cmd_calibrate(r: Resolver) -> None:
    corpus = corpus_io.load_collection(r.path("corpus"))
    queries = corpus_io.load_queries(r.path("queries"))
    index = bm25_index.load_index(r.path("index"))
    batch_size = r.get("batch_size", settings.SERVING_BATCH_SIZE)
    if getattr(r.args, "preset", None) is not None and r.get("checkpoint") is None:
        vocab = tokenizer.load_vocab(r.path("vocab"))
        params = cross_encoder.init_params(model_config_for(r, vocab), r.seed)
        model = cross_encoder.CrossEncoderModel(params, vocab, batch_size, name=r.args.preset)
    else:
        model = load_model(r, batch_size)
    profile = budget_reranker.BudgetReranker(model, index, corpus).calibrate(
        queries, batch_size=batch_size, n_retrieve=r.get("n_retrieve", settings.N_RETRIEVE)
    )
    out = r.run_dir() / "profile.json"
    budget_reranker.save_profile(profile, out)
    success(f"lambda = {profile.lambda_ms:.4f} ms/pair; profile written to {out}")


def cmd_rerank(r: Resolver) -> None:
    corpus = corpus_io.load_collection(r.path("corpus"))
    queries = corpus_io.load_queries(r.path("queries"))
    index = bm25_index.load_index(r.path("index"))
    model = load_model(r)
    depth = r.get("depth")
    omega = r.get("omega_ms")
    if depth is not None:
        plan = budget_reranker.plan_fixed_depth(depth)
    elif omega is not None:
        plan = budget_reranker.plan_budget(budget_reranker.load_profile(r.path("profile")), omega)
    else:
        raise ConfigError("rerank needs either --depth or --omega with --profile")

    record_latency = not r.args.no_latency
    run, records = budget_reranker.BudgetReranker(model, index, corpus).run(
        queries, plan,
        n_retrieve=r.get("n_retrieve", settings.N_RETRIEVE),
        record_latency=record_latency,
        threads=1 if record_latency else r.threads,
    )
    run_dir = r.run_dir()
    corpus_io.write_run(run, run_dir / "run.txt")
    if records:
        budget_reranker.write_latency_records(records, run_dir / "latency.csv")
    qrels_path = r.optional_path("qrels")
    if qrels_path is not None:
        reports = eval_harness.evaluate_run(run, corpus_io.load_qrels(qrels_path))
        _write_reports(reports, run_dir / "metrics.json")
    success(f"Reranked {len(queries)} queries at k_max={plan.k_max}; run written to {run_dir / 'run.txt'}")


def _write_reports(reports: Dict[str, Any], path: Path) -> None:
    path.write_text(
        json.dumps({name: report.model_dump() for name, report in reports.items()}, indent=2) + "\n",
        encoding="utf-8",
    )
    for name, report in reports.items():
        print(f"{Fore.CYAN}{name}{Style.RESET_ALL} = {report.mean:.6f} over {report.n_queries} queries")


def cmd_evaluate(r: Resolver) -> None:
    run = corpus_io.read_run(r.path("run"))
    qrels = corpus_io.load_qrels(r.path("qrels"))
    metrics = r.args.metrics or [r.get("metric", "ndcg@10"), "mrr@10"]
    reports = eval_harness.evaluate_run(run, qrels, list(dict.fromkeys(metrics)))
    out = r.run_dir() / "metrics.json"
    _write_reports(reports, out)
    success(f"Metrics written to {out}")


def cmd_sweep(r: Resolver) -> None:
    corpus = corpus_io.load_collection(r.path("corpus"))
    queries = corpus_io.load_queries(r.path("queries"))
    qrels = corpus_io.load_qrels(r.path("qrels"))
    index = bm25_index.load_index(r.path("index"))
    model = load_model(r)
    k_grid = r.get("k_grid", list(settings.SWEEP_GRID))
    run_dir = r.run_dir()
    metric = r.get("metric", "ndcg@10")
    points = eval_harness.sweep(model, index, corpus, queries, qrels, k_grid, metric, run_dir / "tradeoff.csv")
    eval_harness.plot_tradeoff({model.name or "model": points}, run_dir / "tradeoff.svg", r.args.cutoff_ms)
    omega = r.get("omega_ms")
    if omega is not None:
        best = eval_harness.best_within_budget(points, omega)
        if best is None:
            print(f"{Fore.YELLOW}⚠️ no sweep point fits within {omega} ms{Style.RESET_ALL}")
        else:
            print(f"Best within {omega} ms: K={best.k}, {metric}={best.metric_value:.4f} ({best.mean_latency_ms:.2f} ms)")
    success(f"Sweep of {len(points)} points written to {run_dir / 'tradeoff.csv'}")


def cmd_probe_confidence(r: Resolver) -> None:
    corpus = corpus_io.load_collection(r.path("corpus"))
    queries = corpus_io.load_queries(r.path("queries"))
    index = bm25_index.load_index(r.path("index"))
    model = load_model(r)
    out = r.run_dir() / "confidence.csv"
    rows = eval_harness.probe_confidence(model, index, corpus, queries, r.get("depth", 100), out)
    if rows:
        print(f"rank-1 mean p_plus = {rows[0].mean_p:.6f}")
    success(f"Confidence table ({len(rows)} ranks) written to {out}")


COMMANDS: Dict[str, Callable[[Resolver], None]] = {
    "build-index": cmd_build_index,
    "synth": cmd_synth,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "calibrate": cmd_calibrate,
    "rerank": cmd_rerank,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "probe-confidence": cmd_probe_confidence,
}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _flag(parser: argparse.ArgumentParser, name: str, default: Any = None, help: str = "", **kwargs) -> None:
    """Options default to None so --config values can fill them; help shows the effective default"""
    shown = f" (default: {default})" if default is not None else ""
    parser.add_argument(name, default=None, help=f"{help}{shown}", **kwargs)


def _paths(parser: argparse.ArgumentParser, *names: str) -> None:
    for name in names:
        _flag(parser, f"--{name}", help=f"path to the {name.replace('-', ' ')} file")


def _run_dir(parser: argparse.ArgumentParser) -> None:
    _flag(parser, "--run-dir", help="directory receiving every output of this command")


def _model_shape(parser: argparse.ArgumentParser) -> None:
    _flag(parser, "--preset", settings.DEFAULT_PRESET, "model shape preset", choices=sorted(PRESETS))
    _flag(parser, "--layers", help="override the preset's transformer layers", type=int)
    _flag(parser, "--d-model", help="override the preset's embedding size", type=int)
    _flag(parser, "--heads", help="override the preset's attention heads", type=int)
    _flag(parser, "--d-ff", help="feed-forward inner size", default=None, type=int)


def _train_flags(parser: argparse.ArgumentParser) -> None:
    _flag(parser, "--loss", settings.LOSS_KIND, "loss function", choices=["bce", "gbce"])
    _flag(parser, "--negatives", settings.NEGATIVES_PER_POSITIVE, "negatives per positive (k)", type=int)
    _flag(parser, "--t", settings.CALIBRATION_T, "gBCE calibration parameter t", type=float)
    _flag(parser, "--batch-positives", settings.BATCH_POSITIVES, "positives per batch (B)", type=int)
    _flag(parser, "--pool-size", settings.CANDIDATE_POOL_SIZE, "BM25 candidate pool for negatives", type=int)
    _flag(parser, "--lr", settings.LEARNING_RATE, "AdamW learning rate", type=float)
    _flag(parser, "--weight-decay", settings.WEIGHT_DECAY, "AdamW decoupled weight decay", type=float)
    _flag(parser, "--validation-every", settings.VALIDATION_EVERY, "batches between validations", type=int)
    _flag(parser, "--patience", settings.PATIENCE, "validations without improvement before stopping", type=int)
    _flag(parser, "--validation-size", settings.VALIDATION_SIZE, "held-out validation queries", type=int)
    _flag(parser, "--validation-depth", settings.VALIDATION_DEPTH, "candidates reranked per validation query", type=int)
    _flag(parser, "--max-steps", help="stop after this many batches", type=int)
    _flag(parser, "--max-len", settings.MAX_LEN, "token length of an encoded pair", type=int)
    _flag(parser, "--prefetch", settings.PREFETCH_BATCHES, "batches built ahead on a worker thread (0 = inline)", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shallow-rerank",
        description="Latency-budgeted shallow cross-encoder reranking with gBCE training",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=(
            f"%(prog)s {__version__} (index format {bm25_index.INDEX_FORMAT_VERSION}, "
            f"checkpoint format {cross_encoder.CHECKPOINT_FORMAT_VERSION})"
        ),
    )
    # accepted by every subcommand, after its name
    common = argparse.ArgumentParser(add_help=False)
    _flag(common, "--seed", 0, "seed for every random choice", type=int)
    _flag(common, "--threads", settings.THREADS, "worker cap for untimed runs (timed runs use 1)", type=int)
    _flag(common, "--config", help="JSON config file; flags override its values")
    common.add_argument("--log-level", default=settings.LOG_LEVEL, help=f"logging level (default: {settings.LOG_LEVEL})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", parents=[common], help="build and save the BM25 index of a collection")
    _paths(p, "corpus")
    _run_dir(p)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic collection, queries, qrels and vocab")
    p.add_argument("--n-docs", type=int, default=2000, help="documents (default: 2000)")
    p.add_argument("--n-queries", type=int, default=50, help="queries (default: 50)")
    p.add_argument("--vocab-size", type=int, default=200, help="distinct terms (default: 200)")
    p.add_argument("--relevant-per-query", type=int, default=3, help="planted relevant docs per query (default: 3)")
    p.add_argument("--holdout", type=int, default=0, help="queries held out into queries.test.tsv (default: 0)")
    _run_dir(p)

    p = sub.add_parser("train", parents=[common], help="train a cross-encoder with BCE/gBCE and early stopping")
    _paths(p, "corpus", "queries", "qrels", "index", "vocab")
    _model_shape(p)
    _train_flags(p)
    _flag(p, "--metric", "ndcg@10", "validation metric for early stopping (ndcg@k or mrr@k)")
    _run_dir(p)

    p = sub.add_parser("ablate", parents=[common], help="train one model per (loss, negatives) cell")
    _paths(p, "corpus", "queries", "qrels", "index", "vocab", "eval-queries")
    _model_shape(p)
    _train_flags(p)
    p.add_argument("--losses", type=parse_str_list, default=["bce", "gbce"], help="loss kinds (default: bce,gbce)")
    p.add_argument(
        "--negatives-grid", type=parse_int_list, default=list(settings.ABLATION_NEGATIVES),
        help=f"negative counts (default: {','.join(map(str, settings.ABLATION_NEGATIVES))})",
    )
    _flag(p, "--metric", "ndcg@10", "metric reported per cell (ndcg@k or mrr@k)")
    _run_dir(p)

    p = sub.add_parser("calibrate", parents=[common], help="measure per-pair latency and write a latency profile")
    _paths(p, "corpus", "queries", "index", "checkpoint", "vocab")
    _flag(p, "--preset", help="profile an untrained preset instead of a checkpoint", choices=sorted(PRESETS))
    _flag(p, "--batch-size", settings.SERVING_BATCH_SIZE, "serving batch size", type=int)
    _flag(p, "--n-retrieve", settings.N_RETRIEVE, "BM25 candidates retrieved per query", type=int)
    _run_dir(p)

    p = sub.add_parser("rerank", parents=[common], help="rerank queries under a latency budget or at a fixed depth")
    _paths(p, "corpus", "queries", "index", "checkpoint", "vocab", "profile", "qrels")
    _flag(p, "--omega", help="per-query latency budget in ms (needs --profile)", type=float, dest="omega_ms")
    _flag(p, "--depth", help="fixed rerank depth K instead of a budget", type=int)
    _flag(p, "--n-retrieve", settings.N_RETRIEVE, "BM25 candidates retrieved per query", type=int)
    _flag(p, "--batch-size", settings.SERVING_BATCH_SIZE, "serving batch size", type=int)
    p.add_argument("--no-latency", action="store_true", help="skip latency records and use --threads workers")
    _run_dir(p)

    p = sub.add_parser("evaluate", parents=[common], help="NDCG/MRR of a run file")
    _paths(p, "run", "qrels")
    p.add_argument("--metrics", type=parse_str_list, default=None, help="metrics to report (default: ndcg@10,mrr@10)")
    _flag(p, "--metric", "ndcg@10", "primary metric when --metrics is not given")
    _run_dir(p)

    p = sub.add_parser("sweep", parents=[common], help="latency/effectiveness over a grid of rerank depths")
    _paths(p, "corpus", "queries", "qrels", "index", "checkpoint", "vocab")
    _flag(p, "--k-grid", ",".join(map(str, settings.SWEEP_GRID)), "rerank depths", type=parse_int_list)
    _flag(p, "--metric", "ndcg@10", "metric on the y axis (ndcg@k or mrr@k)")
    _flag(p, "--omega", help="report the best point within this budget (ms)", type=float, dest="omega_ms")
    p.add_argument(
        "--cutoff-ms", type=float, default=settings.LOW_LATENCY_CUTOFF_MS,
        help=f"low-latency zone shaded on the plot (default: {settings.LOW_LATENCY_CUTOFF_MS})",
    )
    _flag(p, "--batch-size", settings.SERVING_BATCH_SIZE, "serving batch size", type=int)
    _run_dir(p)

    p = sub.add_parser("probe-confidence", parents=[common], help="mean/min/max p_plus per rank")
    _paths(p, "corpus", "queries", "index", "checkpoint", "vocab")
    _flag(p, "--depth", 100, "candidates reranked per query", type=int)
    _flag(p, "--batch-size", settings.SERVING_BATCH_SIZE, "serving batch size", type=int)
    _run_dir(p)
    return parser


def _validation_summary(error: ValidationError) -> str:
    summary = []
    for err in error.errors():
        field_path = " -> ".join(str(loc) for loc in err.get("loc", []))
        summary.append(f"{field_path}: {err.get('msg', '')}")
    return "; ".join(summary[:5])


def main(argv: Optional[Sequence[str]] = None) -> int:
    colorama_init()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        resolver = Resolver(args, load_cli_config(args.config))
        COMMANDS[args.command](resolver)
        return EXIT_OK
    except (MissingInputError, FileNotFoundError) as e:
        return fail("MISSING_FILE", str(e), EXIT_USAGE)
    except ValidationError as e:
        return fail("INVALID_CONFIG", _validation_summary(e), EXIT_USAGE)
    except ConfigError as e:
        return fail("INVALID_CONFIG", str(e), EXIT_USAGE)
    except RerankToolkitError as e:
        code = "".join("_" + c if c.isupper() else c for c in type(e).__name__).lstrip("_").upper()
        return fail(code, str(e), EXIT_RUNTIME)
    except Exception as e:
        logger.exception("Unhandled failure")
        return fail("RUNTIME_ERROR", f"{type(e).__name__}: {e}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
