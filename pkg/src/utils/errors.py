"""
Exception hierarchy shared by every toolkit module.
The CLI maps these onto exit codes (see main.py).
"""

from typing import Optional


class RerankToolkitError(Exception):
    """Base class for all toolkit failures"""


class ConfigError(RerankToolkitError):
    """Invalid or inconsistent configuration"""


class ParseError(RerankToolkitError):
    """Malformed input file line"""

    def __init__(self, message: str, path: Optional[str] = None, line_no: Optional[int] = None):
        self.path = path
        self.line_no = line_no
        location = ""
        if path is not None:
            location = f"{path}:"
        if line_no is not None:
            location += f"line {line_no}: "
        elif location:
            location += " "
        super().__init__(f"{location}{message}")


class CorpusError(RerankToolkitError):
    """Collection/query/qrels invariant violated"""


class RunFormatError(RerankToolkitError):
    """TREC run file violates the rank/score invariants"""


class IndexFormatError(RerankToolkitError):
    """Persisted index is corrupt or has an unsupported format version"""


class VocabError(RerankToolkitError):
    """Vocabulary file is missing required special tokens"""


class ShapeError(RerankToolkitError):
    """Operands of a tensor op have incompatible shapes"""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {rendered}")


class TapeError(RerankToolkitError):
    """Misuse of the autodiff tape"""


class ModelInputError(RerankToolkitError):
    """Model input outside the configured vocabulary or length"""


class CheckpointError(RerankToolkitError):
    """Checkpoint is truncated, corrupt or inconsistent with its config"""


class TrainingDivergedError(RerankToolkitError):
    """Training produced a non-finite loss"""

    def __init__(self, message: str, dump_path: Optional[str] = None):
        self.dump_path = dump_path
        if dump_path:
            message = f"{message} (batch dump: {dump_path})"
        super().__init__(message)


class BudgetError(RerankToolkitError):
    """Latency calibration or budgeting precondition violated"""
