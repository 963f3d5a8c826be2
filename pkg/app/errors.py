class SambaError(Exception):
    """Base class for every error raised by the ASR stack."""


class ShapeError(SambaError):
    """Operand shapes do not satisfy an operation's contract."""


class ContractError(SambaError):
    """A documented precondition was violated."""


class NumericError(SambaError):
    """A non-finite value appeared where a finite one is required."""


class UndefinedLossError(SambaError):
    """Every target position was ignored, so the mean loss is undefined."""


class IngestError(SambaError):
    """Audio file could not be ingested."""


class MalformedHeaderError(IngestError):
    pass


class UnsupportedCodecError(IngestError):
    pass


class TruncatedDataError(IngestError):
    pass


class VocabError(SambaError):
    """Token id outside the vocabulary, or vocabulary file mismatch."""


class LengthError(SambaError):
    """Token sequence longer than the model's positional table."""


class ConfigError(SambaError):
    """Invalid configuration value or file."""


class TrainingDivergenceError(SambaError):
    """Loss or gradients became non-finite during training."""


class CheckpointError(SambaError):
    """Checkpoint file is missing, truncated or from another format."""


class ManifestError(SambaError):
    """Manifest file could not be parsed."""
