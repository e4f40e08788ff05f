"""Exception hierarchy shared across the package.

ContractError subclasses signal violated call contracts (bad shapes, bad
vocab, bad alignments); ConfigError signals unusable configuration or
missing upstream artifacts; DivergenceError signals non-finite training
state. The CLI maps these to distinct exit codes.
"""


class AlvttsError(Exception):
    """Base class for all package errors."""


class ConfigError(AlvttsError):
    """Invalid configuration or missing prerequisite artifact."""


class ContractError(AlvttsError):
    """A call-level contract was violated."""


class ShapeError(ContractError):
    """Tensor/array dimensions do not match the declared contract."""


class VocabularyError(ContractError):
    """Unknown symbol: phoneme, dialect, speaker, or word."""


class OOVError(VocabularyError):
    """A word token is missing from the lexicon."""


class AlignmentError(ContractError):
    """Alignment spans violate ordering, coverage, or range constraints."""


class ManifestError(ContractError):
    """Manifest file is malformed or fails validation."""


class FormatError(ContractError):
    """Binary feature file has a bad header or mismatched dimensionality."""


class DegenerateContourError(ContractError):
    """Pitch contour has too few voiced frames or zero variance."""


class DurationError(ContractError):
    """A duration value is outside the allowed range."""


class LengthError(ContractError):
    """A sequence exceeds the model's maximum length."""


class InputError(ContractError):
    """An argument value is unusable (empty, missing labels, zero norm)."""


class NumericError(ContractError):
    """Non-finite values where finite ones are required."""


class CheckpointError(ConfigError):
    """Checkpoint is missing, malformed, or fails hash-chain validation."""


class DivergenceError(AlvttsError):
    """Training loss became non-finite."""


class TranslationError(AlvttsError):
    """A translation backend failed to produce a usable sentence."""
