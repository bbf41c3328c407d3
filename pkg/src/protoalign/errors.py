"""Exception hierarchy.

Every error carries a short machine-parsable ``code`` and the exit code the
CLI should use (0 success, 1 runtime failure, 2 usage/prerequisite error).
"""


class ProtoAlignError(Exception):
    code = "runtime-error"
    exit_code = 1


# --- dataset / corpus loading ---

class ManifestError(ProtoAlignError):
    """Malformed or inconsistent dataset manifest."""

    code = "manifest-error"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SplitOverlapError(ManifestError):
    """A class id is assigned to more than one split."""

    code = "split-overlap"


class InsufficientExamplesError(ManifestError):
    """A class has fewer examples than the configured support+query size."""

    code = "insufficient-examples"


class DescriptionFileError(ProtoAlignError):
    """Bad description file: missing base class, ragged dims, mixed kinds."""

    code = "description-error"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


# --- episode sampling ---

class SamplingError(ProtoAlignError):
    code = "sampling-error"


# --- encoders ---

class UnknownArchitectureError(ProtoAlignError):
    code = "unknown-architecture"


class ShapeMismatchError(ProtoAlignError):
    code = "shape-mismatch"


class NonFiniteError(ProtoAlignError):
    """Non-finite activations or losses encountered."""

    code = "non-finite"


# --- objectives ---

class DegenerateVectorError(ProtoAlignError):
    """Zero-norm vector where a direction is required (cosine inputs)."""

    code = "degenerate-vector"


# --- checkpointing ---

class CheckpointError(ProtoAlignError):
    code = "checkpoint-error"


class CheckpointVersionError(CheckpointError):
    code = "checkpoint-version"


class CheckpointChecksumError(CheckpointError):
    code = "checkpoint-checksum"


# --- training ---

class TrainingDivergedError(ProtoAlignError):
    """Raised when a loss goes non-finite; points at the last good checkpoint."""

    code = "training-diverged"

    def __init__(self, message, last_good_checkpoint=None):
        if last_good_checkpoint is not None:
            message = f"{message} (last good checkpoint: {last_good_checkpoint})"
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


# --- cli / config ---

class ConfigError(ProtoAlignError):
    code = "config-error"
    exit_code = 2


class PrerequisiteError(ProtoAlignError):
    """A required input artifact (e.g. checkpoint) is missing."""

    code = "prerequisite-error"
    exit_code = 2


class OutputExistsError(ProtoAlignError):
    """Refusing to overwrite existing output without --force."""

    code = "output-exists"
    exit_code = 2
