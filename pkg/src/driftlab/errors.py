"""Exception types shared across the package."""


class DriftlabError(Exception):
    """Base class for every error raised by driftlab."""


class ShapeError(DriftlabError):
    """Tensor dimensions do not line up for the requested operation."""


class LabelError(DriftlabError):
    """A class label is outside the expected range."""


class OptimizerError(DriftlabError):
    """Optimizer invoked with missing or inconsistent gradients."""


class VocabularyError(DriftlabError):
    """A token id falls outside the model vocabulary."""


class CheckpointError(DriftlabError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint ends mid-record; no partial model is returned."""


class GenerationError(DriftlabError):
    """Corpus generation cannot satisfy its constraints."""


class IngestionError(DriftlabError):
    """A dataset file violates the ingestion format."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigurationError(DriftlabError):
    """A configuration value or key is invalid."""


class CompatibilityError(DriftlabError):
    """Artifacts built under different configs were mixed."""


class InputError(DriftlabError):
    """Metric or report inputs are incomplete or degenerate."""


class TrainingError(DriftlabError):
    """Training cannot proceed (empty data, etc.)."""


class TrainingDivergedError(TrainingError):
    """Loss became non-finite during training."""


class ArtifactError(DriftlabError):
    """A required run artifact is missing or unreadable."""


class StageFailure(DriftlabError):
    """A pipeline stage aborted; the message names the stage."""
