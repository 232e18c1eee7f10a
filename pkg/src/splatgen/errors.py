"""Exception hierarchy shared across the pipeline.

Each class carries an exit code so the CLI can map failures to stable,
scriptable categories.
"""


class SplatgenError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigError(SplatgenError):
    """Invalid configuration or arguments (bad shapes, ranges, unknown kinds)."""

    exit_code = 2


class DataFormatError(SplatgenError):
    """Malformed file contents (trajectory text, PLY, checkpoints, datasets)."""

    exit_code = 3


class MissingArtifactError(SplatgenError):
    """A referenced path (dataset, checkpoint, cloud) does not exist."""

    exit_code = 4


class NumericError(SplatgenError):
    """Non-finite values where finite ones are required (NaN gradients etc.)."""

    exit_code = 5


class DegenerateTrajectoryError(SplatgenError):
    """All cameras coincide with the first one; normalization is undefined."""

    exit_code = 6
