"""Exception hierarchy shared by every module."""


class ScatSimCLRError(Exception):
    """Base class for all errors raised by scatsimclr."""


class ConfigurationError(ScatSimCLRError, ValueError):
    """A configuration value is outside what the pipeline can run with."""


class ContractViolation(ScatSimCLRError, ValueError):
    """An operation was called with inputs that break its preconditions."""


class ShapeMismatchError(ContractViolation):
    """A stored parameter does not fit the parameter it is loaded into."""


class DatasetError(ScatSimCLRError):
    """A dataset directory could not be ingested."""


class CheckpointError(ScatSimCLRError):
    pass


class ChecksumError(CheckpointError):
    """A checkpoint container is truncated or its digest does not match."""


class CheckpointVersionError(CheckpointError):
    pass


class FeatureFileError(ScatSimCLRError):
    pass


class TrainingDiverged(ScatSimCLRError):
    """A loss or gradient became non-finite during optimization."""


class UsageError(ScatSimCLRError):
    """Bad command-line usage; the CLI exits with status 1."""
