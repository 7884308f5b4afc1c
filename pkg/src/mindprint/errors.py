"""Exception hierarchy shared by the library and the command line."""


class MindprintError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(MindprintError, ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(MindprintError, ValueError):
    """Input data cannot support the requested operation (CLI exit code 3)."""


class MissingArtifactError(DataError):
    """A stage was run before the stage that produces its inputs."""

    def __init__(self, path, producer):
        self.path = path
        self.producer = producer
        super().__init__(
            f"missing artifact {path}; run `mindprint {producer}` first"
        )


class DegenerateUserError(DataError):
    """A user whose activity span collapses to a single instant."""


class TrainingDivergedError(DataError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
