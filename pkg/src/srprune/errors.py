"""Error hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI uses for it, so that
scripts driving `srprune` can tell failure classes apart.
"""


class SRPruneError(Exception):
    """Base class for every error raised deliberately by srprune."""

    exit_code = 1


class ConfigError(SRPruneError, ValueError):
    """Invalid configuration, architecture spec or option combination."""

    exit_code = 2


class ArgumentError(SRPruneError, ValueError):
    """An argument is out of range or inconsistent with the model."""

    exit_code = 3


class CompatibilityError(ArgumentError):
    """A unit cannot be removed without breaking the feedforward mapping."""

    exit_code = 4


class FormatError(SRPruneError):
    """A checkpoint or artifact file is corrupt or has the wrong version."""

    exit_code = 5


class IngestionError(SRPruneError):
    """Dataset files are missing or unreadable."""

    exit_code = 6


class TrainingError(SRPruneError):
    """Training diverged."""

    exit_code = 7

    def __init__(self, epoch: int, loss: float) -> None:
        """Record the epoch at which the loss became non-finite.

        Args:
            epoch: 1-based epoch number
            loss: The offending loss value

        """
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"Non-finite training loss {loss} at epoch {epoch}")


class InsufficientDataError(SRPruneError, ValueError):
    """Not enough data points for the requested computation."""

    exit_code = 8


class DependencyError(SRPruneError):
    """An upstream pipeline artifact is missing."""

    exit_code = 9

    def __init__(self, path: object, produced_by: str) -> None:
        """Name the missing file and the subcommand that writes it.

        Args:
            path: Path of the missing artifact
            produced_by: Subcommand that produces the artifact

        """
        self.path = path
        self.produced_by = produced_by
        super().__init__(
            f"Missing upstream artifact {path} (run `srprune {produced_by}` first)",
        )
