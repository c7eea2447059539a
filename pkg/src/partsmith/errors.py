"""Exception hierarchy shared across the toolkit.

Validation-type errors map to CLI exit code 1, dependency/backend errors
to exit code 2.
"""


class PartsmithError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(PartsmithError):
    """Input violates a documented precondition or invariant."""


class FormatError(ValidationError):
    """A file does not carry the expected magic/version header."""


class CorruptionError(ValidationError):
    """A file's payload disagrees with its header or checksum."""


class CapacityError(ValidationError):
    """Not enough data to satisfy the requested configuration."""


class DegenerateClusteringError(PartsmithError):
    """Clustering could not produce the requested number of non-empty
    clusters after all restarts. Carries tier/channel context."""

    def __init__(self, message: str, tier: str = "", channel: int | None = None):
        super().__init__(message)
        self.tier = tier
        self.channel = channel


class DependencyError(PartsmithError):
    """An optional external dependency (adapter, backend) is unavailable."""


class BackendUnavailableError(DependencyError):
    """A denoiser backend cannot be reached or refused the protocol."""


class UnsupportedError(PartsmithError):
    """The requested operation is not supported by this backend/object."""


class NonFiniteTensorError(ValidationError):
    """A tensor that must be finite contained NaN/Inf."""


class NonFiniteLossError(PartsmithError):
    """Training aborted on a non-finite loss. Carries the dump path."""

    def __init__(self, message: str, dump_path: str = ""):
        super().__init__(message)
        self.dump_path = dump_path
