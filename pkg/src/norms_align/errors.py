class NormsAlignError(Exception):
    """Base class for every error raised by norms-align."""


class ConfigError(NormsAlignError, ValueError):
    """Run configuration is inconsistent or incomplete."""


# -- norms-core ---------------------------------------------------------------

class EmptyWord(NormsAlignError, ValueError):
    """A blank word was passed where a stimulus is required."""


class RegistryError(NormsAlignError, ValueError):
    """A feature definition breaks one of the registry rules."""


# -- ingest -------------------------------------------------------------------

class FileUnreadable(NormsAlignError, OSError):
    """A norm table cannot be opened or parsed as CSV."""


class MissingColumn(NormsAlignError, KeyError):
    """A mapped column is absent from a norm table header."""

    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"Missing column '{self.name}'"


class NotEnoughWords(NormsAlignError, ValueError):
    """A sample larger than the available word list was requested."""


# -- llm-client ---------------------------------------------------------------

class QueryError(NormsAlignError):
    """A single prompt could not be turned into a token distribution."""


class NetworkError(QueryError):
    """The endpoint could not be reached (retries exhausted)."""


class LogprobsUnsupported(QueryError):
    """The endpoint answered without first-token alternatives."""


class CacheMiss(QueryError, KeyError):
    """Replay mode found no record for a fingerprint."""

    def __str__(self):
        return f"No cached record for fingerprint {self.args[0]}" if self.args else "No cached record"


class BackendError(QueryError):
    """The endpoint rejected the request (not retried)."""


class StorageError(NormsAlignError, OSError):
    """The query cache cannot be read or written."""


class ProbabilityError(NormsAlignError, ValueError):
    """A token distribution breaks the probability sanity rules."""


# -- estimator / metrics / report --------------------------------------------

class NoValidToken(NormsAlignError, ValueError):
    """No probability mass landed on a valid scale token."""


class LengthMismatch(NormsAlignError, ValueError):
    """Paired series have different lengths."""


class TooFewPairs(NormsAlignError, ValueError):
    """Not enough paired observations to compute alignment."""


class TooFewAxes(NormsAlignError, ValueError):
    """A radar chart needs at least three axes."""
