import asyncio
import hashlib
import importlib
import json
import logging
import math
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

from norms_align.errors import (
    CacheMiss, ConfigError, NetworkError, ProbabilityError, QueryError, StorageError,
)

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-9
# Providers round logprobs; an exp() total this close to 1 is renormalized instead of rejected.
ROUNDING_TOLERANCE = 1e-4
MAX_TOP_LOGPROBS = 20


class Source(Enum):
    """Where a token distribution came from."""
    LIVE = "live"
    REPLAY = "replay"
    MOCK = "mock"


@dataclass(frozen=True)
class BackendConfig:
    """One model endpoint and how to query it.

    Attributes:
        model: Model name sent to the endpoint.
        endpoint: Base URL of an OpenAI-compatible API (None uses the client default).
        temperature: Sampling temperature; 0 for reproducible runs.
        top_logprobs: Alternatives requested for the first token position.
        max_retries: Extra attempts after a failed one.
        retry_backoff: Seconds to wait before each retry; the last value repeats.
        concurrency: Maximum requests in flight.
        timeout: Request timeout in seconds.
        cache: JSONL file of recorded queries.
        api_key_env: Environment variable holding the API key.
    """
    model: str
    endpoint: Optional[str] = None
    temperature: float = 0.0
    top_logprobs: int = MAX_TOP_LOGPROBS
    max_retries: int = 3
    retry_backoff: Tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0)
    concurrency: int = 8
    timeout: float = 30.0
    cache: Optional[str] = None
    api_key_env: str = "OPENAI_API_KEY"

    def __post_init__(self):
        if not self.model:
            raise ConfigError("Backend needs a model name")
        if not 1 <= self.top_logprobs <= MAX_TOP_LOGPROBS:
            raise ConfigError(f"top_logprobs must be within 1..{MAX_TOP_LOGPROBS}, got {self.top_logprobs}")
        if self.max_retries < 0:
            raise ConfigError("max_retries must not be negative")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be at least 1")
        if not self.retry_backoff or any(d < 0 for d in self.retry_backoff):
            raise ConfigError("retry_backoff must be a non-empty list of non-negative delays")
        object.__setattr__(self, "retry_backoff", tuple(float(d) for d in self.retry_backoff))
        if self.temperature != 0:
            logger.warning("Backend %s uses temperature %s; only 0 gives reproducible ratings",
                           self.model, self.temperature)

    def backoff(self, attempt: int) -> float:
        """Delay before retry number ``attempt`` (0-based)."""
        return self.retry_backoff[min(attempt, len(self.retry_backoff) - 1)]

    @classmethod
    def from_dict(cls, data: Dict) -> "BackendConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"Unknown backend keys: {sorted(unknown)}")
        if "retry_backoff" in known:
            known["retry_backoff"] = tuple(known["retry_backoff"])
        return cls(**known)


def check_probabilities(entries: Dict[str, float]) -> None:
    """Raise ProbabilityError unless every p is in (0, 1] and the total is at most 1."""
    for token, p in entries.items():
        if not isinstance(p, (int, float)) or not math.isfinite(p) or not 0 < p <= 1:
            raise ProbabilityError(f"Probability of token {token!r} is {p}, expected (0, 1]")
    total = math.fsum(entries.values())
    if total > 1 + PROBABILITY_TOLERANCE:
        raise ProbabilityError(f"Token probabilities sum to {total!r}, more than 1")


@dataclass(frozen=True)
class TokenDistribution:
    """First-token alternatives and their probabilities (possibly truncated to top-k)."""
    entries: Dict[str, float]
    source: Source

    def __post_init__(self):
        check_probabilities(self.entries)

    @classmethod
    def from_logprobs(cls, pairs: List[Tuple[str, float]], source: Source = Source.LIVE) -> "TokenDistribution":
        """Build from (token, logprob) pairs; repeated token texts are summed.

        A total above 1 by no more than ROUNDING_TOLERANCE comes from rounded
        logprobs and is scaled back to 1. A larger excess raises ProbabilityError.
        """
        entries: Dict[str, float] = {}
        for token, logprob in pairs:
            p = math.exp(logprob)
            if p == 0.0:
                # underflow carries no mass
                continue
            entries[token] = entries.get(token, 0.0) + p
        total = math.fsum(entries.values())
        if 1 + PROBABILITY_TOLERANCE < total <= 1 + ROUNDING_TOLERANCE:
            logger.debug("Renormalizing first-token mass %r", total)
            entries = {token: p / total for token, p in entries.items()}
        return cls(entries, source)


def fingerprint(model: str, prompt: str, temperature: float, top_logprobs: int) -> str:
    """SHA-256 of the canonical request description; stable across versions."""
    canonical = json.dumps(
        {"model": model, "prompt": prompt, "temperature": float(temperature), "top_logprobs": int(top_logprobs)},
        sort_keys=True, separators=(",", ":"), ensure_ascii=False,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def request_fingerprint(config: BackendConfig, prompt: str) -> str:
    return fingerprint(config.model, prompt, config.temperature, config.top_logprobs)


@dataclass(frozen=True)
class QueryRecord:
    """One recorded query: what was asked and what came back.

    Live answers keep the raw (token, logprob) pairs of the wire so a replay
    goes through the same conversion, including its failures. Records written
    from a ready distribution keep its entries.
    """
    fingerprint: str
    model: str
    prompt: str
    temperature: float
    top_logprobs: int
    timestamp: str
    entries: Optional[Dict[str, float]] = None
    logprobs: Optional[Tuple[Tuple[str, float], ...]] = None

    def __post_init__(self):
        if (self.entries is None) == (self.logprobs is None):
            raise TypeError("QueryRecord needs exactly one of entries or logprobs")
        if self.entries is not None:
            check_probabilities(self.entries)

    @property
    def distribution(self) -> TokenDistribution:
        """The recorded answer; raises ProbabilityError for an invalid logprob record."""
        if self.logprobs is not None:
            return TokenDistribution.from_logprobs(list(self.logprobs), Source.REPLAY)
        return TokenDistribution(dict(self.entries), Source.REPLAY)

    def to_json(self) -> str:
        data = {
            "fingerprint": self.fingerprint,
            "model": self.model,
            "prompt": self.prompt,
            "temperature": self.temperature,
            "top_logprobs": self.top_logprobs,
        }
        if self.logprobs is not None:
            data["logprobs"] = [[token, logprob] for token, logprob in self.logprobs]
        else:
            data["entries"] = self.entries
        data["timestamp"] = self.timestamp
        return json.dumps(data, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "QueryRecord":
        data = json.loads(line)
        logprobs = data.get("logprobs")
        if logprobs is not None:
            logprobs = tuple((str(token), float(logprob)) for token, logprob in logprobs)
        return cls(
            fingerprint=data["fingerprint"],
            model=data["model"],
            prompt=data["prompt"],
            temperature=data["temperature"],
            top_logprobs=data["top_logprobs"],
            timestamp=data["timestamp"],
            entries=data.get("entries"),
            logprobs=logprobs,
        )


class QueryCache:
    """Append-only JSONL store of query records keyed by fingerprint.

    The whole file is read on open; reads are served from memory, writes are
    serialized and appended immediately so an interrupted run keeps its records.
    An unreadable final line is what a killed append leaves behind: it is cut
    off with a warning. Unreadable lines before it raise StorageError.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._records: Dict[str, QueryRecord] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            self._load()

    def _load(self):
        try:
            data = self.path.read_bytes()
        except OSError as e:
            raise StorageError(f"Cannot read cache {self.path.as_posix()}: {e}")
        lines = data.split(b"\n")
        if lines and lines[-1] == b"":
            lines.pop()
        offset = 0
        for line_no, raw in enumerate(lines, start=1):
            start, offset = offset, offset + len(raw) + 1
            if not raw.strip():
                continue
            try:
                record = QueryRecord.from_json(raw.decode("utf-8"))
            except (ValueError, KeyError, TypeError, ProbabilityError) as e:
                if line_no < len(lines):
                    raise StorageError(f"Corrupt cache record {self.path.as_posix()}:{line_no}: {e}")
                logger.warning("Dropping unreadable last record %s:%d (%s)", self.path.as_posix(), line_no, e)
                self._truncate(start)
                break
            self._records[record.fingerprint] = record
        else:
            if data and not data.endswith(b"\n"):
                self._append(b"\n")
        logger.debug("Loaded %d cached queries from %s", len(self._records), self.path.as_posix())

    def _truncate(self, size: int):
        try:
            with self.path.open("r+b") as f:
                f.truncate(size)
        except OSError as e:
            raise StorageError(f"Cannot repair cache {self.path.as_posix()}: {e}")

    def _append(self, data: bytes):
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("ab") as f:
                f.write(data)
                f.flush()
        except OSError as e:
            raise StorageError(f"Cannot write cache {self.path.as_posix()}: {e}")

    def __len__(self):
        return len(self._records)

    def __contains__(self, fp: str) -> bool:
        return fp in self._records

    def record(self, config: BackendConfig, prompt: str, distribution: TokenDistribution,
               timestamp: Optional[str] = None) -> QueryRecord:
        """Store a distribution for (config, prompt) and persist it."""
        return self._store(config, prompt, timestamp, entries=dict(distribution.entries))

    def record_logprobs(self, config: BackendConfig, prompt: str, pairs: List[Tuple[str, float]],
                        timestamp: Optional[str] = None) -> QueryRecord:
        """Store the raw first-token (token, logprob) pairs of a live answer, valid or not."""
        return self._store(config, prompt, timestamp,
                           logprobs=tuple((token, float(logprob)) for token, logprob in pairs))

    def _store(self, config: BackendConfig, prompt: str, timestamp: Optional[str], **answer) -> QueryRecord:
        if timestamp is None:
            timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
        record = QueryRecord(
            fingerprint=request_fingerprint(config, prompt),
            model=config.model,
            prompt=prompt,
            temperature=config.temperature,
            top_logprobs=config.top_logprobs,
            timestamp=timestamp,
            **answer,
        )
        with self._lock:
            self._append((record.to_json() + "\n").encode("utf-8"))
            self._records[record.fingerprint] = record
        return record

    def lookup(self, fp: str) -> QueryRecord:
        """Return the record of a fingerprint or raise CacheMiss."""
        try:
            return self._records[fp]
        except KeyError:
            raise CacheMiss(fp)


class Mode(Enum):
    """How rating backends obtain their distributions."""
    LIVE = "live"
    REPLAY = "replay"
    MOCK = "mock"


def parse_mode(value: str) -> Mode:
    try:
        return Mode(value)
    except ValueError:
        raise ConfigError(f"Invalid mode value: '{value}'. Must be one of {[e.value for e in Mode]}")


class Backend:
    """Base class of rating backends.

    Subclasses implement :meth:`fetch`, a single attempt returning the first-token
    distribution of a prompt. Retrying and batching live in this module.

    Attributes:
        config: BackendConfig of the model.
        issued: Requests sent to an endpoint (live only).
        cached: Prompts answered from the cache.
    """
    source: Source = Source.MOCK

    def __init__(self, config: BackendConfig):
        self.config = config
        self.issued = 0
        self.cached = 0

    async def fetch(self, prompt: str) -> TokenDistribution:
        raise NotImplementedError

    async def aclose(self) -> None:
        return


def load_backend(mode: Union[str, Mode], kwargs: Dict = None) -> Callable:
    """Load the ``backend`` factory of ``norms_align.backends.<mode>``, optionally binding kwargs."""
    mode = mode.value if isinstance(mode, Mode) else mode
    module_path = f"norms_align.backends.{mode}"
    try:
        module = importlib.import_module(module_path)
    except ImportError as e:
        raise ImportError(f"Failed to import module {module_path}: {e}")
    if not hasattr(module, "backend"):
        raise AttributeError(f"Module {module_path} does not have a 'backend' function.")
    return partial(module.backend, **kwargs) if kwargs else module.backend


async def query_first_token(backend: Backend, prompt: str) -> TokenDistribution:
    """Query one prompt, retrying network failures with the configured backoff.

    Raises:
        NetworkError: After 1 + max_retries failed attempts.
        LogprobsUnsupported, CacheMiss, BackendError: Immediately, without retry.
    """
    config = backend.config
    attempts = 1 + config.max_retries
    for attempt in range(attempts):
        try:
            return await backend.fetch(prompt)
        except NetworkError as e:
            if attempt + 1 >= attempts:
                raise NetworkError(f"{config.model}: giving up after {attempts} attempts: {e}") from e
            delay = config.backoff(attempt)
            logger.warning("%s: attempt %d/%d failed (%s), retrying in %.1fs",
                           config.model, attempt + 1, attempts, e, delay)
            await asyncio.sleep(delay)
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class BatchItem:
    """Outcome of one prompt of a batch: a distribution or the error that prevented it."""
    prompt: str
    distribution: Optional[TokenDistribution] = None
    error: Optional[Exception] = field(default=None, compare=False)

    @property
    def ok(self) -> bool:
        return self.distribution is not None


async def run_batch(backend: Backend, prompts: List[str]) -> List[BatchItem]:
    """Query all prompts with bounded concurrency; results keep the input order."""
    semaphore = asyncio.Semaphore(backend.config.concurrency)

    async def one(prompt: str) -> BatchItem:
        async with semaphore:
            try:
                return BatchItem(prompt, await query_first_token(backend, prompt))
            except CacheMiss as e:
                logger.debug("%s: %s", backend.config.model, e)
                return BatchItem(prompt, error=e)
            except (QueryError, ProbabilityError) as e:
                logger.warning("%s: %s: %s", backend.config.model, type(e).__name__, e)
                return BatchItem(prompt, error=e)

    return list(await asyncio.gather(*(one(p) for p in prompts)))
