import asyncio
import logging
import math
import sys
import pytest
from pathlib import Path
from unittest.mock import AsyncMock, patch

sys.path.append(str(Path(__file__).parent.parent / "src"))

from norms_align.backends.mock import MockBackend
from norms_align.backends.replay import ReplayBackend
from norms_align.client import (
    PROBABILITY_TOLERANCE, Backend, BackendConfig, Mode, QueryCache, Source, TokenDistribution, fingerprint,
    load_backend, parse_mode, query_first_token, request_fingerprint, run_batch,
)
from norms_align.errors import (
    BackendError, CacheMiss, ConfigError, NetworkError, ProbabilityError, StorageError,
)

pytest_plugins = ('pytest_asyncio',)


@pytest.fixture
def config():
    """Backend config without retry delays."""
    return BackendConfig(model="gpt-4o", retry_backoff=(0.0,), concurrency=4)


class FlakyBackend(Backend):
    """Fails a prompt a given number of times before answering."""

    def __init__(self, config, failures):
        super().__init__(config)
        self.failures = dict(failures)
        self.calls = []

    async def fetch(self, prompt):
        self.calls.append(prompt)
        if self.failures.get(prompt, 0) > 0:
            self.failures[prompt] -= 1
            raise NetworkError("connection reset")
        return TokenDistribution({"5": 1.0}, Source.MOCK)


class SlowBackend(Backend):
    """Answers with the prompt's digit after a prompt-dependent delay, tracking concurrency."""

    def __init__(self, config):
        super().__init__(config)
        self.in_flight = 0
        self.max_in_flight = 0

    async def fetch(self, prompt):
        self.in_flight += 1
        self.max_in_flight = max(self.max_in_flight, self.in_flight)
        await asyncio.sleep(0.001 * (9 - int(prompt)))
        self.in_flight -= 1
        return TokenDistribution({prompt: 1.0}, Source.MOCK)


def test_fingerprint_golden():
    """Test fingerprints are stable: caches recorded today must replay tomorrow."""
    assert fingerprint("gpt-4o", "hello", 0, 20) == \
        "cdb5bcdc99db067da914f5733e9a453f7b7d5ade551675db8a24dce98ade8217"
    assert fingerprint("gpt-4o", "“lemon”", 0.0, 20) == \
        "168831a2da3221be06130e4c5b9bd4603308959b66a0aa9b2a7f0687cbfa94fb"


def test_fingerprint_depends_on_every_request_field():
    base = fingerprint("gpt-4o", "hello", 0.0, 20)
    assert fingerprint("gpt-4o-mini", "hello", 0.0, 20) != base
    assert fingerprint("gpt-4o", "hello ", 0.0, 20) != base
    assert fingerprint("gpt-4o", "hello", 0.5, 20) != base
    assert fingerprint("gpt-4o", "hello", 0.0, 10) != base
    assert request_fingerprint(BackendConfig(model="gpt-4o"), "hello") == base


@pytest.mark.parametrize("entries", [{"5": 1.2}, {"5": 0.0}, {"5": -0.1}, {"5": 0.7, "6": 0.5},
                                     {"5": float("nan")}])
def test_token_distribution_rejects_bad_probabilities(entries):
    with pytest.raises(ProbabilityError):
        TokenDistribution(entries, Source.MOCK)


def test_token_distribution_from_logprobs():
    """Test repeated token texts are summed and underflowed alternatives skipped."""
    d = TokenDistribution.from_logprobs([("7", -0.5), ("7", -2.0), (" 8", -3.0), ("x", -1e5)])
    assert set(d.entries) == {"7", " 8"}
    assert d.entries["7"] == pytest.approx(0.60653066 + 0.13533528)
    assert d.source == Source.LIVE
    assert math.fsum(d.entries.values()) <= 1.0


def test_token_distribution_from_rounded_logprobs():
    """Test a confident answer whose rounded logprobs overshoot 1 is scaled back instead of rejected."""
    d = TokenDistribution.from_logprobs([("7", 0.0), ("8", -12.0)])
    assert math.fsum(d.entries.values()) <= 1.0 + PROBABILITY_TOLERANCE
    assert d.entries["7"] == pytest.approx(1.0, abs=1e-5)
    assert d.entries["8"] == pytest.approx(6.1e-6, rel=1e-2)


def test_token_distribution_from_logprobs_real_excess():
    with pytest.raises(ProbabilityError, match="more than 1"):
        TokenDistribution.from_logprobs([("7", 0.0), ("8", -1.0)])


def test_backend_config_validation():
    with pytest.raises(ConfigError):
        BackendConfig(model="")
    with pytest.raises(ConfigError, match="top_logprobs"):
        BackendConfig(model="m", top_logprobs=21)
    with pytest.raises(ConfigError):
        BackendConfig(model="m", concurrency=0)
    with pytest.raises(ConfigError):
        BackendConfig(model="m", retry_backoff=())
    with pytest.raises(ConfigError, match="Unknown backend keys"):
        BackendConfig.from_dict({"model": "m", "temprature": 0})


def test_backend_config_backoff_repeats_last():
    config = BackendConfig.from_dict({"model": "m", "retry_backoff": [1, 3]})
    assert [config.backoff(ix) for ix in range(4)] == [1.0, 3.0, 3.0, 3.0]


def test_backend_config_warns_on_temperature(caplog):
    with caplog.at_level(logging.WARNING):
        BackendConfig(model="m", temperature=0.7)
    assert "temperature 0.7" in caplog.text


def test_parse_mode():
    assert parse_mode("replay") is Mode.REPLAY
    with pytest.raises(ConfigError, match="Invalid mode value: 'online'"):
        parse_mode("online")


def test_query_cache_round_trip(tmp_path, config):
    """Test recorded queries survive reopening the cache file."""
    path = tmp_path / "cache" / "gpt-4o.jsonl"
    cache = QueryCache(path)
    assert len(cache) == 0
    record = cache.record(config, "hello", TokenDistribution({"4": 0.5, "5": 0.25}, Source.LIVE),
                          timestamp="2025-01-01T00:00:00+00:00")

    reopened = QueryCache(path)
    assert len(reopened) == 1
    assert record.fingerprint in reopened
    stored = reopened.lookup(request_fingerprint(config, "hello"))
    assert stored.distribution.entries == {"4": 0.5, "5": 0.25}
    assert stored.distribution.source == Source.REPLAY
    assert stored.prompt == "hello"

    with pytest.raises(CacheMiss):
        reopened.lookup(request_fingerprint(config, "other"))


def test_query_cache_corrupt_line(tmp_path, config):
    """Test a damaged record followed by readable ones makes the cache unusable."""
    path = tmp_path / "cache.jsonl"
    cache = QueryCache(path)
    cache.record(config, "hello", TokenDistribution({"4": 1.0}, Source.LIVE))
    with path.open("a", encoding="utf-8") as f:
        f.write("{not json\n")
    cache.record(config, "world", TokenDistribution({"5": 1.0}, Source.LIVE))
    with pytest.raises(StorageError, match="cache.jsonl:2"):
        QueryCache(path)


@pytest.mark.parametrize("tail", [b'{"fingerprint": "ab', b'{"fingerprint": "ab\n', b"\xe2\x80"])
def test_query_cache_drops_partial_last_record(tmp_path, config, tail, caplog):
    """Test a record cut off by a killed process is dropped and the cache resumes cleanly."""
    path = tmp_path / "cache.jsonl"
    QueryCache(path).record(config, "hello", TokenDistribution({"4": 1.0}, Source.LIVE))
    intact = path.read_bytes()
    with path.open("ab") as f:
        f.write(tail)

    with caplog.at_level(logging.WARNING):
        cache = QueryCache(path)
    assert "cache.jsonl:2" in caplog.text
    assert len(cache) == 1
    assert path.read_bytes() == intact

    cache.record(config, "world", TokenDistribution({"5": 1.0}, Source.LIVE))
    reopened = QueryCache(path)
    assert len(reopened) == 2
    assert reopened.lookup(request_fingerprint(config, "world")).distribution.entries == {"5": 1.0}


def test_query_cache_terminates_last_record(tmp_path, config):
    """Test a readable last record without its newline is kept and the next append starts a new line."""
    path = tmp_path / "cache.jsonl"
    QueryCache(path).record(config, "hello", TokenDistribution({"4": 1.0}, Source.LIVE))
    path.write_bytes(path.read_bytes().rstrip(b"\n"))

    cache = QueryCache(path)
    assert len(cache) == 1
    cache.record(config, "world", TokenDistribution({"5": 1.0}, Source.LIVE))
    assert len(path.read_bytes().splitlines()) == 2
    assert len(QueryCache(path)) == 2


def test_query_cache_keeps_raw_logprobs(tmp_path, config):
    """Test recorded wire answers are converted on lookup, invalid ones failing like they did live."""
    path = tmp_path / "cache.jsonl"
    cache = QueryCache(path)
    cache.record_logprobs(config, "sure", [("7", 0.0), ("8", -12.0)])
    cache.record_logprobs(config, "broken", [("7", 0.0), ("8", -1.0)])

    reopened = QueryCache(path)
    d = reopened.lookup(request_fingerprint(config, "sure")).distribution
    assert d.source == Source.REPLAY
    assert d.entries["7"] == pytest.approx(1.0, abs=1e-5)
    assert reopened.lookup(request_fingerprint(config, "broken")).logprobs == (("7", 0.0), ("8", -1.0))
    with pytest.raises(ProbabilityError):
        reopened.lookup(request_fingerprint(config, "broken")).distribution


def test_load_backend():
    factory = load_backend("mock", {"strategy": "constant", "value": 3})
    backend = factory(BackendConfig(model="m"))
    assert isinstance(backend, MockBackend)
    assert backend.value == 3
    assert isinstance(load_backend(Mode.REPLAY)(BackendConfig(model="m"), cache=QueryCache("unused.jsonl")),
                      ReplayBackend)
    with pytest.raises(ImportError, match="norms_align.backends.offline"):
        load_backend("offline")


def test_replay_factory_needs_cache(tmp_path):
    with pytest.raises(ConfigError, match="Replay mode needs an existing cache"):
        load_backend("replay")(BackendConfig(model="m", cache=str(tmp_path / "missing.jsonl")))


@pytest.mark.asyncio
async def test_retry_then_success():
    """Test network failures are retried with the backoff schedule."""
    config = BackendConfig(model="m", retry_backoff=(1.0, 2.0))
    backend = FlakyBackend(config, {"p": 2})
    with patch("norms_align.client.asyncio.sleep", new=AsyncMock()) as sleep:
        d = await query_first_token(backend, "p")
    assert d.entries == {"5": 1.0}
    assert backend.calls == ["p", "p", "p"]
    assert [c.args[0] for c in sleep.await_args_list] == [1.0, 2.0]


@pytest.mark.asyncio
async def test_retries_exhausted(config):
    backend = MockBackend(config, fail_prompts={"p"})
    with pytest.raises(NetworkError, match="giving up after 4 attempts"):
        await query_first_token(backend, "p")
    assert backend.attempts["p"] == 1 + config.max_retries


@pytest.mark.asyncio
async def test_backend_error_not_retried(config):
    backend = MockBackend(config, strategy="echo")
    with pytest.raises(BackendError):
        await query_first_token(backend, "unregistered")
    assert backend.attempts["unregistered"] == 1


@pytest.mark.asyncio
async def test_run_batch_keeps_input_order(config):
    """Test results come back in input order even when later prompts finish first."""
    backend = SlowBackend(config)
    prompts = [str(d) for d in range(10)]
    items = await run_batch(backend, prompts)
    assert [item.prompt for item in items] == prompts
    assert [list(item.distribution.entries) for item in items] == [[p] for p in prompts]
    assert backend.max_in_flight <= config.concurrency


@pytest.mark.asyncio
async def test_run_batch_partial_failure(config, caplog):
    """Test a failed prompt is reported in place and logged as a warning."""
    backend = MockBackend(config, strategy="constant", value=4, fail_prompts={"b"})
    with caplog.at_level(logging.WARNING):
        items = await run_batch(backend, ["a", "b", "c"])
    assert any("NetworkError" in r.getMessage() and "giving up" in r.getMessage() for r in caplog.records
               if r.levelno == logging.WARNING)
    assert [item.ok for item in items] == [True, False, True]
    assert isinstance(items[1].error, NetworkError)
    assert items[0].distribution.entries == {"4": 1.0}


@pytest.mark.asyncio
async def test_run_batch_empty(config):
    assert await run_batch(MockBackend(config), []) == []


@pytest.mark.asyncio
async def test_replay_backend(tmp_path, config):
    cache = QueryCache(tmp_path / "cache.jsonl")
    cache.record(config, "known", TokenDistribution({"3": 0.96, "2": 0.04}, Source.LIVE))
    backend = ReplayBackend(config, cache)

    items = await run_batch(backend, ["known", "unknown"])
    assert items[0].distribution.entries == {"3": 0.96, "2": 0.04}
    assert isinstance(items[1].error, CacheMiss)
    assert backend.cached == 1
    assert backend.issued == 0
