import json
import math
import sys
import pytest
from pathlib import Path
from types import SimpleNamespace
from unittest.mock import AsyncMock, patch

import httpx
import openai

sys.path.append(str(Path(__file__).parent.parent / "src"))

from norms_align.client import BackendConfig, QueryCache, Source, TokenDistribution
from norms_align.config import RunConfig, dataset_path, estimates_path
from norms_align.errors import ConfigError, FileUnreadable
from norms_align.estimator import FailedEstimate, RatingEstimate, read_estimates, write_estimates
from norms_align.ingest import read_dataset
from norms_align.norms import DatasetId, features_for, get_feature, render_prompt
from norms_align.pipeline import RUN_META, SCORES, cmd_ingest, cmd_report, cmd_run, cmd_score

REQUEST = httpx.Request("POST", "http://localhost/v1/chat/completions")


GLASGOW_WORDS = [
    ("bicycle", [4.2, 5.9, 5.1, 6.81, 6.6, 6.3, 4.9]),
    ("bid", [5.3, 5.1, 5.4, 3.42, 3.9, 5.2, 4.1]),
    ("candle", [3.1, 6.2, 4.7, 6.5, 6.4, 5.8, 3.2]),
]
LANCASTER_WORDS = [
    ("LEMON", [0.4, 4.45, 3.9, 3.1, 0.2, 4.6]),
    ("ALIBI", [0.6, 0.0, 0.0, 0.1, 1.9, 0.8]),
    ("VELVET", [0.5, 0.1, 0.3, 4.7, 0.6, 4.5]),
]


def completion(alternatives):
    top = [SimpleNamespace(token=token, logprob=math.log(p)) for token, p in alternatives]
    content = [SimpleNamespace(token=alternatives[0][0], logprob=top[0].logprob, top_logprobs=top)]
    return SimpleNamespace(choices=[SimpleNamespace(logprobs=SimpleNamespace(content=content))])


def make_config(tmp_path: Path, **overrides) -> RunConfig:
    data = {
        "mode": "mock",
        "output": "out",
        "datasets": {"glasgow": "glasgow.csv"},
        "backends": [{"model": "mock-a"}],
        "mock": {"strategy": "echo"},
    }
    data.update(overrides)
    return RunConfig.from_dict(data, base_dir=tmp_path)


def run_all(config: RunConfig):
    cmd_ingest(config)
    cmd_run(config)
    results = cmd_score(config)
    cmd_report(config)
    return results


def test_echo_mock_is_aligned(tmp_path, glasgow_csv, glasgow_rows):
    """Test a model answering round(human mean) is perfectly aligned on rounded values."""
    glasgow_csv(glasgow_rows(200))
    results = run_all(make_config(tmp_path))

    assert [r.feature for r in results] == [f.id for f in features_for(DatasetId.GLASGOW)]
    for r in results:
        assert r.n_words == 200
        assert r.n_dropped == 0
        assert r.pearson_rounded == 1.0
        assert r.spearman_rounded == 1.0
        assert r.pearson_raw >= 0.95
        assert r.spearman_raw >= 0.95


def test_replay_spot_values(tmp_path, glasgow_csv, lancaster_csv):
    """Test recorded answers replay into the expected estimates."""
    glasgow_csv(GLASGOW_WORDS)
    lancaster_csv(LANCASTER_WORDS)
    concreteness = get_feature("concreteness")
    gustatory = get_feature("gustatory")
    recorded = {
        "llama": {
            render_prompt(concreteness, "bicycle"): {"4": 0.27, "5": 0.73},
            render_prompt(concreteness, "bid"): {"4": 0.5, "5": 0.5},
        },
        "gpt-4o": {
            render_prompt(concreteness, "bicycle"): {"7": 1.0},
            render_prompt(concreteness, "bid"): {"3": 0.96, "2": 0.04},
            render_prompt(gustatory, "lemon"): {"4": 0.51, "5": 0.49},
        },
        "gemma": {
            render_prompt(gustatory, "lemon"): {"0": 0.99, "1": 0.01},
        },
    }
    for model, answers in recorded.items():
        cache = QueryCache(tmp_path / "cache" / f"{model}.jsonl")
        for prompt, entries in answers.items():
            cache.record(BackendConfig(model=model), prompt, TokenDistribution(entries, Source.LIVE),
                         timestamp="2025-01-01T00:00:00+00:00")

    config = make_config(
        tmp_path,
        mode="replay",
        datasets={"glasgow": "glasgow.csv", "lancaster": "lancaster.csv"},
        features=["concreteness", "gustatory"],
        backends=[{"model": m, "cache": f"cache/{m}.jsonl"} for m in recorded],
    )
    cmd_ingest(config)
    summaries = cmd_run(config)
    assert [s.issued for s in summaries] == [0, 0, 0]
    assert [s.cached for s in summaries] == [2, 3, 1]
    assert summaries[0].errors == {"CacheMiss": 4}

    def weighted(model):
        return {(r.word, r.feature): r.weighted_value for r in read_estimates(estimates_path(config, model))
                if isinstance(r, RatingEstimate)}

    assert weighted("llama")[("bicycle", "concreteness")] == pytest.approx(4.73, abs=1e-9)
    assert weighted("llama")[("bid", "concreteness")] == pytest.approx(4.50, abs=1e-9)
    assert weighted("gpt-4o")[("bicycle", "concreteness")] == pytest.approx(7.0, abs=1e-9)
    assert weighted("gpt-4o")[("bid", "concreteness")] == pytest.approx(2.96, abs=1e-9)
    assert weighted("gpt-4o")[("lemon", "gustatory")] == pytest.approx(4.49, abs=1e-9)
    assert weighted("gemma")[("lemon", "gustatory")] == pytest.approx(0.01, abs=1e-9)

    human = {r.word: r.human_mean for r in read_dataset(dataset_path(config, DatasetId.GLASGOW)).words("concreteness")}
    assert human["bicycle"] == 6.81
    assert human["bid"] == 3.42
    lemon = read_dataset(dataset_path(config, DatasetId.LANCASTER)).words("gustatory")[0]
    assert (lemon.word, lemon.human_mean) == ("lemon", 4.45)


def test_replay_needs_cache(tmp_path, glasgow_csv):
    glasgow_csv()
    config = make_config(tmp_path, mode="replay", backends=[{"model": "m", "cache": "missing.jsonl"}])
    cmd_ingest(config)
    with pytest.raises(ConfigError, match="Replay mode needs an existing cache"):
        cmd_run(config)


def test_rerun_is_byte_identical(tmp_path, glasgow_csv, glasgow_rows):
    """Test a mock run repeated in the same output directory reproduces every file."""
    glasgow_csv(glasgow_rows(30))
    config = make_config(tmp_path, features=["valence", "gender"],
                         backends=[{"model": m} for m in ("mock-a", "mock-b", "mock-c")])
    run_all(config)
    first = {p.relative_to(config.output): p.read_bytes() for p in sorted(config.output.rglob("*")) if p.is_file()}
    run_all(config)
    second = {p.relative_to(config.output): p.read_bytes() for p in sorted(config.output.rglob("*")) if p.is_file()}

    assert Path("report/glasgow_valence.svg") in first
    assert Path(SCORES) in first
    assert first == second
    meta = json.loads((config.output / RUN_META).read_text(encoding="utf-8"))
    assert sorted(meta["stages"]) == ["ingest", "report", "run", "score"]
    assert "finished" not in meta["stages"]["run"]


def test_no_surviving_pairs_is_undefined(tmp_path, glasgow_csv, glasgow_rows):
    """Test a model whose every answer failed scores as undefined instead of raising."""
    glasgow_csv(glasgow_rows(20))
    config = make_config(tmp_path, features=["valence"], backends=[{"model": "broken"}])
    cmd_ingest(config)
    records = [FailedEstimate(f"word{ix:03d}", "valence", "broken", "NetworkError: giving up") for ix in range(20)]
    write_estimates(records, estimates_path(config, "broken"))

    (result,) = cmd_score(config)
    assert result.n_words == 0
    assert result.n_dropped == 20
    assert result.pearson_raw is None
    assert result.spearman_rounded is None
    assert not result.divergence_flag


def test_constant_mock_is_undefined(tmp_path, glasgow_csv, glasgow_rows):
    glasgow_csv(glasgow_rows(20))
    config = make_config(tmp_path, features=["arousal"], mock={"strategy": "constant", "value": 5})
    (result,) = run_all(config)
    assert result.n_words == 20
    assert result.pearson_raw is None
    assert result.spearman_raw is None


def test_stage_order_is_enforced(tmp_path, glasgow_csv):
    glasgow_csv()
    config = make_config(tmp_path)
    with pytest.raises(FileUnreadable, match="run the ingest stage first"):
        cmd_run(config)
    cmd_ingest(config)
    with pytest.raises(FileUnreadable, match="run the run stage first"):
        cmd_score(config)
    with pytest.raises(FileUnreadable, match="run the score stage first"):
        cmd_report(config)


def test_feature_needs_its_dataset(tmp_path, glasgow_csv):
    glasgow_csv()
    config = make_config(tmp_path, features=["gustatory"])
    cmd_ingest(config)
    with pytest.raises(ConfigError, match="needs the lancaster dataset"):
        cmd_run(config)


def test_live_run_resumes_from_cache(tmp_path, glasgow_csv, glasgow_rows, monkeypatch):
    """Test an interrupted live run only re-sends the queries that failed."""
    glasgow_csv(glasgow_rows(20))
    monkeypatch.setenv("OPENAI_API_KEY", "test-key")
    config = make_config(tmp_path, mode="live", features=["valence"], backends=[
        {"model": "gpt-4o", "cache": "cache/gpt-4o.jsonl", "max_retries": 0, "retry_backoff": [0]}])
    cmd_ingest(config)
    outage = {"on": True}

    def answer(**kwargs):
        if outage["on"] and "word003" in kwargs["messages"][0]["content"]:
            raise openai.APIConnectionError(request=REQUEST)
        return completion([("5", 0.6), ("6", 0.4)])

    client = AsyncMock()
    client.chat.completions.create = AsyncMock(side_effect=answer)
    with patch("norms_align.backends.live.openai.AsyncOpenAI", return_value=client):
        (first,) = cmd_run(config)
        outage["on"] = False
        (second,) = cmd_run(config)

    assert (first.issued, first.cached, first.failed) == (20, 0, 1)
    assert first.errors == {"NetworkError": 1}
    assert (second.issued, second.cached, second.failed) == (1, 19, 0)
    assert second.mean_coverage == pytest.approx(1.0)
    records = read_estimates(estimates_path(config, "gpt-4o"))
    assert all(r.weighted_value == pytest.approx(5.4) for r in records)
    meta = json.loads((config.output / RUN_META).read_text(encoding="utf-8"))
    assert "finished" in meta["stages"]["run"]
