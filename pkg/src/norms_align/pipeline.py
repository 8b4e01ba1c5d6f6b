"""Pipeline stages: ingest, run, score and report.

Stages hand over through files under the output directory, so each one can be
re-run on its own::

    datasets/<dataset>.jsonl, datasets/ingest_report.json   <- cmd_ingest
    estimates/<model>.jsonl                                  <- cmd_run
    scores.csv                                               <- cmd_score
    report/*.svg, report/results.csv, report/divergence.txt  <- cmd_report
    run_meta.json                                            <- every stage
"""
import asyncio
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from norms_align import __version__
from norms_align.client import Backend, BackendConfig, BatchItem, Mode, QueryCache, load_backend, run_batch
from norms_align.config import RunConfig, dataset_path, estimates_path
from norms_align.errors import ConfigError, FileUnreadable, NoValidToken, StorageError, TooFewPairs
from norms_align.estimator import FailedEstimate, RatingEstimate, estimate_word, read_estimates, write_estimates
from norms_align.ingest import IngestReport, load_norms, read_dataset, sample_words, write_dataset, write_ingest_report
from norms_align.metrics import (
    AlignmentResult, PairedSeries, alignment_matrix, read_scores, round_series, undefined_result, write_scores,
)
from norms_align.norms import (
    DatasetId, NormDataset, NormFeature, WordRating, feature_registry, features_for, get_feature, render_prompt,
)
from norms_align.report import sort_results, write_report

logger = logging.getLogger(__name__)

RUN_META = "run_meta.json"
SCORES = "scores.csv"
REPORT_DIR = "report"

EstimateRecord = Union[RatingEstimate, FailedEstimate]


@dataclass(frozen=True)
class WordPrompt:
    """A sampled word of a feature and the prompt rendered for it."""
    feature: NormFeature
    rating: WordRating
    prompt: str


@dataclass
class RunSummary:
    """Per-model accounting of one ``run`` stage."""
    model: str
    source: str = ""
    prompts: int = 0
    issued: int = 0
    cached: int = 0
    failed: int = 0
    non_compliant: int = 0
    mean_coverage: Optional[float] = None
    errors: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "source": self.source,
            "prompts": self.prompts,
            "issued": self.issued,
            "cached": self.cached,
            "failed": self.failed,
            "non_compliant": self.non_compliant,
            "mean_coverage": self.mean_coverage,
            "errors": dict(sorted(self.errors.items())),
        }


def _prepare(config: RunConfig) -> None:
    try:
        config.output.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"Cannot create output directory {config.output.as_posix()}: {e}")


def write_run_meta(config: RunConfig, stage: str, stats: Dict) -> Path:
    """Merge the stage's statistics into ``run_meta.json``.

    Timestamps are only written in live mode; mock and replay runs leave the
    file byte-identical between runs.
    """
    path = config.output / RUN_META
    meta: Dict = {}
    if path.is_file():
        try:
            meta = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            logger.warning("Replacing unreadable %s", path.as_posix())
    meta["version"] = __version__
    meta["mode"] = config.mode.value
    meta["config"] = config.raw
    entry = dict(stats)
    if config.mode == Mode.LIVE:
        entry["finished"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    meta.setdefault("stages", {})[stage] = entry
    try:
        path.write_text(json.dumps(meta, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                        encoding="utf-8", newline="\n")
    except OSError as e:
        raise StorageError(f"Cannot write {path.as_posix()}: {e}")
    return path


def load_datasets(config: RunConfig) -> Dict[DatasetId, NormDataset]:
    """Read the canonical dataset files written by :func:`cmd_ingest`."""
    if not config.datasets:
        raise ConfigError("No datasets configured")
    datasets = {}
    for dataset in DatasetId:
        if dataset not in config.datasets:
            continue
        try:
            datasets[dataset] = read_dataset(dataset_path(config, dataset), config.registry)
        except FileUnreadable as e:
            raise FileUnreadable(f"{e}; run the ingest stage first")
    return datasets


def selected_features(config: RunConfig, datasets: Sequence[DatasetId]) -> List[NormFeature]:
    """Features to evaluate, in registry order."""
    if not config.features:
        return [f for dataset in DatasetId if dataset in datasets for f in features_for(dataset, config.registry)]
    wanted = [get_feature(fid, config.registry) for fid in config.features]
    for feature in wanted:
        if feature.dataset not in datasets:
            raise ConfigError(f"Feature '{feature.id}' needs the {feature.dataset.value} dataset in the configuration")
    ids = {f.id for f in wanted}
    return [f for f in feature_registry(config.registry) if f.id in ids]


def build_prompts(config: RunConfig, datasets: Dict[DatasetId, NormDataset]) -> List[WordPrompt]:
    """Sample the words of every selected feature and render their prompts."""
    prompts = []
    for feature in selected_features(config, list(datasets)):
        words = sample_words(datasets[feature.dataset], feature.id, config.sample_size, config.sample_seed)
        for rating in words:
            prompt = render_prompt(feature, rating.word, quotes=config.quotes, strip_sense=config.strip_senses)
            prompts.append(WordPrompt(feature, rating, prompt))
    return prompts


def echo_answers(prompts: Sequence[WordPrompt]) -> Dict[str, int]:
    """Rounded human mean of every prompt, for the echo mock."""
    answers: Dict[str, int] = {}
    for p in prompts:
        answers.setdefault(p.prompt, round_series([p.rating.human_mean], p.feature.scale)[0])
    return answers


def make_backend(config: RunConfig, backend_config: BackendConfig, prompts: Sequence[WordPrompt]) -> Backend:
    cache = None
    kwargs = None
    if config.mode == Mode.MOCK:
        kwargs = {"strategy": config.mock_strategy, "value": config.mock_value}
        if config.mock_strategy == "echo":
            kwargs["answers"] = echo_answers(prompts)
    elif backend_config.cache:
        cache = QueryCache(backend_config.cache)
        logger.info("%s: %d cached queries in %s", backend_config.model, len(cache), backend_config.cache)
    elif config.mode == Mode.LIVE:
        logger.warning("%s: no cache configured, an interrupted run starts over", backend_config.model)
    factory = load_backend(config.mode, kwargs)
    return factory(backend_config, cache=cache)


async def _query_all(backend: Backend, prompts: List[str]) -> List[BatchItem]:
    try:
        return await run_batch(backend, prompts)
    finally:
        await backend.aclose()


def _to_record(p: WordPrompt, item: BatchItem, model: str) -> EstimateRecord:
    if not item.ok:
        return FailedEstimate(p.rating.word, p.feature.id, model, f"{type(item.error).__name__}: {item.error}")
    try:
        return estimate_word(p.rating.word, p.feature.id, model, item.distribution, p.feature.scale)
    except NoValidToken as e:
        return FailedEstimate(p.rating.word, p.feature.id, model, f"NoValidToken: {e}")


def estimate_model(config: RunConfig, backend_config: BackendConfig,
                   prompts: Sequence[WordPrompt]) -> RunSummary:
    """Query one model for every prompt and write its estimate file."""
    model = backend_config.model
    for feature in {p.feature.id: p.feature for p in prompts}.values():
        if backend_config.top_logprobs < len(feature.scale.points):
            logger.warning("%s: top_logprobs %d is below the %d points of %s; coverage will be truncated",
                           model, backend_config.top_logprobs, len(feature.scale.points), feature.id)

    backend = make_backend(config, backend_config, prompts)
    unique = list(dict.fromkeys(p.prompt for p in prompts))
    items = {item.prompt: item for item in asyncio.run(_query_all(backend, unique))}
    records = [_to_record(p, items[p.prompt], model) for p in prompts]
    write_estimates(records, estimates_path(config, model))

    estimates = [r for r in records if isinstance(r, RatingEstimate)]
    failed = [r for r in records if isinstance(r, FailedEstimate)]
    summary = RunSummary(
        model=model,
        source=backend.source.value,
        prompts=len(unique),
        issued=backend.issued,
        cached=backend.cached,
        failed=len(failed),
        non_compliant=sum(1 for r in estimates if r.non_compliant(config.coverage_floor)),
        mean_coverage=float(np.mean([r.coverage_mass for r in estimates])) if estimates else None,
        errors=dict(Counter(r.error.split(":", 1)[0] for r in failed)),
    )
    if summary.failed:
        logger.warning("%s: %d of %d prompt(s) failed: %s", model, summary.failed, len(prompts),
                       ", ".join(f"{k} x{v}" for k, v in sorted(summary.errors.items())))
    if summary.non_compliant:
        logger.warning("%s: %d answer(s) below coverage floor %.2f", model, summary.non_compliant,
                       config.coverage_floor)
    return summary


def cmd_ingest(config: RunConfig) -> List[IngestReport]:
    """Parse the configured norm tables into canonical dataset files."""
    _prepare(config)
    if not config.datasets:
        raise ConfigError("No datasets configured")
    reports = []
    for dataset in DatasetId:
        source = config.datasets.get(dataset)
        if source is None:
            continue
        logger.info("Ingesting %s from %s", dataset.value, source.path.as_posix())
        ds, report = load_norms(source.path, dataset, source.mapping, config.registry)
        write_dataset(ds, dataset_path(config, dataset))
        reports.append(report)
    write_ingest_report(reports, config.output / "datasets" / "ingest_report.json")
    write_run_meta(config, "ingest", {
        r.dataset: {"rows_read": r.rows_read, "rows_accepted": r.rows_accepted, "violations": len(r.violations)}
        for r in reports
    })
    return reports


def cmd_run(config: RunConfig) -> List[RunSummary]:
    """Query every backend for every sampled word and write estimate files."""
    _prepare(config)
    config.check_mode()
    prompts = build_prompts(config, load_datasets(config))
    logger.info("%d prompts per model, %d model(s), mode %s", len(prompts), len(config.backends),
                config.mode.value)
    summaries = [estimate_model(config, bc, prompts) for bc in config.backends]
    write_run_meta(config, "run", {s.model: s.to_dict() for s in summaries})
    return summaries


def score_feature(config: RunConfig, feature: NormFeature, model: str, records: Sequence[EstimateRecord],
                  human: Dict[str, float], estimate: str) -> AlignmentResult:
    """Alignment of one model on one feature; failed words are dropped and counted."""
    words, human_values, model_values = [], [], []
    dropped = noncompliant = 0
    for record in records:
        if isinstance(record, FailedEstimate) or record.word not in human:
            dropped += 1
            continue
        if record.non_compliant(config.coverage_floor):
            noncompliant += 1
            if config.drop_noncompliant:
                dropped += 1
                continue
        words.append(record.word)
        human_values.append(human[record.word])
        model_values.append(record.value(estimate))
    try:
        return alignment_matrix(
            PairedSeries(words, human_values, model_values), feature.scale,
            dataset=feature.dataset.value, feature=feature.id, model=model,
            threshold=config.divergence_threshold, rounding=config.rounding, estimate=estimate,
            n_dropped=dropped, n_noncompliant=noncompliant,
        )
    except TooFewPairs as e:
        logger.warning("%s; reported as undefined", e)
        return undefined_result(feature.dataset.value, feature.id, model, len(words), dropped,
                                estimate=estimate, n_noncompliant=noncompliant)


def cmd_score(config: RunConfig) -> List[AlignmentResult]:
    """Pair estimates with human means and write ``scores.csv``."""
    _prepare(config)
    datasets = load_datasets(config)
    features = selected_features(config, list(datasets))
    results = []
    for backend_config in config.backends:
        path = estimates_path(config, backend_config.model)
        if not path.is_file():
            raise FileUnreadable(f"Estimate file {path.as_posix()} not found; run the run stage first")
        by_feature: Dict[str, List[EstimateRecord]] = {}
        for record in read_estimates(path):
            by_feature.setdefault(record.feature, []).append(record)
        for feature in features:
            records = by_feature.get(feature.id)
            if not records:
                logger.warning("%s: no estimates for %s", backend_config.model, feature.id)
                continue
            human = {r.word: r.human_mean for r in datasets[feature.dataset].words(feature.id)}
            for estimate in config.estimates:
                results.append(score_feature(config, feature, backend_config.model, records, human, estimate))

    results = sort_results(results, config.registry)
    write_scores(results, config.output / SCORES)
    write_run_meta(config, "score", {
        "results": len(results),
        "undefined": sum(1 for r in results if r.pearson_raw is None),
        "flagged": sum(1 for r in results if r.divergence_flag),
        "dropped": sum(r.n_dropped for r in results),
        "non_compliant": sum(r.n_noncompliant for r in results),
    })
    return results


def cmd_report(config: RunConfig) -> List[Path]:
    """Render charts, the results table and the divergence report from ``scores.csv``."""
    _prepare(config)
    path = config.output / SCORES
    if not path.is_file():
        raise FileUnreadable(f"Scores file {path.as_posix()} not found; run the score stage first")
    results = read_scores(path)
    if results and not any(r.estimate == config.report_estimate for r in results):
        logger.warning("No '%s' results to chart; add it to metrics.estimates", config.report_estimate)
    written = write_report(results, config.output / REPORT_DIR, config.report_estimate, config.skew_threshold,
                           config.registry)
    write_run_meta(config, "report", {"files": [p.relative_to(config.output).as_posix() for p in written]})
    return written
