import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from norms_align.client import BackendConfig, Mode, parse_mode
from norms_align.errors import ConfigError
from norms_align.estimator import DEFAULT_COVERAGE_FLOOR
from norms_align.ingest import DEFAULT_MAPPINGS, ColumnMapping
from norms_align.metrics import DEFAULT_DIVERGENCE_THRESHOLD, RoundingSide, parse_rounding
from norms_align.norms import EMBEDDED_REGISTRY, DatasetId, FeatureRegistry, QuoteStyle, load_registry, parse_dataset_id
from norms_align.report import DEFAULT_SKEW_THRESHOLD

DEFAULT_CONFIG = "norms-align.cfg"
ESTIMATES = ("weighted", "argmax")


def load_config(config_path: Union[str, Path] = DEFAULT_CONFIG) -> Dict:
    """Load configuration from a JSON file."""
    config_path = Path(config_path).resolve()
    if not config_path.exists():
        raise FileNotFoundError(f"Configuration file {config_path.as_posix()} not found")

    with config_path.open("r", encoding="utf-8") as f:
        return json.load(f)


def _check_estimate(value: str, key: str) -> str:
    if value not in ESTIMATES:
        raise ConfigError(f"Invalid {key} value: '{value}'. Must be one of {list(ESTIMATES)}")
    return value


def _check_sample_size(value) -> Optional[int]:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"Invalid sample size value: '{value}'. Must be a positive integer or omitted")
    return value


@dataclass(frozen=True)
class DatasetSource:
    path: Path
    mapping: ColumnMapping


@dataclass(frozen=True)
class RunConfig:
    """Everything one evaluation run needs, resolved relative to the config file.

    Attributes:
        datasets: Dict mapping DatasetId to the source file and its column mapping.
        features: Feature ids to evaluate (empty = every registered feature of the loaded datasets).
        backends: Models to query.
        mode: live, replay or mock.
        output: Output directory.
        registry: Features the run can evaluate (embedded, or with the override file applied).
        registry_file: Optional feature registry override file.
        sample_size: Words per feature (None = all).
        sample_seed: Seed of the word sample.
        quotes: Quote style of the stimulus word.
        strip_senses: Prompt sense-annotated words without the parenthetical.
        coverage_floor: Coverage below which an answer counts as non-compliant.
        divergence_threshold: |pearson - spearman| above which a pair is flagged.
        rounding: Which side is rounded for the rounded coefficients.
        estimates: Estimates scored (weighted, argmax).
        drop_noncompliant: Drop non-compliant answers before scoring.
        report_estimate: Estimate plotted in the charts.
        skew_threshold: |skewness| from which a feature counts as skewed in the report.
        mock_strategy: echo or constant.
        mock_value: Answer of the constant mock.
    """
    datasets: Dict[DatasetId, DatasetSource]
    backends: Tuple[BackendConfig, ...]
    mode: Mode = Mode.LIVE
    output: Path = Path("out")
    features: Tuple[str, ...] = ()
    registry: FeatureRegistry = EMBEDDED_REGISTRY
    registry_file: Optional[Path] = None
    sample_size: Optional[int] = None
    sample_seed: int = 0
    quotes: QuoteStyle = QuoteStyle.TYPOGRAPHIC
    strip_senses: bool = False
    coverage_floor: float = DEFAULT_COVERAGE_FLOOR
    divergence_threshold: float = DEFAULT_DIVERGENCE_THRESHOLD
    rounding: RoundingSide = RoundingSide.BOTH
    estimates: Tuple[str, ...] = ("weighted",)
    drop_noncompliant: bool = False
    report_estimate: str = "weighted"
    skew_threshold: float = DEFAULT_SKEW_THRESHOLD
    mock_strategy: str = "echo"
    mock_value: int = 0
    raw: Dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_dict(cls, data: Dict, base_dir: Union[str, Path] = ".", mode: Optional[str] = None) -> "RunConfig":
        """Build a RunConfig from the parsed JSON configuration.

        Args:
            data: Parsed configuration.
            base_dir: Directory relative paths are resolved against.
            mode: Optional mode overriding the one in the file.
        """
        base_dir = Path(base_dir)

        def resolve(p: Optional[str]) -> Optional[Path]:
            if p is None:
                return None
            p = Path(p)
            return p if p.is_absolute() else base_dir / p

        datasets = {}
        for key, entry in (data.get("datasets") or {}).items():
            dataset = parse_dataset_id(key)
            if isinstance(entry, str):
                entry = {"path": entry}
            if "path" not in entry:
                raise ConfigError(f"Dataset '{key}' needs a 'path'")
            mapping = DEFAULT_MAPPINGS[dataset].merged(entry.get("mapping"))
            datasets[dataset] = DatasetSource(resolve(entry["path"]), mapping)

        backends = []
        for ix, entry in enumerate(data.get("backends") or []):
            if not isinstance(entry, dict) or "model" not in entry:
                raise ConfigError(f"Invalid backend #{ix}: {entry}. Must be a dict with a 'model' key.")
            entry = dict(entry)
            if entry.get("cache"):
                entry["cache"] = str(resolve(entry["cache"]))
            backends.append(BackendConfig.from_dict(entry))
        models = [b.model for b in backends]
        if len(set(models)) != len(models):
            raise ConfigError(f"Duplicate backend models: {models}")

        sample = data.get("sample") or {}
        prompt = data.get("prompt") or {}
        estimator = data.get("estimator") or {}
        metrics = data.get("metrics") or {}
        report = data.get("report") or {}
        mock = data.get("mock") or {}

        try:
            quotes = QuoteStyle(prompt.get("quotes", QuoteStyle.TYPOGRAPHIC.value))
        except ValueError:
            raise ConfigError(f"Invalid quotes value: '{prompt.get('quotes')}'. "
                              f"Must be one of {[e.value for e in QuoteStyle]}")

        registry_file = resolve(data.get("registry"))
        return cls(
            datasets=datasets,
            backends=tuple(backends),
            mode=parse_mode(mode or data.get("mode", Mode.LIVE.value)),
            output=resolve(data.get("output", "out")),
            features=tuple(data.get("features") or ()),
            registry=load_registry(registry_file),
            registry_file=registry_file,
            sample_size=_check_sample_size(sample.get("size")),
            sample_seed=int(sample.get("seed", 0)),
            quotes=quotes,
            strip_senses=bool(prompt.get("strip_senses", False)),
            coverage_floor=float(estimator.get("coverage_floor", DEFAULT_COVERAGE_FLOOR)),
            divergence_threshold=float(metrics.get("divergence_threshold", DEFAULT_DIVERGENCE_THRESHOLD)),
            rounding=parse_rounding(metrics.get("rounding", RoundingSide.BOTH.value)),
            estimates=tuple(_check_estimate(e, "estimates") for e in metrics.get("estimates", ["weighted"])),
            drop_noncompliant=bool(metrics.get("drop_noncompliant", False)),
            report_estimate=_check_estimate(report.get("estimate", "weighted"), "report estimate"),
            skew_threshold=float(report.get("skew_threshold", DEFAULT_SKEW_THRESHOLD)),
            mock_strategy=mock.get("strategy", "echo"),
            mock_value=int(mock.get("value", 0)),
            raw=data,
        )

    @classmethod
    def from_file(cls, path: Union[str, Path] = DEFAULT_CONFIG, mode: Optional[str] = None) -> "RunConfig":
        data = load_config(path)
        return cls.from_dict(data, base_dir=Path(path).resolve().parent, mode=mode)

    def check_mode(self) -> None:
        """Replay needs existing caches, live needs credentials."""
        if not self.backends:
            raise ConfigError("No backends configured")
        for backend in self.backends:
            if self.mode == Mode.REPLAY and (not backend.cache or not Path(backend.cache).is_file()):
                raise ConfigError(f"Replay mode needs an existing cache for {backend.model}, got {backend.cache!r}")
            if self.mode == Mode.LIVE and not os.getenv(backend.api_key_env, "").strip():
                raise ConfigError(f"Missing required env: {backend.api_key_env} (live mode, {backend.model})")


def model_slug(model: str) -> str:
    """File-system safe name of a model."""
    return "".join(c if c.isalnum() or c in "-._" else "_" for c in model)


def estimates_path(config: RunConfig, model: str) -> Path:
    return config.output / "estimates" / f"{model_slug(model)}.jsonl"


def dataset_path(config: RunConfig, dataset: DatasetId) -> Path:
    return config.output / "datasets" / f"{dataset.value}.jsonl"
