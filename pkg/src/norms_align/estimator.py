"""Turn first-token distributions into per-word ratings.

Two estimates are derived from the probabilities the model assigns to the
scale's digit tokens:

* **argmax**: the scale point with the largest probability (ties go to the
  lower point);
* **weighted**: the expected value, sum of point times renormalized probability.

Only mass on valid scale tokens counts. How much of the raw mass that was is
kept as ``coverage_mass``; low coverage means the model mostly answered with
something other than a rating.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

from norms_align.client import TokenDistribution
from norms_align.errors import NoValidToken, StorageError
from norms_align.norms import RatingScale

logger = logging.getLogger(__name__)

DEFAULT_COVERAGE_FLOOR = 0.25


@dataclass(frozen=True)
class ScaleDistribution:
    """Renormalized probabilities over the points of a rating scale."""
    probabilities: Dict[int, float]
    coverage_mass: float


@dataclass(frozen=True)
class RatingEstimate:
    word: str
    feature: str
    model: str
    argmax_value: int
    weighted_value: float
    coverage_mass: float

    def non_compliant(self, floor: float = DEFAULT_COVERAGE_FLOOR) -> bool:
        return self.coverage_mass < floor

    def value(self, estimate: str) -> float:
        return float(self.argmax_value) if estimate == "argmax" else self.weighted_value


@dataclass(frozen=True)
class FailedEstimate:
    """A word whose query or extraction failed; dropped before scoring."""
    word: str
    feature: str
    model: str
    error: str


def _token_value(token: str) -> Optional[int]:
    token = token.strip()
    if len(token) != 1 or not token.isdigit() or not token.isascii():
        return None
    return int(token)


def extract_scale_distribution(raw: Union[TokenDistribution, Dict[str, float]], scale: RatingScale) -> ScaleDistribution:
    """Keep the mass on tokens that are scale points and renormalize it.

    Tokens are whitespace-trimmed, so " 7" and "7" both count for 7.

    Raises:
        NoValidToken: If no mass lands on a scale point.
    """
    entries = raw.entries if isinstance(raw, TokenDistribution) else raw
    kept: Dict[int, List[float]] = {}
    for token, p in entries.items():
        value = _token_value(str(token))
        if value is None or not scale.contains(value):
            continue
        kept.setdefault(value, []).append(p)

    sums = {value: math.fsum(ps) for value, ps in kept.items()}
    coverage = math.fsum(sums.values())
    if coverage <= 0:
        raise NoValidToken(f"No probability on scale points {scale}: {sorted(entries)[:10]}")
    probabilities = {value: sums[value] / coverage for value in sorted(sums)}
    return ScaleDistribution(probabilities, min(coverage, 1.0))


def weighted_estimate(d: ScaleDistribution) -> float:
    """Expected scale value: sum of value x probability."""
    return math.fsum(value * p for value, p in d.probabilities.items())


def argmax_estimate(d: ScaleDistribution) -> int:
    """Most probable scale point; ties break toward the lower value."""
    return min(d.probabilities, key=lambda value: (-d.probabilities[value], value))


def estimate_word(word: str, feature: str, model: str, raw: TokenDistribution, scale: RatingScale) -> RatingEstimate:
    """Both estimates of one word from its raw distribution."""
    d = extract_scale_distribution(raw, scale)
    weighted = min(max(weighted_estimate(d), scale.min), scale.max)
    return RatingEstimate(word, feature, model, argmax_estimate(d), weighted, d.coverage_mass)


def write_estimates(records: Iterable[Union[RatingEstimate, FailedEstimate]], path: Union[str, Path]) -> Path:
    """Write estimate records, one JSON object per line, in the given order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with path.open("w", encoding="utf-8", newline="\n") as f:
            for record in records:
                if isinstance(record, RatingEstimate):
                    data = {
                        "word": record.word, "feature": record.feature, "model": record.model,
                        "argmax": record.argmax_value, "weighted": record.weighted_value,
                        "coverage_mass": record.coverage_mass,
                    }
                else:
                    data = {"word": record.word, "feature": record.feature, "model": record.model,
                            "error": record.error}
                f.write(json.dumps(data, ensure_ascii=False, sort_keys=True) + "\n")
    except OSError as e:
        raise StorageError(f"Cannot write {path.as_posix()}: {e}")
    return path


def read_estimates(path: Union[str, Path]) -> List[Union[RatingEstimate, FailedEstimate]]:
    path = Path(path)
    records: List[Union[RatingEstimate, FailedEstimate]] = []
    with path.open("r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            data = json.loads(line)
            if "error" in data:
                records.append(FailedEstimate(data["word"], data["feature"], data["model"], data["error"]))
            else:
                records.append(RatingEstimate(data["word"], data["feature"], data["model"],
                                              data["argmax"], data["weighted"], data["coverage_mass"]))
    return records
