import logging
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.stats import rankdata, skew

from norms_align.errors import ConfigError, LengthMismatch, TooFewPairs
from norms_align.norms import RatingScale

logger = logging.getLogger(__name__)

DEFAULT_DIVERGENCE_THRESHOLD = 0.15
MIN_PAIRS = 3

# Coefficients are None when undefined (n < 2 or a zero-variance series).
Coefficient = Optional[float]


class RoundingSide(Enum):
    """Which series are rounded for the rounded coefficient variants."""
    BOTH = "both"
    MODEL = "model"
    HUMAN = "human"


def parse_rounding(value: str) -> RoundingSide:
    try:
        return RoundingSide(value)
    except ValueError:
        raise ConfigError(f"Invalid rounding value: '{value}'. Must be one of {[e.value for e in RoundingSide]}")


@dataclass(frozen=True)
class PairedSeries:
    """Human and model values of the same words, index-aligned."""
    words: Sequence[str]
    human: Sequence[float]
    model: Sequence[float]

    def __post_init__(self):
        if not len(self.words) == len(self.human) == len(self.model):
            raise LengthMismatch(
                f"Series lengths differ: {len(self.words)} words, {len(self.human)} human, {len(self.model)} model")

    def __len__(self):
        return len(self.words)


@dataclass(frozen=True)
class AlignmentResult:
    """The four alignment coefficients of one (feature, model) pair."""
    dataset: str
    feature: str
    model: str
    n_words: int
    pearson_raw: Coefficient
    pearson_rounded: Coefficient
    spearman_raw: Coefficient
    spearman_rounded: Coefficient
    divergence_flag: bool
    estimate: str = "weighted"
    n_dropped: int = 0
    n_noncompliant: int = 0
    human_skewness: Coefficient = None

    @property
    def divergence(self) -> Coefficient:
        """pearson_raw - spearman_raw, None when either is undefined."""
        if self.pearson_raw is None or self.spearman_raw is None:
            return None
        return self.pearson_raw - self.spearman_raw


def _as_pair(x: Sequence[float], y: Sequence[float]):
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    b = np.asarray(y, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise LengthMismatch(f"Series lengths differ: {a.size} vs {b.size}")
    return a, b


def pearson(x: Sequence[float], y: Sequence[float]) -> Coefficient:
    """Product-moment correlation, two-pass (mean first, then centred sums).

    Returns None when n < 2 or either series has zero variance.
    """
    a, b = _as_pair(x, y)
    if a.size < 2:
        return None
    # the float mean of a constant series need not equal its value
    if a.min() == a.max() or b.min() == b.max():
        return None
    a = a - a.mean()
    b = b - b.mean()
    saa = float(np.dot(a, a))
    sbb = float(np.dot(b, b))
    denominator = math.sqrt(saa * sbb)
    if denominator == 0.0:
        return None
    r = float(np.dot(a, b)) / denominator
    if not math.isfinite(r):
        return None
    return max(-1.0, min(1.0, r))


def spearman(x: Sequence[float], y: Sequence[float]) -> Coefficient:
    """Pearson correlation of average ranks (ties share their mean rank)."""
    a, b = _as_pair(x, y)
    if a.size < 2:
        return None
    return pearson(rankdata(a, method="average"), rankdata(b, method="average"))


def round_series(x: Sequence[float], scale: Optional[RatingScale] = None) -> List[int]:
    """Round to the nearest integer, halves away from zero, then clamp to the scale."""
    rounded = []
    for value in x:
        magnitude = abs(value)
        r = int(math.floor(magnitude))
        if magnitude - r >= 0.5:
            r += 1
        r = r if value >= 0 else -r
        if scale is not None:
            r = min(max(r, scale.min), scale.max)
        rounded.append(r)
    return rounded


def human_skewness(values: Sequence[float]) -> Coefficient:
    a = np.asarray(values, dtype=np.float64)
    if a.size < 3 or float(np.ptp(a)) == 0.0:
        return None
    return float(skew(a))


def alignment_matrix(
    s: PairedSeries,
    scale: RatingScale,
    dataset: str = "",
    feature: str = "",
    model: str = "",
    threshold: float = DEFAULT_DIVERGENCE_THRESHOLD,
    rounding: RoundingSide = RoundingSide.BOTH,
    estimate: str = "weighted",
    n_dropped: int = 0,
    n_noncompliant: int = 0,
) -> AlignmentResult:
    """Pearson and Spearman on raw and on rounded values.

    Raises:
        TooFewPairs: With fewer than three pairs.
    """
    if len(s) < MIN_PAIRS:
        raise TooFewPairs(f"{feature}/{model}: {len(s)} pairs, need at least {MIN_PAIRS}")
    human = list(s.human)
    model_values = list(s.model)
    human_r = round_series(human, scale) if rounding in (RoundingSide.BOTH, RoundingSide.HUMAN) else human
    model_r = round_series(model_values, scale) if rounding in (RoundingSide.BOTH, RoundingSide.MODEL) else model_values

    pearson_raw = pearson(human, model_values)
    spearman_raw = spearman(human, model_values)
    divergent = (pearson_raw is not None and spearman_raw is not None
                 and abs(pearson_raw - spearman_raw) > threshold)
    return AlignmentResult(
        dataset=dataset,
        feature=feature,
        model=model,
        n_words=len(s),
        pearson_raw=pearson_raw,
        pearson_rounded=pearson(human_r, model_r),
        spearman_raw=spearman_raw,
        spearman_rounded=spearman(human_r, model_r),
        divergence_flag=divergent,
        estimate=estimate,
        n_dropped=n_dropped,
        n_noncompliant=n_noncompliant,
        human_skewness=human_skewness(human),
    )


def undefined_result(dataset: str, feature: str, model: str, n_words: int, n_dropped: int,
                     estimate: str = "weighted", n_noncompliant: int = 0) -> AlignmentResult:
    """Result row for a pair that had too few surviving words to score."""
    return AlignmentResult(dataset, feature, model, n_words, None, None, None, None, False,
                           estimate, n_dropped, n_noncompliant, None)


RESULT_COLUMNS = [f.name for f in fields(AlignmentResult)]


def results_frame(results: Sequence[AlignmentResult]) -> pd.DataFrame:
    """Results as a DataFrame, one row per (dataset, feature, model, estimate)."""
    frame = pd.DataFrame([asdict(r) for r in results], columns=RESULT_COLUMNS)
    return frame.astype({"n_words": "int64", "n_dropped": "int64", "n_noncompliant": "int64",
                         "divergence_flag": "bool"})


def write_scores(results: Sequence[AlignmentResult], path: Union[str, Path]) -> Path:
    """Write results as CSV; Undefined coefficients become empty cells."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    results_frame(results).to_csv(path, index=False, lineterminator="\n", na_rep="")
    return path


def _cell(value) -> Coefficient:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return float(value)


def read_scores(path: Union[str, Path]) -> List[AlignmentResult]:
    """Read a CSV written by :func:`write_scores`."""
    frame = pd.read_csv(path, dtype={"dataset": str, "feature": str, "model": str, "estimate": str},
                        keep_default_na=False, na_values=[""], float_precision="round_trip")
    results = []
    for row in frame.to_dict("records"):
        results.append(AlignmentResult(
            dataset=row["dataset"],
            feature=row["feature"],
            model=row["model"],
            n_words=int(row["n_words"]),
            pearson_raw=_cell(row["pearson_raw"]),
            pearson_rounded=_cell(row["pearson_rounded"]),
            spearman_raw=_cell(row["spearman_raw"]),
            spearman_rounded=_cell(row["spearman_rounded"]),
            divergence_flag=str(row["divergence_flag"]).lower() == "true",
            estimate=row["estimate"],
            n_dropped=int(row["n_dropped"]),
            n_noncompliant=int(row["n_noncompliant"]),
            human_skewness=_cell(row["human_skewness"]),
        ))
    return results
