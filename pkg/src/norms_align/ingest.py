import json
import logging
import math
import re
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from norms_align.errors import FileUnreadable, MissingColumn, NotEnoughWords, StorageError
from norms_align.norms import (
    DatasetId, FeatureRegistry, NormDataset, WordRating, features_for, parse_dataset_id,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ColumnMapping:
    """Where the word and the per-feature statistics live in a norm table.

    Attributes:
        word_column: Header of the word column.
        mean_columns: Dict mapping feature id to the header of its mean column.
        sd_columns: Optional dict mapping feature id to its SD column.
        n_columns: Optional dict mapping feature id to its rater-count column.
        header_rows: 1 for a flat header, 2 for a grouped header flattened as ``TOP.SUB``.
        lowercase_words: Lower-case words on ingest (the Lancaster file is upper case).
    """
    word_column: str
    mean_columns: Dict[str, str]
    sd_columns: Dict[str, str] = field(default_factory=dict)
    n_columns: Dict[str, str] = field(default_factory=dict)
    header_rows: int = 1
    lowercase_words: bool = False

    def merged(self, overrides: Optional[Dict]) -> "ColumnMapping":
        """Return a copy with config overrides applied (dict keys merge, scalars replace)."""
        if not overrides:
            return self
        values = asdict(self)
        for key, value in overrides.items():
            if key not in values:
                raise ValueError(f"Unknown column mapping key '{key}'. Must be one of {list(values)}")
            if isinstance(values[key], dict) and isinstance(value, dict):
                values[key] = {**values[key], **value}
            else:
                values[key] = value
        return ColumnMapping(**values)


_GLASGOW_CODES = {
    "arousal": "AROU",
    "valence": "VAL",
    "dominance": "DOM",
    "concreteness": "CNC",
    "imageability": "IMAG",
    "familiarity": "FAM",
    "gender": "GEND",
}

GLASGOW_MAPPING = ColumnMapping(
    word_column="Words",
    mean_columns={fid: f"{code}.M" for fid, code in _GLASGOW_CODES.items()},
    sd_columns={fid: f"{code}.SD" for fid, code in _GLASGOW_CODES.items()},
    n_columns={fid: f"{code}.N" for fid, code in _GLASGOW_CODES.items()},
    header_rows=2,
)

_LANCASTER_MODALITIES = ["interoceptive", "gustatory", "olfactory", "haptic", "auditory", "visual"]

LANCASTER_MAPPING = ColumnMapping(
    word_column="Word",
    mean_columns={fid: f"{fid.capitalize()}.mean" for fid in _LANCASTER_MODALITIES},
    sd_columns={fid: f"{fid.capitalize()}.SD" for fid in _LANCASTER_MODALITIES},
    lowercase_words=True,
)

DEFAULT_MAPPINGS = {
    DatasetId.GLASGOW: GLASGOW_MAPPING,
    DatasetId.LANCASTER: LANCASTER_MAPPING,
}


@dataclass
class IngestReport:
    """Accounting of one ingest: every input row is either accepted or a violation.

    Violations are (physical line number, reason) pairs in file order.
    """
    dataset: str
    rows_read: int = 0
    rows_accepted: int = 0
    violations: List[Tuple[int, str]] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "dataset": self.dataset,
            "rows_read": self.rows_read,
            "rows_accepted": self.rows_accepted,
            "violations": [[row, reason] for row, reason in self.violations],
        }


def _flatten_header(rows: List[List[str]]) -> List[str]:
    """Flatten a grouped header: the top row is forward-filled, sub labels joined with '.'."""
    if len(rows) == 1:
        return [cell.strip() for cell in rows[0]]
    names = []
    top_current = ""
    for ix in range(len(rows[0])):
        top = rows[0][ix].strip()
        if top:
            top_current = top
        parts = [top_current] + [row[ix].strip() for row in rows[1:] if row[ix].strip()]
        names.append(".".join(p for p in parts if p))
    return names


# Parser warnings of both pandas engines name the physical line and its field count.
_SKIPPED_LINE_RE = re.compile(r"Skipping line (\d+):.*?saw (\d+)")


def _read_table(path: Path, header_rows: int) -> Tuple[List[str], pd.DataFrame, List[int], List[Tuple[int, int]]]:
    """Read a norm table as strings.

    Returns:
        The flattened header, the body rows, the physical line number of each
        body row and the (line, field count) of every line too wide to parse.
        Blank lines are dropped; line numbers assume one record per line.
    """
    if not path.is_file():
        raise FileUnreadable(f"Norm file {path.as_posix()} not found")
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", pd.errors.ParserWarning)
            raw = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, encoding="utf-8",
                              engine="python", skip_blank_lines=False, on_bad_lines="warn")
    except pd.errors.EmptyDataError:
        raise FileUnreadable(f"Norm file {path.as_posix()} is empty")
    except (UnicodeDecodeError, pd.errors.ParserError, OSError) as e:
        raise FileUnreadable(f"Cannot parse {path.as_posix()}: {e}")
    malformed = sorted(
        (int(line), int(saw))
        for w in caught if issubclass(w.category, pd.errors.ParserWarning)
        for line, saw in _SKIPPED_LINE_RE.findall(str(w.message))
    )
    skipped = {line for line, _ in malformed}
    raw = raw.fillna("")
    line_numbers = [n for n in range(1, len(raw) + len(skipped) + 1) if n not in skipped][:len(raw)]
    filled = raw.apply(lambda column: column.str.strip()).ne("").any(axis=1)
    raw = raw[filled].reset_index(drop=True)
    line_numbers = [n for n, keep in zip(line_numbers, filled) if keep]
    if len(raw) < header_rows:
        raise FileUnreadable(f"Norm file {path.as_posix()} has no header row")
    header = _flatten_header(raw.iloc[:header_rows].values.tolist())
    body = raw.iloc[header_rows:].reset_index(drop=True)
    body.columns = header
    return header, body, line_numbers[header_rows:], malformed


def _parse_float(text: str) -> Optional[float]:
    text = text.strip()
    if not text:
        return None
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def load_norms(path: PathLike, dataset: DatasetId, mapping: ColumnMapping,
               registry: Optional[FeatureRegistry] = None) -> Tuple[NormDataset, IngestReport]:
    """Parse a published norm table into a NormDataset.

    A row is accepted for all features or rejected as a whole; rejected rows are
    recorded in the report, never raised.

    Raises:
        FileUnreadable: The file is missing or not CSV.
        MissingColumn: The word column or a mapped mean column is absent.
    """
    path = Path(path)
    features = features_for(dataset, registry)
    for feature in features:
        if feature.id not in mapping.mean_columns:
            raise MissingColumn(f"<mean column for {feature.id}>")

    header, body, line_numbers, malformed = _read_table(path, mapping.header_rows)
    for column in [mapping.word_column] + [mapping.mean_columns[f.id] for f in features]:
        if column not in header:
            raise MissingColumn(column)
    sd_columns = {f.id: mapping.sd_columns[f.id] for f in features
                  if f.id in mapping.sd_columns and mapping.sd_columns[f.id] in header}
    n_columns = {f.id: mapping.n_columns[f.id] for f in features
                 if f.id in mapping.n_columns and mapping.n_columns[f.id] in header}
    ignored = set(header) - {mapping.word_column} - set(mapping.mean_columns.values()) \
        - set(sd_columns.values()) - set(n_columns.values())
    if ignored:
        logger.debug("%s: ignoring columns %s", path.name, sorted(ignored))

    report = IngestReport(dataset=dataset.value)
    ratings: Dict[str, List[WordRating]] = {f.id: [] for f in features}
    seen = set()

    for line_no, row in zip(line_numbers, body.to_dict("records")):
        report.rows_read += 1
        word = row[mapping.word_column].strip()
        if mapping.lowercase_words:
            word = word.lower()

        reason = None
        accepted: Dict[str, WordRating] = {}
        if not word:
            reason = "blank word"
        elif word in seen:
            reason = f"duplicate word '{word}'"
        else:
            for feature in features:
                mean = _parse_float(row[mapping.mean_columns[feature.id]])
                if mean is None:
                    reason = f"{feature.id}: missing or non-numeric mean"
                    break
                if not feature.scale.contains(mean):
                    reason = f"{feature.id}: mean {mean} outside scale {feature.scale}"
                    break
                sd = None
                if feature.id in sd_columns:
                    sd_text = row[sd_columns[feature.id]]
                    sd = _parse_float(sd_text)
                    if sd_text.strip() and (sd is None or sd < 0):
                        reason = f"{feature.id}: invalid SD '{sd_text}'"
                        break
                n_raters = None
                if feature.id in n_columns:
                    n_value = _parse_float(row[n_columns[feature.id]])
                    if n_value is not None and n_value >= 1 and n_value.is_integer():
                        n_raters = int(n_value)
                accepted[feature.id] = WordRating(word, mean, sd, n_raters)

        if reason is not None:
            report.violations.append((line_no, reason))
            logger.debug("%s line %d rejected: %s", path.name, line_no, reason)
            continue
        seen.add(word)
        for feature_id, rating in accepted.items():
            ratings[feature_id].append(rating)
        report.rows_accepted += 1

    for line_no, n_fields in malformed:
        report.rows_read += 1
        report.violations.append((line_no, f"malformed line with {n_fields} fields, expected {len(header)}"))
    report.violations.sort(key=lambda v: v[0])

    if report.violations:
        logger.warning("%s: %d of %d rows rejected", path.name, len(report.violations), report.rows_read)
    ds = NormDataset(dataset, {fid: tuple(words) for fid, words in ratings.items()}, registry)
    return ds, report


def load_glasgow(path: PathLike, mapping: ColumnMapping = GLASGOW_MAPPING,
                 registry: Optional[FeatureRegistry] = None) -> Tuple[NormDataset, IngestReport]:
    """Load the Glasgow norms (7 features)."""
    return load_norms(path, DatasetId.GLASGOW, mapping, registry)


def load_lancaster(path: PathLike, mapping: ColumnMapping = LANCASTER_MAPPING,
                   registry: Optional[FeatureRegistry] = None) -> Tuple[NormDataset, IngestReport]:
    """Load the six Lancaster perceptual modalities; body-part columns are never read."""
    return load_norms(path, DatasetId.LANCASTER, mapping, registry)


def sample_words(ds: NormDataset, feature: str, n: Optional[int], seed: int) -> List[WordRating]:
    """Uniform sample without replacement, returned in dataset order.

    Args:
        ds: Dataset to sample from.
        feature: Feature id.
        n: Sample size; None means all words.
        seed: Seed of the numpy generator.

    Raises:
        NotEnoughWords: If n exceeds the number of words of the feature.
    """
    words = list(ds.words(feature))
    if n is None or n == len(words):
        return words
    if n > len(words) or n < 0:
        raise NotEnoughWords(f"Requested {n} words of {feature}, only {len(words)} available")
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(words), size=n, replace=False))
    return [words[ix] for ix in picked]


def write_dataset(ds: NormDataset, path: PathLike) -> Path:
    """Write the canonical line-delimited dataset: one record per word-feature pair."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with path.open("w", encoding="utf-8", newline="\n") as f:
            for feature in ds.registry.for_dataset(ds.id):
                for rating in ds.words(feature.id):
                    record = {
                        "dataset": ds.id.value,
                        "feature": feature.id,
                        "word": rating.word,
                        "mean": rating.human_mean,
                        "sd": rating.human_sd,
                        "n": rating.n_raters,
                    }
                    f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    except OSError as e:
        raise StorageError(f"Cannot write {path.as_posix()}: {e}")
    return path


def read_dataset(path: PathLike, registry: Optional[FeatureRegistry] = None) -> NormDataset:
    """Read a canonical dataset file written by :func:`write_dataset`."""
    path = Path(path)
    if not path.is_file():
        raise FileUnreadable(f"Dataset file {path.as_posix()} not found")
    dataset = None
    ratings: Dict[str, List[WordRating]] = {}
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise FileUnreadable(f"{path.as_posix()} line {line_no}: {e}")
            dataset = parse_dataset_id(record["dataset"])
            ratings.setdefault(record["feature"], []).append(
                WordRating(record["word"], record["mean"], record.get("sd"), record.get("n")))
    if dataset is None:
        dataset = parse_dataset_id(path.stem)
    return NormDataset(dataset, {fid: tuple(words) for fid, words in ratings.items()}, registry)


def write_ingest_report(reports: List[IngestReport], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        json.dump([r.to_dict() for r in reports], f, indent=2, ensure_ascii=False)
        f.write("\n")
    return path
