import csv
import pytest
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

GLASGOW_CODES = ["AROU", "VAL", "DOM", "CNC", "IMAG", "FAM", "GEND"]
LANCASTER_MODALITIES = ["Interoceptive", "Gustatory", "Olfactory", "Haptic", "Auditory", "Visual"]

GlasgowRow = Tuple[str, Sequence[object]]


def write_glasgow_table(path: Path, rows: Sequence[GlasgowRow], sd: str = "1.10", n: str = "30",
                        extra_lines: Sequence[Sequence[str]] = ()) -> Path:
    """Write a table in the published Glasgow layout (grouped two-row header)."""
    top = ["Words"] + [cell for code in GLASGOW_CODES for cell in (code, "", "")]
    sub = [""] + ["M", "SD", "N"] * len(GLASGOW_CODES)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(top)
        writer.writerow(sub)
        for word, means in rows:
            cells = [word]
            for mean in means:
                cells += [mean if isinstance(mean, str) else f"{mean:.2f}", sd, n]
            writer.writerow(cells)
        for line in extra_lines:
            writer.writerow(line)
    return path


def write_lancaster_table(path: Path, rows: Sequence[GlasgowRow]) -> Path:
    """Write a table in the published Lancaster layout, body-part columns included."""
    header = ["Word"] + [f"{m}.{stat}" for m in LANCASTER_MODALITIES for stat in ("mean", "SD")]
    header += ["Foot_leg.mean", "Hand_arm.mean"]
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for word, means in rows:
            cells = [word]
            for mean in means:
                cells += [mean if isinstance(mean, str) else f"{mean:.2f}", "0.90"]
            cells += ["1.00", "2.00"]
            writer.writerow(cells)
    return path


def synthetic_glasgow_rows(count: int, seed: int = 0) -> List[GlasgowRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for ix in range(count):
        means = [round(float(v), 2) for v in rng.uniform(1.0, 9.0, size=6)]
        means.append(round(float(rng.uniform(1.0, 7.0)), 2))
        rows.append((f"word{ix:03d}", means))
    return rows


def synthetic_lancaster_rows(count: int, seed: int = 0) -> List[GlasgowRow]:
    rng = np.random.default_rng(seed)
    return [(f"WORD{ix:03d}", [round(float(v), 2) for v in rng.uniform(0.0, 5.0, size=6)])
            for ix in range(count)]

@pytest.fixture
def glasgow_csv(tmp_path: Path):
    """Factory writing a Glasgow table under tmp_path."""
    def _write(rows: Optional[Sequence[GlasgowRow]] = None, name: str = "glasgow.csv", **kwargs) -> Path:
        return write_glasgow_table(tmp_path / name, synthetic_glasgow_rows(20) if rows is None else rows, **kwargs)
    return _write


@pytest.fixture
def lancaster_csv(tmp_path: Path):
    """Factory writing a Lancaster table under tmp_path."""
    def _write(rows: Optional[Sequence[GlasgowRow]] = None, name: str = "lancaster.csv") -> Path:
        return write_lancaster_table(tmp_path / name, synthetic_lancaster_rows(20) if rows is None else rows)
    return _write


@pytest.fixture
def glasgow_rows():
    """Seeded synthetic Glasgow rows: ``glasgow_rows(count, seed=0)``."""
    return synthetic_glasgow_rows


@pytest.fixture
def lancaster_rows():
    """Seeded synthetic Lancaster rows (upper-case words): ``lancaster_rows(count, seed=0)``."""
    return synthetic_lancaster_rows


@pytest.fixture(scope="session")
def glasgow_table():
    """Writer of Glasgow tables at an explicit path: ``glasgow_table(path, rows, **kwargs)``."""
    return write_glasgow_table
