import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
from matplotlib.figure import Figure
import numpy as np

from norms_align.errors import RegistryError, TooFewAxes
from norms_align.metrics import AlignmentResult, Coefficient, results_frame
from norms_align.norms import DatasetId, FeatureRegistry, feature_registry, get_feature

logger = logging.getLogger(__name__)

RADIAL_RANGE = (-1.0, 1.0)
TARGET_BAND = (0.8, 1.0)
DEFAULT_SKEW_THRESHOLD = 1.0

# (label, AlignmentResult attribute, color, line style)
SERIES = [
    ("Pearson", "pearson_raw", "#1f77b4", "solid"),
    ("Pearson (rounded)", "pearson_rounded", "#1f77b4", "dotted"),
    ("Spearman", "spearman_raw", "#d62728", "solid"),
    ("Spearman (rounded)", "spearman_rounded", "#d62728", "dotted"),
]

# Deterministic SVG: fixed id salt, text kept as text instead of glyph paths.
_SVG_RC = {
    "svg.hashsalt": "norms-align",
    "svg.fonttype": "none",
    "path.simplify": False,
}


@dataclass(frozen=True)
class RadarSpec:
    """One radar chart: a spoke per model, a polygon per coefficient series.

    Attributes:
        title: Chart title.
        axes: Spoke labels (model names).
        series: Dict mapping series label to one value per spoke (None = Undefined).
    """
    title: str
    axes: Tuple[str, ...]
    series: Dict[str, Tuple[Coefficient, ...]]

    def __post_init__(self):
        for label, values in self.series.items():
            if len(values) != len(self.axes):
                raise ValueError(f"Series '{label}' has {len(values)} values for {len(self.axes)} axes")


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in text.lower()).strip("_")


def polygon_points(values: Sequence[Coefficient]) -> Tuple[np.ndarray, np.ndarray]:
    """Angles and radii of a closed polygon; Undefined values become NaN gaps.

    Values are clipped to the radial range. The first spoke points up and
    spokes run clockwise.
    """
    n = len(values)
    angles = np.array([i * 2 * math.pi / n for i in range(n)] + [0.0])
    radii = np.array(
        [np.nan if v is None else min(max(float(v), RADIAL_RANGE[0]), RADIAL_RANGE[1]) for v in values]
        + [np.nan if values[0] is None else min(max(float(values[0]), RADIAL_RANGE[0]), RADIAL_RANGE[1])]
    )
    return angles, radii


def radar_chart(spec: RadarSpec) -> str:
    """Render a radar chart as a self-contained SVG document.

    The shaded outer band marks the 0.8-1.0 target range. Identical specs give
    byte-identical documents.

    Raises:
        TooFewAxes: With fewer than three spokes.
    """
    if len(spec.axes) < 3:
        raise TooFewAxes(f"Radar chart '{spec.title}' needs at least 3 axes, got {len(spec.axes)}")

    with matplotlib.rc_context(_SVG_RC):
        fig = Figure(figsize=(7, 7))
        ax = fig.add_subplot(projection="polar")
        ax.set_theta_offset(math.pi / 2)
        ax.set_theta_direction(-1)
        ax.set_ylim(*RADIAL_RANGE)

        n = len(spec.axes)
        ring = np.linspace(0, 2 * math.pi, 361)
        band = ax.fill_between(ring, TARGET_BAND[0], TARGET_BAND[1], color="#2ca02c", alpha=0.15,
                               linewidth=0, label="target 0.8-1.0")
        band.set_gid("target-band")

        for ix, model in enumerate(spec.axes):
            angle = ix * 2 * math.pi / n
            (spoke,) = ax.plot([angle, angle], list(RADIAL_RANGE), color="#999999", linewidth=0.6)
            spoke.set_gid(f"spoke-{_slug(model)}")

        for label, values in spec.series.items():
            color, style = next(((c, s) for name, _, c, s in SERIES if name == label), ("#333333", "solid"))
            angles, radii = polygon_points(values)
            (line,) = ax.plot(angles, radii, color=color, linestyle=style, linewidth=1.8,
                              marker="o", markersize=3, label=label)
            line.set_gid(f"series-{_slug(label)}")

        ax.set_xticks([ix * 2 * math.pi / n for ix in range(n)])
        ax.set_xticklabels(list(spec.axes), fontsize=9)
        ax.set_yticks([-1.0, -0.5, 0.0, 0.5, 0.8, 1.0])
        ax.set_yticklabels(["-1", "-0.5", "0", "0.5", "0.8", "1"], fontsize=7, color="#666666")
        ax.xaxis.grid(False)
        ax.set_title(spec.title, y=1.08)
        ax.legend(loc="upper left", bbox_to_anchor=(1.02, 1.0), fontsize=8, frameon=False)
        fig.subplots_adjust(left=0.08, right=0.72, top=0.86, bottom=0.08)

        buffer = io.StringIO()
        fig.savefig(buffer, format="svg", metadata={"Date": None, "Creator": None})
    return buffer.getvalue()


def build_radar_specs(results: Sequence[AlignmentResult], estimate: str = "weighted",
                      registry: Optional[FeatureRegistry] = None) -> List[Tuple[str, str, RadarSpec]]:
    """Group results per (dataset, feature) into radar specs, axes sorted by model name."""
    grouped: Dict[Tuple[str, str], Dict[str, AlignmentResult]] = {}
    for r in results:
        if r.estimate == estimate:
            grouped.setdefault((r.dataset, r.feature), {})[r.model] = r
    specs = []
    for (dataset, feature), by_model in sorted(grouped.items(), key=lambda kv: _row_key(*kv[0], registry)):
        models = tuple(sorted(by_model))
        try:
            title = get_feature(feature, registry).display_name
        except RegistryError:
            title = feature
        series = {label: tuple(getattr(by_model[m], attr) for m in models) for label, attr, _, _ in SERIES}
        specs.append((dataset, feature, RadarSpec(f"{title} ({dataset})", models, series)))
    return specs


def _row_key(dataset: str, feature: str, registry: Optional[FeatureRegistry] = None) -> Tuple[int, int, str]:
    """Dataset order, then registry order of the feature; unknown ids sort last by name."""
    datasets = [d.value for d in DatasetId]
    features = [f.id for f in feature_registry(registry)]
    return (
        datasets.index(dataset) if dataset in datasets else len(datasets),
        features.index(feature) if feature in features else len(features),
        feature,
    )


def sort_results(results: Sequence[AlignmentResult],
                 registry: Optional[FeatureRegistry] = None) -> List[AlignmentResult]:
    return sorted(results, key=lambda r: (_row_key(r.dataset, r.feature, registry), r.model, r.estimate))


def results_table(results: Sequence[AlignmentResult], registry: Optional[FeatureRegistry] = None) -> str:
    """CSV table, one row per (feature, model) ordered by dataset, feature, model."""
    buffer = io.StringIO()
    results_frame(sort_results(results, registry)).to_csv(buffer, index=False, lineterminator="\n", na_rep="")
    return buffer.getvalue()


def _fmt(value: Optional[float]) -> str:
    return "undefined" if value is None else f"{value:+.3f}"


def _delta(a: Coefficient, b: Coefficient) -> Coefficient:
    return None if a is None or b is None else a - b


def is_skewed(result: AlignmentResult, skew_threshold: float = DEFAULT_SKEW_THRESHOLD,
              registry: Optional[FeatureRegistry] = None) -> bool:
    try:
        if get_feature(result.feature, registry).skew_prone:
            return True
    except RegistryError:
        pass
    return result.human_skewness is not None and abs(result.human_skewness) >= skew_threshold


def divergence_report(results: Sequence[AlignmentResult], skew_threshold: float = DEFAULT_SKEW_THRESHOLD,
                      registry: Optional[FeatureRegistry] = None) -> str:
    """Plain-text summary of pairs whose Pearson and Spearman disagree."""
    ordered = sort_results(results, registry)
    flagged = [r for r in ordered if r.divergence_flag]
    lines = ["Pearson/Spearman divergence report", ""]

    def describe(r: AlignmentResult) -> List[str]:
        return [
            f"  {r.dataset}/{r.feature} x {r.model} [{r.estimate}] n={r.n_words}",
            f"    pearson-spearman: raw {_fmt(r.divergence)}, "
            f"rounded {_fmt(_delta(r.pearson_rounded, r.spearman_rounded))}",
            f"    raw-rounded: pearson {_fmt(_delta(r.pearson_raw, r.pearson_rounded))}, "
            f"spearman {_fmt(_delta(r.spearman_raw, r.spearman_rounded))}",
        ]

    if not flagged:
        lines.append("no divergences")
    else:
        skewed = [r for r in flagged if is_skewed(r, skew_threshold, registry)]
        others = [r for r in flagged if not is_skewed(r, skew_threshold, registry)]
        lines.append(f"{len(flagged)} flagged pair(s)")
        if skewed:
            lines += ["", "Skewed features (ratings pile up at the low end; Pearson weights the high "
                          "outliers, Spearman the bulk near the mode):"]
            for r in skewed:
                lines += describe(r)
        if others:
            lines += ["", "Other features:"]
            for r in others:
                lines += describe(r)

    dropped = sum(r.n_dropped for r in ordered)
    noncompliant = sum(r.n_noncompliant for r in ordered)
    undefined = [r for r in ordered if r.pearson_raw is None and r.spearman_raw is None]
    lines += ["", f"dropped pairs: {dropped}", f"non-compliant answers: {noncompliant}"]
    for r in undefined:
        lines.append(f"undefined: {r.dataset}/{r.feature} x {r.model} [{r.estimate}] "
                     f"(n={r.n_words}, dropped={r.n_dropped})")
    return "\n".join(lines) + "\n"


def write_report(results: Sequence[AlignmentResult], out_dir: Union[str, Path], estimate: str = "weighted",
                 skew_threshold: float = DEFAULT_SKEW_THRESHOLD,
                 registry: Optional[FeatureRegistry] = None) -> List[Path]:
    """Write charts, the results table and the divergence report; returns written paths.

    Charts left in ``out_dir`` by an earlier report are removed first.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for stale in sorted(out_dir.glob("*.svg")):
        logger.debug("Removing chart %s", stale.as_posix())
        stale.unlink()
    written = []
    for dataset, feature, spec in build_radar_specs(results, estimate, registry):
        if len(spec.axes) < 3:
            logger.info("Skipping chart %s_%s: %d model(s), need 3", dataset, feature, len(spec.axes))
            continue
        path = out_dir / f"{dataset}_{feature}.svg"
        path.write_text(radar_chart(spec), encoding="utf-8", newline="\n")
        written.append(path)
    table = out_dir / "results.csv"
    table.write_text(results_table(results, registry), encoding="utf-8", newline="\n")
    divergence = out_dir / "divergence.txt"
    divergence.write_text(divergence_report(results, skew_threshold, registry), encoding="utf-8", newline="\n")
    return written + [table, divergence]
