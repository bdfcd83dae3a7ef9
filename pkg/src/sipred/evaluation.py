"""Scoring and reporting: RMSE / error variance / Spearman / Pearson on the
0-100 correctness scale, with per-system and per-listener breakdowns.

The error-variance column has no single established definition; the default
here is the population variance of the per-utterance squared error on the
normalized 0-1 scale, and the definition used is always carried in the
summary and printed next to the results.  Undefined correlations (constant
predictions or labels) are flagged, not raised, so degenerate models still
produce a report.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from sipred import stats
from sipred.corpus import HistogramTable, UtteranceRecord
from sipred.predictor import Prediction

logger = logging.getLogger(__name__)

GROUP_KINDS = ("system", "listener")

# variance of squared errors on the 0-1 scale (default), or of raw errors on 0-100
VAR_DEFINITIONS = ("var_sq_err_01", "var_err_0100")


@dataclass(frozen=True)
class MetricSummary:
    rmse: float  # percentage points
    error_var: float
    spearman: float
    pearson: float
    n: int
    var_definition: str = "var_sq_err_01"
    correlation_undefined: bool = False

    def __post_init__(self):
        if self.rmse < 0 or self.error_var < 0:
            raise ValueError("rmse and error_var must be >= 0")
        if self.n < 2:
            raise ValueError("need at least 2 scored utterances")


@dataclass(frozen=True)
class GroupRow:
    group_id: str
    mean_predicted: float  # percent
    mean_true: float  # percent
    n: int
    unseen_in_training: bool


@dataclass(frozen=True)
class GroupBreakdown:
    group_kind: str  # system | listener
    rows: tuple[GroupRow, ...]

    def __post_init__(self):
        if self.group_kind not in GROUP_KINDS:
            raise ValueError(f"group_kind must be one of {GROUP_KINDS}")


def _match(predictions: Sequence[Prediction], records: Sequence[UtteranceRecord]):
    """Pair each prediction with its record; unmatched or duplicate ids are errors."""
    by_id: dict[str, UtteranceRecord] = {}
    for record in records:
        by_id[record.utterance_id] = record
    unmatched = [p.utterance_id for p in predictions if p.utterance_id not in by_id]
    if unmatched:
        raise ValueError(f"predictions without matching records: {sorted(unmatched)}")
    seen: set[str] = set()
    pairs = []
    for pred in sorted(predictions, key=lambda p: p.utterance_id):
        if pred.utterance_id in seen:
            raise ValueError(f"duplicate prediction for utterance {pred.utterance_id!r}")
        seen.add(pred.utterance_id)
        pairs.append((pred, by_id[pred.utterance_id]))
    return pairs


def score(
    predictions: Sequence[Prediction],
    records: Sequence[UtteranceRecord],
    var_definition: str = "var_sq_err_01",
) -> MetricSummary:
    """Aggregate metrics with predictions rescaled to 0-100."""
    if var_definition not in VAR_DEFINITIONS:
        raise ValueError(f"var_definition must be one of {VAR_DEFINITIONS}")
    pairs = _match(predictions, records)
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 scored utterances, got {len(pairs)}")
    pred = np.array([100.0 * p.i_hat for p, _ in pairs])
    true = np.array([r.correctness for _, r in pairs])

    rmse = stats.rmse(pred, true)
    if var_definition == "var_sq_err_01":
        err = (pred / 100.0 - true / 100.0) ** 2
        error_var = float(np.var(err))
    else:
        error_var = float(np.var(pred - true))
    rho = stats.spearman(pred, true)
    r = stats.pearson(pred, true)
    undefined = math.isnan(rho) or math.isnan(r)
    if undefined:
        logger.warning("correlations undefined: constant predictions or labels")
    return MetricSummary(
        rmse=rmse,
        error_var=error_var,
        spearman=rho,
        pearson=r,
        n=len(pairs),
        var_definition=var_definition,
        correlation_undefined=undefined,
    )


def breakdown(
    predictions: Sequence[Prediction],
    records: Sequence[UtteranceRecord],
    group_kind: str,
    training_groups: set[str],
) -> GroupBreakdown:
    """Per-group mean predicted vs true correctness, unseen groups flagged.

    Rows are ordered by descending mean true correctness (ties by group id),
    matching the chart layout.
    """
    if group_kind not in GROUP_KINDS:
        raise ValueError(f"group_kind must be one of {GROUP_KINDS}")
    pairs = _match(predictions, records)
    groups: dict[str, list[tuple[float, float]]] = {}
    for pred, record in pairs:
        group_id = record.system_id if group_kind == "system" else record.listener_id
        groups.setdefault(group_id, []).append((100.0 * pred.i_hat, record.correctness))
    if not groups:
        raise ValueError("no groups to break down (empty predictions)")
    rows = [
        GroupRow(
            group_id=group_id,
            mean_predicted=float(np.mean([v[0] for v in values])),
            mean_true=float(np.mean([v[1] for v in values])),
            n=len(values),
            unseen_in_training=group_id not in training_groups,
        )
        for group_id, values in groups.items()
    ]
    rows.sort(key=lambda r: (-r.mean_true, r.group_id))
    return GroupBreakdown(group_kind=group_kind, rows=tuple(rows))


# ---------------------------------------------------------------------------
# Report bundle
# ---------------------------------------------------------------------------

def write_metrics_csv(named_summaries: Sequence[tuple[str, MetricSummary]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model_name", "rmse", "var", "spearman", "pearson", "n", "var_definition"])
        for name, summary in named_summaries:
            writer.writerow(
                [
                    name,
                    f"{summary.rmse:.6g}",
                    f"{summary.error_var:.6g}",
                    f"{summary.spearman:.6g}",
                    f"{summary.pearson:.6g}",
                    summary.n,
                    summary.var_definition,
                ]
            )


def write_breakdown_csv(bd: GroupBreakdown, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["group_kind", "group_id", "mean_pred", "mean_true", "n", "unseen"])
        for row in bd.rows:
            writer.writerow(
                [bd.group_kind, row.group_id, f"{row.mean_predicted:.6g}", f"{row.mean_true:.6g}", row.n, int(row.unseen_in_training)]
            )


def write_predictions_csv(
    predictions: Sequence[Prediction],
    records: Sequence[UtteranceRecord],
    path: str | Path,
) -> None:
    by_id = {r.utterance_id: r for r in records}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["utterance_id", "predicted_0_100", "left", "right", "correctness"])
        for pred in sorted(predictions, key=lambda p: p.utterance_id):
            record = by_id.get(pred.utterance_id)
            writer.writerow(
                [
                    pred.utterance_id,
                    f"{100.0 * pred.i_hat:.6g}",
                    f"{pred.per_channel.get('left', float('nan')):.6g}",
                    f"{pred.per_channel.get('right', float('nan')):.6g}",
                    "" if record is None else f"{record.correctness:.6g}",
                ]
            )


def _plot_breakdown(bd: GroupBreakdown, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [r.group_id for r in bd.rows]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(6.0, 0.5 * len(labels)), 4.0))
    ax.bar(x - 0.2, [r.mean_predicted for r in bd.rows], width=0.4, label="predicted", color="seagreen")
    ax.bar(x + 0.2, [r.mean_true for r in bd.rows], width=0.4, label="true", color="sienna")
    ax.set_xticks(x)
    ax.set_xticklabels(
        labels,
        rotation=60,
        ha="right",
        fontsize=8,
    )
    for tick, row in zip(ax.get_xticklabels(), bd.rows):
        if row.unseen_in_training:
            tick.set_fontweight("bold")
    ax.set_ylabel("mean correctness")
    ax.set_title(f"mean predicted vs true correctness by {bd.group_kind}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_histogram(table: HistogramTable, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_top, ax_bottom) = plt.subplots(2, 1, figsize=(7.0, 6.0))
    widths = np.diff(table.bin_edges)
    ax_top.bar(table.bin_edges[:-1], table.counts, width=widths, align="edge", edgecolor="black")
    total = table.counts.sum()
    if total:
        overall = float(np.sum((table.bin_edges[:-1] + widths / 2) * table.counts) / total)
        ax_top.axvline(overall, linestyle=":", color="black")
    ax_top.set_xlabel("correctness")
    ax_top.set_ylabel("count")

    listeners = [m[0] for m in table.listener_means]
    means = [m[1] for m in table.listener_means]
    ax_bottom.bar(np.arange(len(listeners)), means)
    if means:
        ax_bottom.axhline(float(np.mean(means)), linestyle=":", color="black")
    ax_bottom.set_xticks(np.arange(len(listeners)))
    ax_bottom.set_xticklabels(listeners, rotation=60, ha="right", fontsize=8)
    ax_bottom.set_ylabel("mean correctness")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(
    named_summaries: Sequence[tuple[str, MetricSummary]],
    breakdowns: Sequence[GroupBreakdown],
    out_dir: str | Path,
    histogram: Optional[HistogramTable] = None,
) -> list[Path]:
    """Write the metrics table, per-group paired-bar charts and the histogram.

    Returns the list of written files.  An empty breakdown list produces the
    table only (with a warning), which is still a successful report.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    metrics_path = out_dir / "metrics.csv"
    write_metrics_csv(named_summaries, metrics_path)
    written.append(metrics_path)

    if not breakdowns:
        logger.warning("no breakdowns supplied; report contains the metrics table only")
    for bd in breakdowns:
        csv_path = out_dir / f"breakdown_{bd.group_kind}.csv"
        write_breakdown_csv(bd, csv_path)
        written.append(csv_path)
        chart_path = out_dir / f"breakdown_{bd.group_kind}.png"
        _plot_breakdown(bd, chart_path)
        written.append(chart_path)

    if histogram is not None:
        hist_path = out_dir / "correctness_histogram.png"
        _plot_histogram(histogram, hist_path)
        written.append(hist_path)
    return written
