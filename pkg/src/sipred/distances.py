"""MSE distances between clean-reference and test-signal representations.

One distance definition covers all three feature families: the mean over
frames and feature bins of the squared difference, after truncating both
matrices to the shorter frame count (zero lag).  The dataset-level study
computes distances on the left (first) channel only and correlates them with
the correctness labels.
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
from sipred.corpus import UtteranceRecord, load_waveform
from sipred.features import (
    BackendDescriptor,
    FeatureKind,
    FeatureMatrix,
    SPEC_BACKEND_ID,
    extract_fe,
    extract_ol,
    extract_spectrogram,
)

logger = logging.getLogger(__name__)

MEASURE_BY_KIND = {
    FeatureKind.FE: "d_FE",
    FeatureKind.OL: "d_OL",
    FeatureKind.SPEC: "d_SG",
}

STUDY_CHANNEL = "left"  # the study's stated convention


@dataclass(frozen=True)
class DistanceResult:
    utterance_id: str
    measure: str  # d_FE | d_OL | d_SG
    test_signal_kind: str  # enhanced | hls
    backend_id: str
    value: float

    def __post_init__(self):
        if self.value < 0.0 or not math.isfinite(self.value):
            raise ValueError(f"distance must be finite and >= 0, got {self.value}")


@dataclass(frozen=True)
class CorrelationRow:
    representation: str
    measure: str
    test_signal_kind: str
    spearman: float
    pearson: float
    n: int
    undefined: bool = False  # constant distances or labels: correlations are NaN


def mse_distance(ref: FeatureMatrix, test: FeatureMatrix) -> float:
    """Mean squared difference over aligned frames and feature bins.

    Frame counts are aligned by truncation to min(T_ref, T_test); a feature
    dimension mismatch is an error, never an implicit projection.
    """
    if ref.feature_kind != test.feature_kind:
        raise ValueError(
            f"feature kinds differ: {ref.feature_kind.value} vs {test.feature_kind.value}"
        )
    if ref.feature_dim != test.feature_dim:
        raise ValueError(f"feature dims differ: {ref.feature_dim} vs {test.feature_dim}")
    t = min(ref.n_frames, test.n_frames)
    if t < 1:
        raise ValueError("no frame overlap after truncation")
    diff = ref.values[:t].astype(np.float64) - test.values[:t].astype(np.float64)
    return float(np.mean(diff * diff))


def _lag_search_mse(ref: FeatureMatrix, test: FeatureMatrix, max_lag: int) -> float:
    """Minimum mse_distance over integer frame lags in [-max_lag, max_lag]."""
    best = math.inf
    a, b = ref.values.astype(np.float64), test.values.astype(np.float64)
    for lag in range(-max_lag, max_lag + 1):
        ra = a[max(0, -lag):]
        rb = b[max(0, lag):]
        t = min(len(ra), len(rb))
        if t < 1:
            continue
        d = ra[:t] - rb[:t]
        best = min(best, float(np.mean(d * d)))
    if not math.isfinite(best):
        raise ValueError("no frame overlap at any searched lag")
    return best


def run_distance_study(
    records: Sequence[UtteranceRecord],
    backends: Sequence[BackendDescriptor],
    signal_kinds: Sequence[str] = ("enhanced",),
    sample_rate: int = 16000,
    lag_search: int = 0,
) -> list[DistanceResult]:
    """Per-utterance distances between the clean reference and test signals.

    For each record: d_SG, plus d_FE and d_OL for every backend, computed on
    the left channel at 16 kHz.  Records without a clean reference are skipped
    with a diagnostic, and a failure in one record never aborts the study.
    ``lag_search`` > 0 additionally minimizes over that many frames of lag
    (off by default; zero-lag truncation is the documented alignment).
    """
    results: list[DistanceResult] = []
    for record in sorted(records, key=lambda r: r.utterance_id):
        if record.clean_audio_ref is None:
            logger.warning("skipping %s: no clean reference audio", record.utterance_id)
            continue
        try:
            clean = load_waveform(record.clean_audio_ref, sample_rate)
            for kind in signal_kinds:
                test_wave = load_waveform(record.audio_ref(kind), sample_rate)
                results.extend(
                    _distances_for_pair(record.utterance_id, clean, test_wave, kind, backends, lag_search)
                )
        except Exception as exc:
            logger.warning("distance study failed for %s: %s", record.utterance_id, exc)
            continue
    return results


def _distances_for_pair(utterance_id, clean, test_wave, signal_kind, backends, lag_search):
    def dist(ref_m, test_m):
        if lag_search > 0:
            return _lag_search_mse(ref_m, test_m, lag_search)
        return mse_distance(ref_m, test_m)

    out = [
        DistanceResult(
            utterance_id=utterance_id,
            measure=MEASURE_BY_KIND[FeatureKind.SPEC],
            test_signal_kind=signal_kind,
            backend_id=SPEC_BACKEND_ID,
            value=dist(
                extract_spectrogram(clean, STUDY_CHANNEL),
                extract_spectrogram(test_wave, STUDY_CHANNEL),
            ),
        )
    ]
    for backend in backends:
        for kind, extractor in ((FeatureKind.FE, extract_fe), (FeatureKind.OL, extract_ol)):
            out.append(
                DistanceResult(
                    utterance_id=utterance_id,
                    measure=MEASURE_BY_KIND[kind],
                    test_signal_kind=signal_kind,
                    backend_id=backend.backend_id,
                    value=dist(
                        extractor(backend, clean, STUDY_CHANNEL),
                        extractor(backend, test_wave, STUDY_CHANNEL),
                    ),
                )
            )
    return out


def correlate_with_correctness(
    results: Sequence[DistanceResult],
    records: Sequence[UtteranceRecord],
) -> list[CorrelationRow]:
    """Correlate each (representation, measure, signal kind) with correctness.

    Spearman uses average-rank tie handling, Pearson the standard
    product-moment form.  Constant distances or labels make a correlation
    undefined; the row is flagged rather than dropped.
    """
    correctness = {r.utterance_id: r.correctness for r in records}
    groups: dict[tuple[str, str, str], list[tuple[float, float]]] = {}
    for res in results:
        if res.utterance_id not in correctness:
            raise ValueError(f"distance result for unknown utterance {res.utterance_id!r}")
        key = (res.backend_id, res.measure, res.test_signal_kind)
        groups.setdefault(key, []).append((res.value, correctness[res.utterance_id]))

    rows = []
    for (representation, measure, signal_kind), pairs in sorted(groups.items()):
        if len(pairs) < 2:
            raise ValueError(
                f"need >= 2 matched pairs for {representation}/{measure}/{signal_kind}, got {len(pairs)}"
            )
        d = np.array([p[0] for p in pairs])
        c = np.array([p[1] for p in pairs])
        rho = stats.spearman(d, c)
        r = stats.pearson(d, c)
        undefined = math.isnan(rho) or math.isnan(r)
        rows.append(
            CorrelationRow(
                representation=representation,
                measure=measure,
                test_signal_kind=signal_kind,
                spearman=rho,
                pearson=r,
                n=len(pairs),
                undefined=undefined,
            )
        )
    return rows


def write_distance_csv(results: Sequence[DistanceResult], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["utterance_id", "representation", "measure", "signal_kind", "value"])
        for res in sorted(results, key=lambda r: (r.utterance_id, r.backend_id, r.measure, r.test_signal_kind)):
            writer.writerow([res.utterance_id, res.backend_id, res.measure, res.test_signal_kind, f"{res.value:.12g}"])


def write_correlation_csv(rows: Sequence[CorrelationRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["representation", "measure", "signal_kind", "spearman", "pearson", "n", "undefined"])
        for row in rows:
            writer.writerow(
                [
                    row.representation,
                    row.measure,
                    row.test_signal_kind,
                    f"{row.spearman:.6g}",
                    f"{row.pearson:.6g}",
                    row.n,
                    int(row.undefined),
                ]
            )
