"""CPC1-style corpus handling: manifests, audio, labels and dataset splits.

A manifest is a JSON array of trial objects using the public-release field
names (``signal``, ``scene``, ``listener``, ``system``, ``correctness``).
This module adapts those raw fields into :class:`UtteranceRecord` so nothing
downstream depends on the release naming.  Audio is located relative to an
audio root with the convention::

    <audio_root>/HA_outputs/<signal>.wav    hearing-aid output (always required)
    <audio_root>/HLS_outputs/<signal>.wav   after hearing-loss simulation
    <audio_root>/clean/<scene>.wav          clean reference

Per-record fields ``signal_path`` / ``hls_path`` / ``clean_path`` override the
convention.  Hearing-loss simulation is an external preprocessing stage; its
outputs are only ever ingested as pre-rendered audio files.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

logger = logging.getLogger(__name__)

TRACKS = ("closed", "open")
SIGNAL_KINDS = ("enhanced", "hls")

# required raw manifest fields and the locator convention
_REQUIRED_FIELDS = ("signal", "listener", "system", "correctness")
ENHANCED_DIR = "HA_outputs"
HLS_DIR = "HLS_outputs"
CLEAN_DIR = "clean"


class ManifestError(ValueError):
    """Raised when a manifest file cannot be parsed at all."""


class AudioError(ValueError):
    """Raised when an audio file cannot be decoded or is unusable."""


@dataclass(frozen=True)
class Audiogram:
    """Per-ear hearing thresholds (dB HL) at audiometric frequencies."""

    ear: str
    frequencies_hz: tuple[float, ...]
    thresholds_db_hl: tuple[float, ...]

    def __post_init__(self):
        if self.ear not in ("left", "right"):
            raise ValueError(f"ear must be 'left' or 'right', got {self.ear!r}")
        if len(self.frequencies_hz) != len(self.thresholds_db_hl):
            raise ValueError("frequencies and thresholds must have equal length")
        freqs = self.frequencies_hz
        if any(f <= 0 for f in freqs):
            raise ValueError("audiometric frequencies must be > 0")
        if any(b <= a for a, b in zip(freqs, freqs[1:])):
            raise ValueError("audiometric frequencies must be strictly increasing")


@dataclass(frozen=True)
class UtteranceRecord:
    """One listening trial: audio locators, listener/system ids and label."""

    utterance_id: str
    listener_id: str
    system_id: str
    enhanced_audio_ref: str
    correctness: float
    hls_audio_ref: Optional[str] = None
    clean_audio_ref: Optional[str] = None
    audiograms: Optional[dict[str, Audiogram]] = None

    def __post_init__(self):
        if not 0.0 <= self.correctness <= 100.0:
            raise ValueError(
                f"{self.utterance_id}: correctness must be in [0, 100], got {self.correctness}"
            )

    def audio_ref(self, signal_kind: str) -> str:
        """Locator for the requested test signal ('enhanced' or 'hls')."""
        if signal_kind == "enhanced":
            return self.enhanced_audio_ref
        if signal_kind == "hls":
            if self.hls_audio_ref is None:
                raise ValueError(f"{self.utterance_id}: no HLS audio reference")
            return self.hls_audio_ref
        raise ValueError(f"unknown signal kind {signal_kind!r}")


@dataclass(frozen=True)
class Waveform:
    """Multi-channel audio: samples are (channels, length), left is row 0."""

    samples: np.ndarray
    sample_rate: int
    channel_labels: tuple[str, ...]

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise ValueError("samples must be a (channels, length) array")
        n_channels, length = self.samples.shape
        if n_channels not in (1, 2):
            raise ValueError(f"expected 1 or 2 channels, got {n_channels}")
        if length < 1:
            raise ValueError("waveform has zero length")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be > 0")
        if len(self.channel_labels) != n_channels or self.channel_labels[0] != "left":
            raise ValueError("channel_labels must start with 'left' and match channel count")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    def channel(self, label: str) -> np.ndarray:
        if label not in self.channel_labels:
            raise ValueError(f"waveform has no {label!r} channel")
        return self.samples[self.channel_labels.index(label)]


@dataclass
class DatasetSplit:
    """Train/validation(/test) partition of utterance records."""

    train: list[UtteranceRecord]
    validation: list[UtteranceRecord]
    test: list[UtteranceRecord] = field(default_factory=list)
    track: str = "closed"
    seed: int = 0

    def __post_init__(self):
        train_ids = {r.utterance_id for r in self.train}
        val_ids = {r.utterance_id for r in self.validation}
        overlap = train_ids & val_ids
        if overlap:
            raise ValueError(f"train/validation overlap: {sorted(overlap)[:5]}")


def load_listener_audiograms(path: str | Path) -> dict[str, dict[str, Audiogram]]:
    """Load a listener-metadata JSON into {listener_id: {'left'/'right': Audiogram}}.

    Expects the release naming per listener: ``audiogram_cfs``,
    ``audiogram_levels_l`` and ``audiogram_levels_r``.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    out: dict[str, dict[str, Audiogram]] = {}
    for listener_id, entry in raw.items():
        cfs = tuple(float(f) for f in entry["audiogram_cfs"])
        out[listener_id] = {
            "left": Audiogram("left", cfs, tuple(float(v) for v in entry["audiogram_levels_l"])),
            "right": Audiogram("right", cfs, tuple(float(v) for v in entry["audiogram_levels_r"])),
        }
    return out


def _resolve_ref(raw: dict, key: str, default_rel: str, audio_root: Optional[Path]) -> str:
    rel = raw.get(key, default_rel)
    if audio_root is not None:
        return str(audio_root / rel)
    return rel


def load_manifest(
    path: str | Path,
    track: str,
    audio_root: str | Path | None = None,
    listeners: dict[str, dict[str, Audiogram]] | None = None,
) -> list[UtteranceRecord]:
    """Load a manifest JSON file into utterance records.

    Records missing a required field are rejected with a logged diagnostic
    naming the utterance; an unparseable file raises :class:`ManifestError`.
    Correctness labels stay on the 0-100 scale.
    """
    if track not in TRACKS:
        raise ValueError(f"track must be one of {TRACKS}, got {track!r}")
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw_trials = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot parse manifest {path}: {exc}") from exc
    if not isinstance(raw_trials, list):
        raise ManifestError(f"manifest {path} must be a JSON array of trial objects")

    root = Path(audio_root) if audio_root is not None else None
    records: list[UtteranceRecord] = []
    for index, raw in enumerate(raw_trials):
        signal = raw.get("signal", f"<entry {index}>")
        missing = [k for k in _REQUIRED_FIELDS if k not in raw]
        if missing:
            logger.warning("rejecting %s: missing field(s) %s", signal, ", ".join(missing))
            continue
        try:
            scene = raw.get("scene", signal)
            record = UtteranceRecord(
                utterance_id=str(raw["signal"]),
                listener_id=str(raw["listener"]),
                system_id=str(raw["system"]),
                correctness=float(raw["correctness"]),
                enhanced_audio_ref=_resolve_ref(raw, "signal_path", f"{ENHANCED_DIR}/{signal}.wav", root),
                hls_audio_ref=_resolve_ref(raw, "hls_path", f"{HLS_DIR}/{signal}.wav", root),
                clean_audio_ref=_resolve_ref(raw, "clean_path", f"{CLEAN_DIR}/{scene}.wav", root),
                audiograms=listeners.get(str(raw["listener"])) if listeners else None,
            )
        except (TypeError, ValueError) as exc:
            logger.warning("rejecting %s: %s", signal, exc)
            continue
        records.append(record)

    if not records:
        logger.warning("manifest %s produced no records", path)
    return records


def _to_float(samples: np.ndarray) -> np.ndarray:
    """Map integer PCM to float64 in [-1, 1); keep float data as-is."""
    if samples.dtype == np.uint8:
        return (samples.astype(np.float64) - 128.0) / 128.0
    if np.issubdtype(samples.dtype, np.integer):
        return samples.astype(np.float64) / float(np.iinfo(samples.dtype).max + 1)
    return samples.astype(np.float64)


def load_waveform(ref: str | Path, target_rate: int) -> Waveform:
    """Load a RIFF/WAV file and resample to ``target_rate`` if needed.

    Resampling is polyphase band-limited sinc interpolation
    (``scipy.signal.resample_poly``, Kaiser-windowed low-pass, beta 5.0).
    Channel order is preserved with the left channel first.  A source already
    at the target rate passes through bit-identically.
    """
    ref = Path(ref)
    try:
        source_rate, data = wavfile.read(ref)
    except (OSError, ValueError) as exc:
        raise AudioError(f"cannot decode audio file {ref}: {exc}") from exc
    if data.size == 0:
        raise AudioError(f"audio file {ref} has zero length")
    data = _to_float(data)
    if data.ndim == 1:
        samples = data[np.newaxis, :]
        labels: tuple[str, ...] = ("left",)
    else:
        if data.shape[1] > 2:
            raise AudioError(f"audio file {ref} has {data.shape[1]} channels, expected 1 or 2")
        samples = data.T
        labels = ("left", "right")[: samples.shape[0]]
    if source_rate != target_rate:
        g = math.gcd(int(target_rate), int(source_rate))
        samples = resample_poly(samples, target_rate // g, source_rate // g, axis=1)
    return Waveform(samples=np.ascontiguousarray(samples), sample_rate=int(target_rate), channel_labels=labels)


def make_split(
    records: Sequence[UtteranceRecord],
    validation_fraction: float,
    seed: int,
    track: str = "closed",
    by_listener: bool = False,
) -> DatasetSplit:
    """Partition records into train/validation, deterministically under ``seed``.

    The validation size is ``ceil(validation_fraction * len(records))``; with
    this rule a 4863-record closed pool at fraction 0.1 yields 487 validation
    and 4376 training utterances.  Selection is uniform over utterances; with
    ``by_listener=True`` whole listeners are held out instead (smallest listener
    set whose records reach the target size).
    """
    if not records:
        raise ValueError("records must be non-empty")
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError(f"validation_fraction must be in (0, 1), got {validation_fraction}")
    ordered = sorted(records, key=lambda r: r.utterance_id)
    n_val = math.ceil(validation_fraction * len(ordered))
    rng = np.random.default_rng(seed)

    if by_listener:
        listener_ids = sorted({r.listener_id for r in ordered})
        rng.shuffle(listener_ids)
        held, count = set(), 0
        for listener_id in listener_ids:
            if count >= n_val:
                break
            held.add(listener_id)
            count += sum(1 for r in ordered if r.listener_id == listener_id)
        validation = [r for r in ordered if r.listener_id in held]
        train = [r for r in ordered if r.listener_id not in held]
    else:
        perm = rng.permutation(len(ordered))
        val_idx = set(perm[:n_val].tolist())
        validation = [r for i, r in enumerate(ordered) if i in val_idx]
        train = [r for i, r in enumerate(ordered) if i not in val_idx]
    return DatasetSplit(train=train, validation=validation, track=track, seed=seed)


def normalize_correctness(i: float) -> float:
    """Map a correctness percentage in [0, 100] to a fraction in [0, 1]."""
    if not 0.0 <= i <= 100.0:
        raise ValueError(f"correctness must be in [0, 100], got {i}")
    return i / 100.0


@dataclass
class HistogramTable:
    """Correctness histogram plus per-listener mean correctness."""

    bin_edges: np.ndarray  # bin_count + 1 edges partitioning [0, 100]
    counts: np.ndarray
    listener_means: list[tuple[str, float, int]]  # (listener_id, mean, n)


def correctness_histogram(records: Sequence[UtteranceRecord], bin_count: int) -> HistogramTable:
    """Histogram of correctness labels over [0, 100] and per-listener means."""
    if bin_count < 1:
        raise ValueError(f"bin_count must be >= 1, got {bin_count}")
    if not records:
        raise ValueError("records must be non-empty")
    values = np.array([r.correctness for r in records], dtype=np.float64)
    counts, edges = np.histogram(values, bins=bin_count, range=(0.0, 100.0))

    by_listener: dict[str, list[float]] = {}
    for r in records:
        by_listener.setdefault(r.listener_id, []).append(r.correctness)
    listener_means = [
        (listener_id, float(np.mean(vals)), len(vals))
        for listener_id, vals in sorted(by_listener.items())
    ]
    return HistogramTable(bin_edges=edges, counts=counts, listener_means=listener_means)


def write_histogram_csv(table: HistogramTable, bins_path: str | Path, listeners_path: str | Path) -> None:
    """Write the histogram as (bin_low, bin_high, count) and (listener_id, mean_correctness, n) CSVs."""
    with open(bins_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_low", "bin_high", "count"])
        for low, high, count in zip(table.bin_edges[:-1], table.bin_edges[1:], table.counts):
            writer.writerow([f"{low:.10g}", f"{high:.10g}", int(count)])
    with open(listeners_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["listener_id", "mean_correctness", "n"])
        for listener_id, mean, n in table.listener_means:
            writer.writerow([listener_id, f"{mean:.10g}", n])


def iter_audio_refs(records: Iterable[UtteranceRecord], signal_kind: str) -> Iterable[tuple[str, str]]:
    """Yield (utterance_id, locator) pairs for the requested signal kind."""
    for record in records:
        yield record.utterance_id, record.audio_ref(signal_kind)
