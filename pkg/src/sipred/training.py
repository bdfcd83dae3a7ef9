"""Training loop for the correctness predictor.

Per the binaural contract, training computes the loss of each channel against
the same target and sums them before back-propagation, while validation (and
testing) combines channels with the better-ear maximum.  Variable-length
utterances are bucketed by frame count, padded, packed for the BLSTM and
masked out of attention pooling.  A run is fully determined by its
:class:`TrainConfig`: model updates, shuffling and batch composition all
derive from the run seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from sipred import __version__, stats
from sipred.cache import FeatureCache, content_key
from sipred.corpus import DatasetSplit, UtteranceRecord, Waveform, load_waveform
from sipred.features import (
    BackendDescriptor,
    BoundExtractor,
    FeatureBinding,
    FeatureMatrix,
)
from sipred.predictor import PredictorModel, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-4
    patience: int = 10
    seed: int = 0
    loss: str = "mse"
    signal_kind: str = "enhanced"
    feature_binding: str = "SPEC"

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    validation_rmse_0_100: float
    wall_time_s: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    final_checkpoint: str = ""


@dataclass
class TrainingHooks:
    """Optional instrumentation callbacks (used by tests, no-ops otherwise)."""

    on_batch: Optional[Callable[[int, float, list[tuple[str, list[float]]]], None]] = None
    on_validation: Optional[Callable[[int, list[tuple[str, dict[str, float], float]]], None]] = None


# ---------------------------------------------------------------------------
# Feature sources
# ---------------------------------------------------------------------------

class ExtractorFeatureSource:
    """Extracts features on the fly from the record's audio."""

    def __init__(self, extractor: BoundExtractor, signal_kind: str = "enhanced", sample_rate: int = 16000):
        self.extractor = extractor
        self.signal_kind = signal_kind
        self.sample_rate = sample_rate
        self._memo: tuple[str, Waveform] | None = None

    def _wave(self, record: UtteranceRecord) -> Waveform:
        ref = record.audio_ref(self.signal_kind)
        if self._memo is None or self._memo[0] != ref:
            self._memo = (ref, load_waveform(ref, self.sample_rate))
        return self._memo[1]

    def channels(self, record: UtteranceRecord) -> tuple[str, ...]:
        return self._wave(record).channel_labels

    def get(self, record: UtteranceRecord, channel: str) -> FeatureMatrix:
        return self.extractor(self._wave(record), channel)


class CachedFeatureSource:
    """Reads features from a populated cache, optionally falling back to extraction."""

    def __init__(
        self,
        cache: FeatureCache,
        binding: FeatureBinding,
        backend: Optional[BackendDescriptor] = None,
        signal_kind: str = "enhanced",
        fallback: Optional[ExtractorFeatureSource] = None,
    ):
        self.cache = cache
        self.binding = binding
        self.backend = backend
        self.signal_kind = signal_kind
        self.fallback = fallback
        self._keys: dict[str, tuple[str, tuple[str, ...]]] = {}

    def _key_and_channels(self, record: UtteranceRecord, channel: str) -> tuple[str, tuple[str, ...]]:
        memo_key = f"{record.utterance_id}|{channel}"
        if memo_key not in self._keys:
            ref = Path(record.audio_ref(self.signal_kind))
            audio_bytes = ref.read_bytes()
            labels = ("left",) if _wav_channel_count(audio_bytes) == 1 else ("left", "right")
            self._keys[memo_key] = (
                content_key(audio_bytes, self.binding, channel, self.backend),
                labels,
            )
        return self._keys[memo_key]

    def channels(self, record: UtteranceRecord) -> tuple[str, ...]:
        return self._key_and_channels(record, "left")[1]

    def get(self, record: UtteranceRecord, channel: str) -> FeatureMatrix:
        key, _ = self._key_and_channels(record, channel)
        try:
            return self.cache.get(record.utterance_id, channel, self.binding, key)
        except KeyError:
            if self.fallback is not None:
                return self.fallback.get(record, channel)
            raise RuntimeError(
                f"feature cache has no entry for {record.utterance_id!r} ({channel}, "
                f"{self.binding}); run the extract step first"
            ) from None


def _wav_channel_count(audio_bytes: bytes) -> int:
    # fmt chunk channel field; WAV files here always carry fmt first
    if len(audio_bytes) < 24 or audio_bytes[:4] != b"RIFF":
        raise ValueError("not a RIFF/WAV file")
    return int.from_bytes(audio_bytes[22:24], "little")


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def channel_loss(model: PredictorModel, feats: FeatureMatrix, target: float) -> torch.Tensor:
    """Squared error of one channel's prediction against the target fraction.

    Differentiable; the finite-difference gradient oracle and the training
    loop both go through this path.
    """
    if feats.feature_dim != model.config.feature_dim:
        raise ValueError(
            f"feature dim {feats.feature_dim} does not match model feature_dim {model.config.feature_dim}"
        )
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"target must be in [0, 1], got {target}")
    x = torch.from_numpy(np.ascontiguousarray(feats.values)).to(model.dtype).unsqueeze(0)
    y = model.net(x)[0]
    return (y - torch.tensor(target, dtype=model.dtype)) ** 2


def channel_summed_loss(
    model: PredictorModel,
    left_feats: FeatureMatrix,
    right_feats: Optional[FeatureMatrix],
    target: float,
) -> float:
    """Sum of the per-channel losses against one shared target.

    Defined as the exact float sum of the independently computed channel
    losses; mono utterances use the single channel's loss.
    """
    with torch.no_grad():
        total = float(channel_loss(model, left_feats, target))
        if right_feats is not None:
            total += float(channel_loss(model, right_feats, target))
    return total


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class _Item:
    utterance_id: str
    feats: list[FeatureMatrix]  # one per channel, left first
    channel_labels: tuple[str, ...]
    target: float  # normalized correctness
    correctness: float  # 0-100 label


def _load_items(records: Sequence[UtteranceRecord], features) -> list[_Item]:
    items = []
    for record in records:
        labels = features.channels(record)
        feats = [features.get(record, label) for label in labels]
        items.append(
            _Item(
                utterance_id=record.utterance_id,
                feats=feats,
                channel_labels=labels,
                target=record.correctness / 100.0,
                correctness=record.correctness,
            )
        )
    return items


def _batch_forward(net, feats_list: list[FeatureMatrix], dtype) -> torch.Tensor:
    """Forward a ragged list of feature matrices as one padded, masked batch."""
    lengths = torch.tensor([f.n_frames for f in feats_list], dtype=torch.int64)
    t_max = int(lengths.max())
    fdim = feats_list[0].feature_dim
    x = torch.zeros((len(feats_list), t_max, fdim), dtype=dtype)
    for i, f in enumerate(feats_list):
        x[i, : f.n_frames] = torch.from_numpy(np.ascontiguousarray(f.values)).to(dtype)
    return net(x, lengths)


_EVAL_CHUNK = 128  # channels per forward pass during validation


def _validation_rmse(model: PredictorModel, items: list[_Item], hooks: Optional[TrainingHooks], epoch: int) -> float:
    """Better-ear RMSE on the 0-100 scale."""
    flat_feats = [f for item in items for f in item.feats]
    scores: list[float] = []
    with torch.no_grad():
        for start in range(0, len(flat_feats), _EVAL_CHUNK):
            ys = _batch_forward(model.net, flat_feats[start : start + _EVAL_CHUNK], model.dtype)
            scores.extend(float(y) for y in ys)
    preds, labels, details = [], [], []
    cursor = 0
    for item in items:
        per_channel = dict(zip(item.channel_labels, scores[cursor : cursor + len(item.feats)]))
        cursor += len(item.feats)
        i_hat = max(per_channel.values())
        preds.append(100.0 * i_hat)
        labels.append(item.correctness)
        details.append((item.utterance_id, per_channel, i_hat))
    if hooks and hooks.on_validation:
        hooks.on_validation(epoch, details)
    return stats.rmse(np.array(preds), np.array(labels))


def better_ear_rmse(model: PredictorModel, records: Sequence[UtteranceRecord], features) -> float:
    """RMSE (0-100 scale) of better-ear predictions over the given records."""
    return _validation_rmse(model, _load_items(records, features), hooks=None, epoch=0)


def _epoch_batches(items: list[_Item], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    # shuffle, then stable-sort by frame count so batches bucket similar T
    order = rng.permutation(len(items))
    t_counts = np.array([items[i].feats[0].n_frames for i in order])
    order = order[np.argsort(t_counts, kind="stable")]
    batches = [order[i : i + batch_size].tolist() for i in range(0, len(order), batch_size)]
    return [batches[j] for j in rng.permutation(len(batches))]


def train(
    model: PredictorModel,
    split: DatasetSplit,
    cfg: TrainConfig,
    features,
    checkpoint_dir: str | Path | None = None,
    hooks: Optional[TrainingHooks] = None,
) -> tuple[PredictorModel, TrainLog]:
    """Gradient descent on the channel-summed loss with early stopping.

    After every epoch the validation RMSE (better-ear rule, 0-100 scale) is
    computed; training stops once ``cfg.patience`` epochs pass without
    improvement, and the returned model is the reloaded best-validation
    checkpoint.
    """
    if not split.train or not split.validation:
        raise ValueError("split.train and split.validation must both be non-empty")
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else Path(tempfile.mkdtemp(prefix="sipred-train-"))
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    best_path = checkpoint_dir / "best.pt"

    torch.manual_seed(cfg.seed)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])  # dedicated shuffle stream

    train_items = _load_items(split.train, features)
    val_items = _load_items(split.validation, features)
    optimizer = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate)

    log = TrainLog()
    best_rmse = math.inf
    epochs_without_improvement = 0

    for epoch in range(1, cfg.max_epochs + 1):
        started = time.monotonic()
        model.net.train()
        epoch_loss, n_seen = 0.0, 0
        for batch_idx in _epoch_batches(train_items, cfg.batch_size, shuffle_rng):
            batch = [train_items[i] for i in batch_idx]
            flat_feats = [f for item in batch for f in item.feats]
            targets = torch.tensor(
                [item.target for item in batch for _ in item.feats], dtype=model.dtype
            )
            optimizer.zero_grad()
            ys = _batch_forward(model.net, flat_feats, model.dtype)
            sq_err = (ys - targets) ** 2
            # per-utterance channel sums, reduced in fixed order
            per_utt = []
            cursor = 0
            for item in batch:
                per_utt.append(sq_err[cursor : cursor + len(item.feats)].sum())
                cursor += len(item.feats)
            per_utt_t = torch.stack(per_utt)
            finite = torch.isfinite(per_utt_t)
            if not bool(finite.all()):
                bad = batch[int(torch.nonzero(~finite)[0])].utterance_id
                raise RuntimeError(f"non-finite training loss for utterance {bad!r}")
            loss = per_utt_t.mean()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(batch)
            n_seen += len(batch)
            if hooks and hooks.on_batch:
                detail, cursor = [], 0
                sq_detached = sq_err.detach()
                for item in batch:
                    detail.append(
                        (item.utterance_id, [float(v) for v in sq_detached[cursor : cursor + len(item.feats)]])
                    )
                    cursor += len(item.feats)
                hooks.on_batch(epoch, float(loss.detach()), detail)

        model.net.eval()
        val_rmse = _validation_rmse(model, val_items, hooks, epoch)
        log.epochs.append(
            EpochRecord(
                epoch=epoch,
                train_loss=epoch_loss / max(n_seen, 1),
                validation_rmse_0_100=val_rmse,
                wall_time_s=time.monotonic() - started,
            )
        )
        if val_rmse < best_rmse:
            best_rmse = val_rmse
            log.best_epoch = epoch
            epochs_without_improvement = 0
            save_checkpoint(model, best_path)
        else:
            epochs_without_improvement += 1
            if epochs_without_improvement >= cfg.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, log.best_epoch)
                break

    log.final_checkpoint = str(best_path)
    best_model = load_checkpoint(best_path)
    return best_model, log


# ---------------------------------------------------------------------------
# Run artifacts
# ---------------------------------------------------------------------------

def write_train_log_csv(log: TrainLog, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "validation_rmse_0_100", "wall_time_s"])
        for rec in log.epochs:
            writer.writerow(
                [rec.epoch, f"{rec.train_loss:.12g}", f"{rec.validation_rmse_0_100:.12g}", f"{rec.wall_time_s:.3f}"]
            )


def dataset_hash(records: Sequence[UtteranceRecord]) -> str:
    digest = hashlib.sha256()
    for record in sorted(records, key=lambda r: r.utterance_id):
        digest.update(f"{record.utterance_id},{record.correctness}\n".encode("utf-8"))
    return digest.hexdigest()


def write_run_manifest(
    cfg: TrainConfig,
    split: DatasetSplit,
    log: TrainLog,
    path: str | Path,
    extra: Optional[dict] = None,
) -> None:
    """Persist everything needed to reproduce the run from a bare config."""
    manifest = {
        "code_version": __version__,
        "train_config": {
            "max_epochs": cfg.max_epochs,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "patience": cfg.patience,
            "seed": cfg.seed,
            "loss": cfg.loss,
            "signal_kind": cfg.signal_kind,
            "feature_binding": cfg.feature_binding,
        },
        "optimizer": "adam",
        "split": {
            "track": split.track,
            "seed": split.seed,
            "n_train": len(split.train),
            "n_validation": len(split.validation),
            "train_hash": dataset_hash(split.train),
            "validation_hash": dataset_hash(split.validation),
        },
        "best_epoch": log.best_epoch,
        "final_checkpoint": log.final_checkpoint,
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
