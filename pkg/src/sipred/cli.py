"""Command-line pipeline: extract -> distances / train -> evaluate -> report.

Every subcommand takes a JSON run configuration (schema-validated before any
work) plus a few overriding flags, writes only under the configured cache and
output directories, and exits 0 only when no per-item failure occurred.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

from sipred import __version__
from sipred.cache import FeatureCache, content_key
from sipred.config import ConfigError, RunConfig, load_run_config, validate_manifest_document
from sipred.corpus import (
    correctness_histogram,
    load_listener_audiograms,
    load_manifest,
    load_waveform,
    make_split,
    write_histogram_csv,
)
from sipred.distances import (
    correlate_with_correctness,
    run_distance_study,
    write_correlation_csv,
    write_distance_csv,
)
from sipred.evaluation import breakdown, render_report, score, write_predictions_csv
from sipred.features import (
    MODEL_ROOT_ENV,
    BackendDescriptor,
    FeatureBinding,
    FeatureKind,
    binding_feature_dim,
    binding_sample_rate,
    get_backend,
    register_mock_backend,
)
from sipred.predictor import Prediction, build_model, forward_channel, load_checkpoint
from sipred.training import (
    CachedFeatureSource,
    ExtractorFeatureSource,
    train,
    write_run_manifest,
    write_train_log_csv,
)
from sipred.features import make_extractor

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 20


def _resolve_backend(name: str, config: RunConfig) -> BackendDescriptor:
    """Map a configured backend name to a descriptor; 'mock' builds the configured mock."""
    if name == "mock":
        mb = config.mock_backend
        return register_mock_backend(mb["seed"], mb["fe_dim"], mb["ol_dim"], mb["hop"])
    return get_backend(name).descriptor


def _resolve_binding(config: RunConfig) -> tuple[FeatureBinding, Optional[BackendDescriptor]]:
    binding = FeatureBinding.parse(config.feature_binding)
    if binding.kind == FeatureKind.SPEC:
        return binding, None
    descriptor = _resolve_backend(binding.backend_id, config)
    return FeatureBinding(descriptor.backend_id, binding.kind), descriptor


def _load_records(config: RunConfig, which: str):
    path = config.paths.train_manifest if which == "train" else config.paths.test_manifest
    if path is None:
        raise ConfigError(f"config has no {which} manifest")
    with open(path, "r", encoding="utf-8") as fh:
        validate_manifest_document(json.load(fh))
    listeners = load_listener_audiograms(config.paths.listeners) if config.paths.listeners else None
    return load_manifest(path, config.track, audio_root=config.paths.audio_root, listeners=listeners)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_extract(config: RunConfig) -> int:
    """Populate the feature cache for every (utterance, channel) of the binding."""
    binding, descriptor = _resolve_binding(config)
    extractor = make_extractor(binding, descriptor)
    rate = binding_sample_rate(binding, descriptor)
    cache = FeatureCache(config.paths.cache_dir)

    records = _load_records(config, "train")
    if config.paths.test_manifest is not None:
        records = records + _load_records(config, "test")

    def work(record):
        new, skipped = 0, 0
        ref = Path(record.audio_ref(config.signal_kind))
        audio_bytes = ref.read_bytes()
        wave = load_waveform(ref, rate)
        for channel in wave.channel_labels:
            key = content_key(audio_bytes, binding, channel, descriptor)
            if cache.has(record.utterance_id, channel, binding, key):
                skipped += 1
                continue
            cache.put(record.utterance_id, binding, key, extractor(wave, channel))
            new += 1
        return new, skipped

    new_total, skipped_total, failures = 0, 0, []
    with ThreadPoolExecutor(max_workers=config.jobs) as pool:
        futures = [(record.utterance_id, pool.submit(work, record)) for record in records]
        for utterance_id, future in futures:
            try:
                new, skipped = future.result()
                new_total += new
                skipped_total += skipped
            except Exception as exc:
                failures.append((utterance_id, str(exc)))

    print(f"extract: cached {new_total} new, skipped {skipped_total}, failed {len(failures)}")
    for utterance_id, message in failures:
        print(f"  FAILED {utterance_id}: {message}", file=sys.stderr)
    return 1 if failures else 0


def cmd_distances(config: RunConfig) -> int:
    """Per-utterance distance CSV plus the correlation table."""
    records = _load_records(config, "train")
    backends = [_resolve_backend(name, config) for name in config.distance_backends]
    kinds = config.distance_signal_kinds or [config.signal_kind]
    results = run_distance_study(records, backends, signal_kinds=kinds)

    out_dir = config.paths.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    write_distance_csv(results, out_dir / "distances.csv")
    rows = correlate_with_correctness(results, records)
    write_correlation_csv(rows, out_dir / "distance_correlations.csv")

    print(f"distances: {len(results)} measurements over {len(rows)} correlation rows")
    covered = {r.utterance_id for r in results}
    failed = [r.utterance_id for r in records if r.utterance_id not in covered]
    for utterance_id in failed:
        print(f"  FAILED {utterance_id}", file=sys.stderr)
    return 1 if failed else 0


def cmd_train(config: RunConfig) -> int:
    """Train on the configured binding; write checkpoint, log and run manifest."""
    binding, descriptor = _resolve_binding(config)
    records = _load_records(config, "train")
    split = make_split(
        records,
        config.validation_fraction,
        seed=config.seed,
        track=config.track,
        by_listener=config.split_by_listener,
    )
    feature_dim = binding_feature_dim(binding, descriptor)
    model = build_model(feature_dim, seed=config.seed, backend_binding=str(binding))
    if model.reference_flag:
        logger.info(model.reference_flag)

    cache = FeatureCache(config.paths.cache_dir)
    features = CachedFeatureSource(cache, binding, descriptor, signal_kind=config.signal_kind)

    out_dir = config.paths.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    train_cfg = config.train
    best_model, log = train(model, split, train_cfg, features, checkpoint_dir=out_dir)
    write_train_log_csv(log, out_dir / "train_log.csv")
    write_run_manifest(
        train_cfg,
        split,
        log,
        out_dir / "run_manifest.json",
        extra={"run_config": config.to_dict(), "parameter_count": best_model.parameter_count},
    )
    print(
        f"train: best epoch {log.best_epoch} "
        f"(validation RMSE {log.epochs[log.best_epoch - 1].validation_rmse_0_100:.2f}), "
        f"checkpoint {log.final_checkpoint}"
    )
    return 0


def _predict_records(model, records, features) -> list[Prediction]:
    predictions = []
    for record in records:
        per_channel = {
            channel: forward_channel(model, features.get(record, channel))
            for channel in features.channels(record)
        }
        predictions.append(
            Prediction(
                utterance_id=record.utterance_id,
                i_hat=max(per_channel.values()),
                per_channel=per_channel,
            )
        )
    return predictions


def cmd_evaluate(config: RunConfig, checkpoint: str | Path) -> int:
    """Better-ear predictions on the test manifest, scored and rendered."""
    binding, descriptor = _resolve_binding(config)
    model = load_checkpoint(checkpoint)
    if model.backend_binding != str(binding):
        raise ConfigError(
            f"checkpoint binding {model.backend_binding!r} does not match configured "
            f"binding {binding!s}; refusing to run inference"
        )

    test_records = _load_records(config, "test")
    train_records = _load_records(config, "train")
    cache = FeatureCache(config.paths.cache_dir)
    fallback = ExtractorFeatureSource(
        make_extractor(binding, descriptor),
        signal_kind=config.signal_kind,
        sample_rate=binding_sample_rate(binding, descriptor),
    )
    features = CachedFeatureSource(cache, binding, descriptor, config.signal_kind, fallback=fallback)

    predictions = _predict_records(model, test_records, features)
    summary = score(predictions, test_records)
    breakdowns = [
        breakdown(predictions, test_records, "system", {r.system_id for r in train_records}),
        breakdown(predictions, test_records, "listener", {r.listener_id for r in train_records}),
    ]
    histogram = correctness_histogram(test_records, HISTOGRAM_BINS)

    out_dir = config.paths.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    model_name = f"{config.signal_kind}:{binding}"
    write_predictions_csv(predictions, test_records, out_dir / "predictions.csv")
    write_histogram_csv(histogram, out_dir / "histogram_bins.csv", out_dir / "listener_means.csv")
    render_report([(model_name, summary)], breakdowns, out_dir, histogram=histogram)

    print(
        f"evaluate: n={summary.n} rmse={summary.rmse:.2f} var={summary.error_var:.4g} "
        f"spearman={summary.spearman:.3f} pearson={summary.pearson:.3f} "
        f"({summary.var_definition})"
    )
    return 0


def cmd_report(config: RunConfig, predictions_path: Optional[str | Path] = None) -> int:
    """Rebuild the report bundle from a stored predictions CSV."""
    import csv as _csv

    path = Path(predictions_path) if predictions_path else config.paths.out_dir / "predictions.csv"
    predictions = []
    with open(path, "r", encoding="utf-8") as fh:
        for row in _csv.DictReader(fh):
            per_channel = {}
            for channel in ("left", "right"):
                value = float(row[channel])
                if value == value:  # skip NaN channels (mono)
                    per_channel[channel] = value
            predictions.append(
                Prediction(
                    utterance_id=row["utterance_id"],
                    i_hat=max(per_channel.values()),
                    per_channel=per_channel,
                )
            )
    test_records = _load_records(config, "test")
    train_records = _load_records(config, "train")
    summary = score(predictions, test_records)
    breakdowns = [
        breakdown(predictions, test_records, "system", {r.system_id for r in train_records}),
        breakdown(predictions, test_records, "listener", {r.listener_id for r in train_records}),
    ]
    histogram = correctness_histogram(test_records, HISTOGRAM_BINS)
    written = render_report(
        [(f"{config.signal_kind}:{config.feature_binding}", summary)],
        breakdowns,
        config.paths.out_dir,
        histogram=histogram,
    )
    print(f"report: wrote {len(written)} files under {config.paths.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sipred",
        description="Non-intrusive speech intelligibility prediction pipeline.",
        epilog=f"Real speech-representation backends read their weights from ${MODEL_ROOT_ENV}/<backend_id>.",
    )
    parser.add_argument("--version", action="version", version=f"sipred {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("extract", "populate the feature cache"),
        ("distances", "run the representation-distance study"),
        ("train", "train the correctness predictor"),
        ("evaluate", "score a checkpoint on the test manifest"),
        ("report", "rebuild the report bundle from stored predictions"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--track", choices=["closed", "open"])
        p.add_argument("--signal-kind", dest="signal_kind", choices=["enhanced", "hls"])
        p.add_argument("--binding", dest="feature_binding", help='"SPEC" or "<backend_id>:FE|OL"')
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        if name == "evaluate":
            p.add_argument("--checkpoint", required=True)
        if name == "report":
            p.add_argument("--predictions", help="predictions CSV (default: <out_dir>/predictions.csv)")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    overrides = {
        key: getattr(args, key)
        for key in ("track", "signal_kind", "feature_binding", "seed", "jobs")
        if getattr(args, key, None) is not None
    }
    try:
        config = load_run_config(args.config, overrides)
        if args.command == "extract":
            return cmd_extract(config)
        if args.command == "distances":
            return cmd_distances(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.checkpoint)
        if args.command == "report":
            return cmd_report(config, args.predictions)
        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
