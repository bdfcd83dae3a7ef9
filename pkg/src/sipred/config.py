"""Declarative run configuration: JSON file, schema-validated before any work.

Relative paths are resolved against the config file's directory.  Every
default is materialized at load time so the run manifest written alongside
results reconstructs the run from a bare config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema

from sipred.training import TrainConfig

_MOCK_DEFAULTS = {"seed": 0, "fe_dim": 512, "ol_dim": 768, "hop": 320}


class ConfigError(ValueError):
    """Invalid or unusable run configuration."""


def _load_schema(name: str) -> dict:
    with resources.files("sipred.schemas").joinpath(name).open("r", encoding="utf-8") as fh:
        return json.load(fh)


@dataclass
class RunPaths:
    train_manifest: Path
    audio_root: Path
    cache_dir: Path
    out_dir: Path
    test_manifest: Optional[Path] = None
    listeners: Optional[Path] = None


@dataclass
class RunConfig:
    paths: RunPaths
    track: str = "closed"
    signal_kind: str = "enhanced"
    feature_binding: str = "SPEC"
    seed: int = 0
    jobs: int = 1
    validation_fraction: float = 0.1
    split_by_listener: bool = False
    mock_backend: dict = field(default_factory=lambda: dict(_MOCK_DEFAULTS))
    distance_backends: list[str] = field(default_factory=list)
    distance_signal_kinds: list[str] = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        """Fully resolved configuration, defaults included."""
        return {
            "track": self.track,
            "signal_kind": self.signal_kind,
            "feature_binding": self.feature_binding,
            "seed": self.seed,
            "jobs": self.jobs,
            "validation_fraction": self.validation_fraction,
            "split_by_listener": self.split_by_listener,
            "mock_backend": dict(self.mock_backend),
            "distance_backends": list(self.distance_backends),
            "distance_signal_kinds": list(self.distance_signal_kinds),
            "paths": {
                "manifest": {
                    "train": str(self.paths.train_manifest),
                    **({"test": str(self.paths.test_manifest)} if self.paths.test_manifest else {}),
                },
                **({"listeners": str(self.paths.listeners)} if self.paths.listeners else {}),
                "audio_root": str(self.paths.audio_root),
                "cache_dir": str(self.paths.cache_dir),
                "out_dir": str(self.paths.out_dir),
            },
            "train": {
                "max_epochs": self.train.max_epochs,
                "batch_size": self.train.batch_size,
                "learning_rate": self.train.learning_rate,
                "patience": self.train.patience,
                "seed": self.train.seed,
                "loss": self.train.loss,
                "signal_kind": self.train.signal_kind,
                "feature_binding": self.train.feature_binding,
            },
        }


def validate_manifest_document(document: object) -> None:
    """Schema-check a parsed manifest document (list of trial objects)."""
    jsonschema.validate(document, _load_schema("manifest.schema.json"))


def load_run_config(path: str | Path, overrides: Optional[dict] = None) -> RunConfig:
    """Parse, schema-validate and resolve a run configuration file.

    ``overrides`` (e.g. from CLI flags) are applied on top of the file before
    validation.  Referenced input paths must exist; cache and output
    directories are created on demand by the subcommands.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    try:
        jsonschema.validate(raw, _load_schema("runconfig.schema.json"))
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config {path} invalid: {exc.message} (at {'/'.join(map(str, exc.path))})") from exc

    base = path.parent

    def _resolve(p: Optional[str]) -> Optional[Path]:
        return (base / p).resolve() if p is not None else None

    manifest = raw["paths"]["manifest"]
    if isinstance(manifest, str):
        train_manifest, test_manifest = _resolve(manifest), None
    else:
        train_manifest = _resolve(manifest["train"])
        test_manifest = _resolve(manifest.get("test"))

    paths = RunPaths(
        train_manifest=train_manifest,
        test_manifest=test_manifest,
        listeners=_resolve(raw["paths"].get("listeners")),
        audio_root=_resolve(raw["paths"]["audio_root"]),
        cache_dir=_resolve(raw["paths"]["cache_dir"]),
        out_dir=_resolve(raw["paths"]["out_dir"]),
    )
    for label, p in (
        ("train manifest", paths.train_manifest),
        ("test manifest", paths.test_manifest),
        ("listeners file", paths.listeners),
        ("audio root", paths.audio_root),
    ):
        if p is not None and not p.exists():
            raise ConfigError(f"{label} does not exist: {p}")

    seed = int(raw.get("seed", 0))
    signal_kind = raw.get("signal_kind", "enhanced")
    binding = raw.get("feature_binding", "SPEC")
    train_raw = raw.get("train", {})
    train_cfg = TrainConfig(
        max_epochs=int(train_raw.get("max_epochs", 100)),
        batch_size=int(train_raw.get("batch_size", 8)),
        learning_rate=float(train_raw.get("learning_rate", 1e-4)),
        patience=int(train_raw.get("patience", 10)),
        seed=seed,  # the run seed propagates to every seeded component
        loss=train_raw.get("loss", "mse"),
        signal_kind=signal_kind,
        feature_binding=binding,
    )
    mock = dict(_MOCK_DEFAULTS)
    mock.update(raw.get("mock_backend", {}))
    return RunConfig(
        paths=paths,
        track=raw.get("track", "closed"),
        signal_kind=signal_kind,
        feature_binding=binding,
        seed=seed,
        jobs=int(raw.get("jobs", 1)),
        validation_fraction=float(raw.get("validation_fraction", 0.1)),
        split_by_listener=bool(raw.get("split_by_listener", False)),
        mock_backend=mock,
        distance_backends=list(raw.get("distance_backends", [])),
        distance_signal_kinds=list(raw.get("distance_signal_kinds", [signal_kind])),
        train=train_cfg,
    )
