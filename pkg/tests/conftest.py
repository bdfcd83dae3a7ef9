"""Shared fixtures: synthetic corpora and a small deterministic backend."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from scipy.io import wavfile

from sipred.features import register_mock_backend

SR = 16000

SYSTEMS = ("E001", "E002", "E003")
LISTENERS = ("L0001", "L0002", "L0003", "L0004")


def write_wav(path: Path, samples: np.ndarray, rate: int = SR) -> Path:
    """samples: (channels, length) float in [-1, 1]."""
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(samples.T.astype(np.float32))
    wavfile.write(path, rate, data if data.shape[1] > 1 else data[:, 0])
    return path


def synth_corpus(
    root: Path,
    n_utt: int,
    seed: int = 0,
    duration_s: float = 0.5,
    stereo: bool = True,
    with_hls: bool = True,
    systems: tuple[str, ...] = SYSTEMS,
    listeners: tuple[str, ...] = LISTENERS,
    manifest_name: str = "train_manifest.json",
    id_offset: int = 0,
    correctness_values=None,
    test_equals_clean: bool = False,
) -> Path:
    """Build a small corpus following the audio locator convention.

    Each utterance gets a distinct clean tone-plus-noise signal; the enhanced
    version adds system-dependent noise and the HLS version attenuates it.
    Returns the manifest path.
    """
    rng = np.random.default_rng(seed)
    n = int(duration_s * SR)
    t = np.arange(n) / SR
    trials = []
    for k in range(n_utt):
        scene = f"S{k + id_offset:05d}"
        listener = listeners[k % len(listeners)]
        system = systems[k % len(systems)]
        signal = f"{scene}_{listener}_{system}"

        f0 = 150.0 + 31.0 * ((k + id_offset) % 40)
        clean = 0.4 * np.sin(2 * np.pi * f0 * t) + 0.02 * rng.normal(size=n)
        noise_scale = 0.05 * (1 + systems.index(system))
        if stereo:
            enhanced = np.stack([clean + noise_scale * rng.normal(size=n),
                                 clean + noise_scale * rng.normal(size=n)])
            clean_out = np.stack([clean, clean])
        else:
            enhanced = (clean + noise_scale * rng.normal(size=n))[None, :]
            clean_out = clean[None, :]
        if test_equals_clean:
            enhanced = clean_out.copy()

        write_wav(root / "clean" / f"{scene}.wav", clean_out)
        write_wav(root / "HA_outputs" / f"{signal}.wav", enhanced)
        if with_hls:
            write_wav(root / "HLS_outputs" / f"{signal}.wav", 0.7 * enhanced)

        if correctness_values is not None:
            correctness = float(correctness_values[k % len(correctness_values)])
        else:
            correctness = float(rng.integers(0, 21) * 5)
        trials.append(
            {
                "signal": signal,
                "scene": scene,
                "listener": listener,
                "system": system,
                "correctness": correctness,
            }
        )

    manifest = root / manifest_name
    with open(manifest, "w", encoding="utf-8") as fh:
        json.dump(trials, fh, indent=1)
    return manifest


def synth_listeners_file(root: Path, listeners=LISTENERS) -> Path:
    cfs = [250, 500, 1000, 2000, 4000, 8000]
    payload = {
        listener: {
            "audiogram_cfs": cfs,
            "audiogram_levels_l": [10 + 5 * i for i in range(len(cfs))],
            "audiogram_levels_r": [15 + 5 * i for i in range(len(cfs))],
        }
        for listener in listeners
    }
    path = root / "listeners.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    return path


@pytest.fixture(scope="session")
def small_backend():
    """Cheap deterministic backend: FE 24, OL 32, hop 160 (rf 160 samples)."""
    return register_mock_backend(seed=5, fe_dim=24, ol_dim=32, hop=160)


@pytest.fixture(scope="session")
def shared_corpus(tmp_path_factory):
    """A reusable 9-utterance stereo corpus with train and test manifests."""
    root = tmp_path_factory.mktemp("corpus")
    train_manifest = synth_corpus(root, 9, seed=1)
    test_manifest = synth_corpus(
        root,
        6,
        seed=2,
        manifest_name="test_manifest.json",
        id_offset=100,
        systems=("E001", "E002", "E018"),  # E018 never appears in training
        listeners=("L0001", "L0002", "L0005"),
    )
    synth_listeners_file(root, LISTENERS + ("L0005",))
    return {"root": root, "train": train_manifest, "test": test_manifest}
