"""On-disk feature cache, one entry per (utterance, channel, backend, kind).

Entry layout
------------
``<stem>.bin``   raw little-endian float32 values, C (row-major) order,
                 shape (T, F) as recorded in the sidecar.
``<stem>.json``  sidecar metadata: shape, dtype, backend_id, feature_kind,
                 source_channel, utterance_id, frame_hop_s, content_key.

``<stem>`` is ``<utterance>__<channel>__<tag>__<key>`` where ``tag`` names the
binding ("SPEC" or "<backend>-FE"/"-OL") and ``key`` is the first 16 hex chars
of sha256 over the source audio bytes, the binding descriptor string and the
channel.  Changing the audio content or any backend parameter therefore
changes the key and invalidates the entry automatically.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from sipred.features import (
    BackendDescriptor,
    FeatureBinding,
    FeatureKind,
    FeatureMatrix,
    SPEC_BACKEND_ID,
    SPEC_FFT_SIZE,
    SPEC_HOP_MS,
    SPEC_SAMPLE_RATE,
    SPEC_WINDOW_MS,
)

logger = logging.getLogger(__name__)

_KEY_CHARS = 16


def binding_tag(binding: FeatureBinding) -> str:
    if binding.kind == FeatureKind.SPEC:
        return SPEC_BACKEND_ID
    return f"{binding.backend_id}-{binding.kind.value}"


def _descriptor_string(binding: FeatureBinding, backend: Optional[BackendDescriptor]) -> str:
    if binding.kind == FeatureKind.SPEC:
        return f"SPEC|win={SPEC_WINDOW_MS}|hop={SPEC_HOP_MS}|fft={SPEC_FFT_SIZE}|sr={SPEC_SAMPLE_RATE}"
    if backend is None:
        from sipred.features import get_backend

        backend = get_backend(binding.backend_id).descriptor
    return (
        f"{backend.backend_id}|kind={binding.kind.value}|fe={backend.fe_dim}|ol={backend.ol_dim}"
        f"|hop={backend.frame_hop}|sr={backend.expected_sample_rate}"
    )


def content_key(audio_bytes: bytes, binding: FeatureBinding, channel: str,
                backend: Optional[BackendDescriptor] = None) -> str:
    digest = hashlib.sha256()
    digest.update(audio_bytes)
    digest.update(_descriptor_string(binding, backend).encode("utf-8"))
    digest.update(channel.encode("utf-8"))
    return digest.hexdigest()[:_KEY_CHARS]


class FeatureCache:
    """Directory-backed store of extracted feature matrices."""

    def __init__(self, cache_dir: str | Path):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _stem(self, utterance_id: str, channel: str, binding: FeatureBinding, key: str) -> Path:
        return self.cache_dir / f"{utterance_id}__{channel}__{binding_tag(binding)}__{key}"

    def has(self, utterance_id: str, channel: str, binding: FeatureBinding, key: str) -> bool:
        stem = self._stem(utterance_id, channel, binding, key)
        return stem.with_suffix(".bin").exists() and stem.with_suffix(".json").exists()

    def put(self, utterance_id: str, binding: FeatureBinding, key: str, feats: FeatureMatrix) -> Path:
        stem = self._stem(utterance_id, feats.source_channel, binding, key)
        values = np.ascontiguousarray(feats.values, dtype="<f4")
        t = feats.n_frames
        hop_s = float(feats.frame_times[1] - feats.frame_times[0]) if t > 1 else 0.0
        sidecar = {
            "shape": [int(t), int(feats.feature_dim)],
            "dtype": "float32",
            "backend_id": feats.backend_id,
            "feature_kind": feats.feature_kind.value,
            "source_channel": feats.source_channel,
            "utterance_id": utterance_id,
            "frame_hop_s": hop_s,
            "content_key": key,
        }
        with open(stem.with_suffix(".bin"), "wb") as fh:
            fh.write(values.tobytes(order="C"))
        with open(stem.with_suffix(".json"), "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, sort_keys=True)
        return stem.with_suffix(".bin")

    def get(self, utterance_id: str, channel: str, binding: FeatureBinding, key: str) -> FeatureMatrix:
        stem = self._stem(utterance_id, channel, binding, key)
        try:
            with open(stem.with_suffix(".json"), "r", encoding="utf-8") as fh:
                sidecar = json.load(fh)
            raw = stem.with_suffix(".bin").read_bytes()
        except OSError as exc:
            raise KeyError(f"cache miss for {stem.name}: {exc}") from exc
        t, f = sidecar["shape"]
        values = np.frombuffer(raw, dtype="<f4").reshape(t, f).copy()
        frame_times = np.arange(t, dtype=np.float64) * float(sidecar["frame_hop_s"])
        return FeatureMatrix(
            values=values,
            frame_times=frame_times,
            feature_kind=FeatureKind(sidecar["feature_kind"]),
            backend_id=sidecar["backend_id"],
            source_channel=sidecar["source_channel"],
        )

    def entries(self) -> list[Path]:
        return sorted(self.cache_dir.glob("*.bin"))
