"""Feature families behind one backend-neutral interface.

Three representations of a waveform channel are produced as (T, F) matrices:

* ``SPEC`` -- magnitude spectrogram (Hann window, no centering).
* ``FE``   -- output of a speech-representation backend's initial strided
  1-D convolution stage.
* ``OL``   -- output of the backend's final (transformer) stage.

Real self-supervised backends (XLSR, HuBERT) are optional plug-ins resolved
by ``backend_id`` at runtime; the library itself tests against a deterministic
mock backend whose FE stage is a seeded strided convolution stack and whose OL
stage is a seeded frame-wise linear map.  Extraction is always per channel;
binaural policy belongs to the caller.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy.signal import get_window

from sipred.corpus import Waveform

logger = logging.getLogger(__name__)

SPEC_BACKEND_ID = "SPEC"
MODEL_ROOT_ENV = "SIPRED_BACKEND_ROOT"

SPEC_SAMPLE_RATE = 16000
SPEC_WINDOW_MS = 20.0
SPEC_HOP_MS = 10.0
SPEC_FFT_SIZE = 1024

_MOCK_INTERNAL_WIDTH = 32


class FeatureKind(str, Enum):
    SPEC = "SPEC"
    FE = "FE"
    OL = "OL"


class BackendNotInstalledError(RuntimeError):
    """The optional package backing a real backend is not importable."""


class BackendLoadError(RuntimeError):
    """The backend package is present but its model failed to load."""


@dataclass(frozen=True)
class BackendDescriptor:
    """Declared dimensions and framing of a feature backend."""

    backend_id: str
    fe_dim: int
    ol_dim: int
    frame_hop: int  # input samples per output frame
    expected_sample_rate: int

    def __post_init__(self):
        if self.fe_dim < 1 or self.ol_dim < 1:
            raise ValueError("fe_dim and ol_dim must be >= 1")
        if self.frame_hop < 1:
            raise ValueError("frame_hop must be >= 1")

    def dim(self, kind: FeatureKind) -> int:
        if kind == FeatureKind.FE:
            return self.fe_dim
        if kind == FeatureKind.OL:
            return self.ol_dim
        raise ValueError(f"backend dimension undefined for kind {kind}")


@dataclass(frozen=True)
class FeatureMatrix:
    """A (T, F) feature representation of one waveform channel."""

    values: np.ndarray
    frame_times: np.ndarray  # frame start times, seconds
    feature_kind: FeatureKind
    backend_id: str
    source_channel: str

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("values must be a (T, F) array")
        t, f = self.values.shape
        if t < 1 or f < 1:
            raise ValueError(f"values must be at least 1x1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must all be finite")
        if self.frame_times.shape != (t,):
            raise ValueError("frame_times length must equal T")
        if self.source_channel not in ("left", "right"):
            raise ValueError(f"source_channel must be 'left' or 'right', got {self.source_channel!r}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureBinding:
    """Which representation feeds the predictor: SPEC, or (backend, FE/OL)."""

    backend_id: str
    kind: FeatureKind

    def __str__(self) -> str:
        if self.kind == FeatureKind.SPEC:
            return SPEC_BACKEND_ID
        return f"{self.backend_id}:{self.kind.value}"

    @classmethod
    def parse(cls, text: str) -> "FeatureBinding":
        if text == SPEC_BACKEND_ID:
            return cls(SPEC_BACKEND_ID, FeatureKind.SPEC)
        if ":" not in text:
            raise ValueError(f"binding must be 'SPEC' or '<backend_id>:FE|OL', got {text!r}")
        backend_id, _, kind = text.partition(":")
        if kind not in (FeatureKind.FE.value, FeatureKind.OL.value):
            raise ValueError(f"binding kind must be FE or OL, got {kind!r}")
        return cls(backend_id, FeatureKind(kind))


def _frame_times(n_frames: int, hop: int, sample_rate: int) -> np.ndarray:
    return np.arange(n_frames, dtype=np.float64) * (hop / float(sample_rate))


# ---------------------------------------------------------------------------
# Spectrogram
# ---------------------------------------------------------------------------

def extract_spectrogram(
    w: Waveform,
    channel: str,
    window_ms: float = SPEC_WINDOW_MS,
    hop_ms: float = SPEC_HOP_MS,
    fft_size: int = SPEC_FFT_SIZE,
) -> FeatureMatrix:
    """Magnitude spectrogram of one channel.

    Periodic Hann window, frames laid without center padding, so
    T = floor((N - window) / hop) + 1 and F = fft_size / 2 + 1 magnitude bins
    (no log, no power).  Requires 16 kHz input, matching the pipeline's
    global resampling target.
    """
    if w.sample_rate != SPEC_SAMPLE_RATE:
        raise ValueError(
            f"spectrogram expects {SPEC_SAMPLE_RATE} Hz input, got {w.sample_rate}; resample first"
        )
    x = w.channel(channel).astype(np.float64)
    window = int(round(window_ms * w.sample_rate / 1000.0))
    hop = int(round(hop_ms * w.sample_rate / 1000.0))
    if len(x) < window:
        raise ValueError(f"audio shorter than one window ({len(x)} < {window} samples)")
    if fft_size < window:
        raise ValueError(f"fft_size {fft_size} smaller than window {window}")
    n_frames = (len(x) - window) // hop + 1
    idx = np.arange(n_frames)[:, None] * hop + np.arange(window)[None, :]
    frames = x[idx] * get_window("hann", window, fftbins=True)
    mag = np.abs(np.fft.rfft(frames, n=fft_size, axis=1)).astype(np.float32)
    return FeatureMatrix(
        values=mag,
        frame_times=_frame_times(n_frames, hop, w.sample_rate),
        feature_kind=FeatureKind.SPEC,
        backend_id=SPEC_BACKEND_ID,
        source_channel=channel,
    )


def spectrogram_frame_count(n_samples: int, window: int = 320, hop: int = 160) -> int:
    """Frame count of the no-centering layout: floor((N - window)/hop) + 1."""
    if n_samples < window:
        raise ValueError("audio shorter than one window")
    return (n_samples - window) // hop + 1


# ---------------------------------------------------------------------------
# Mock backend
# ---------------------------------------------------------------------------

def _hop_strides(hop: int) -> list[int]:
    """Prime factors of the hop, largest first; stride schedule of the conv stack."""
    if hop == 1:
        return [1]
    factors = []
    n = hop
    p = 2
    while p * p <= n:
        while n % p == 0:
            factors.append(p)
            n //= p
        p += 1
    if n > 1:
        factors.append(n)
    return sorted(factors, reverse=True)


@dataclass(frozen=True)
class _ConvLayer:
    weight: np.ndarray  # (out, in, kernel)
    bias: np.ndarray  # (out,)
    stride: int

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


class MockBackend:
    """Deterministic stand-in for a self-supervised speech backend.

    FE stage: a seeded strided 1-D convolution stack with tanh activations.
    Strides are the hop's prime factors (largest first); the first layer's
    kernel is twice its stride and later kernels are stride + 1, so the frame
    count follows the per-layer valid-convolution recursion
    ``T_i = floor((T_{i-1} - kernel_i) / stride_i) + 1``.
    OL stage: a seeded frame-wise linear map of the FE output (no inter-stage
    downsampling, so OL and FE frame counts are equal).
    """

    def __init__(self, seed: int, fe_dim: int, ol_dim: int, hop: int, sample_rate: int = 16000):
        if fe_dim < 1 or ol_dim < 1 or hop < 1:
            raise ValueError("fe_dim, ol_dim and hop must all be >= 1")
        backend_id = f"mock-s{seed}-f{fe_dim}-o{ol_dim}-h{hop}"
        self.descriptor = BackendDescriptor(
            backend_id=backend_id,
            fe_dim=fe_dim,
            ol_dim=ol_dim,
            frame_hop=hop,
            expected_sample_rate=sample_rate,
        )
        rng = np.random.default_rng(seed)
        strides = _hop_strides(hop)
        widths = [1] + [_MOCK_INTERNAL_WIDTH] * (len(strides) - 1) + [fe_dim]
        gain = 5.0 / 3.0  # tanh-preserving gain keeps the stack input-sensitive through depth
        layers = []
        for i, stride in enumerate(strides):
            kernel = 2 * stride if i == 0 else stride + 1
            fan_in = widths[i] * kernel
            weight = rng.normal(0.0, gain / math.sqrt(fan_in), size=(widths[i + 1], widths[i], kernel))
            bias = rng.normal(0.0, 0.2, size=widths[i + 1])
            layers.append(_ConvLayer(weight.astype(np.float32), bias.astype(np.float32), stride))
        self.layers = layers
        self.ol_weight = rng.normal(0.0, 1.0 / math.sqrt(fe_dim), size=(fe_dim, ol_dim)).astype(np.float32)
        self.ol_bias = rng.normal(0.0, 0.1, size=ol_dim).astype(np.float32)

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for layer in self.layers:
            rf += (layer.kernel - 1) * jump
            jump *= layer.stride
        return rf

    def frame_count(self, n_samples: int) -> int:
        t = n_samples
        for layer in self.layers:
            t = (t - layer.kernel) // layer.stride + 1
            if t < 1:
                raise ValueError(
                    f"audio too short for backend {self.descriptor.backend_id}: "
                    f"{n_samples} samples < receptive field {self.receptive_field}"
                )
        return t

    def fe(self, x: np.ndarray) -> np.ndarray:
        """FE representation of mono samples: (T, fe_dim) float32."""
        self.frame_count(len(x))  # validates length
        h = x.astype(np.float32)[np.newaxis, :]
        for layer in self.layers:
            c_in, n = h.shape
            c_out, _, kernel = layer.weight.shape
            t = (n - kernel) // layer.stride + 1
            idx = np.arange(t)[:, None] * layer.stride + np.arange(kernel)[None, :]
            frames = h[:, idx].transpose(1, 0, 2).reshape(t, c_in * kernel)
            h = np.tanh(frames @ layer.weight.reshape(c_out, c_in * kernel).T + layer.bias).T
        return np.ascontiguousarray(h.T)

    def ol(self, x: np.ndarray) -> np.ndarray:
        """OL representation: the frame-wise linear map applied to FE frames."""
        return self.ol_from_fe(self.fe(x))

    def ol_from_fe(self, fe_values: np.ndarray) -> np.ndarray:
        return fe_values @ self.ol_weight + self.ol_bias


# ---------------------------------------------------------------------------
# Backend registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegistryEntry:
    descriptor: BackendDescriptor
    ol_tap: str  # which hidden state the OL stage reads
    model_source: str  # where the plug-in finds its weights


# Published dimensions of the supported real backends; the OL tap records
# exactly which layer is read so an alternative tap can be registered.
REAL_BACKENDS: dict[str, RegistryEntry] = {
    "xlsr": RegistryEntry(
        descriptor=BackendDescriptor("xlsr", fe_dim=512, ol_dim=1024, frame_hop=320, expected_sample_rate=16000),
        ol_tap="final transformer hidden state (last_hidden_state)",
        model_source="facebook/wav2vec2-xls-r-300m",
    ),
    "hubert": RegistryEntry(
        descriptor=BackendDescriptor("hubert", fe_dim=512, ol_dim=768, frame_hop=320, expected_sample_rate=16000),
        ol_tap="final transformer hidden state (last_hidden_state)",
        model_source="facebook/hubert-base-ls960",
    ),
}

_BACKENDS: dict[str, object] = {}


def register_mock_backend(seed: int, fe_dim: int = 512, ol_dim: int = 768, hop: int = 320) -> BackendDescriptor:
    """Create (or reuse) a deterministic mock backend and return its descriptor.

    Identical arguments always map to the same backend id and weights, so
    re-registration is idempotent.  The default dimensions mirror the HuBERT
    registry entry (FE 512, OL 768, hop 320).
    """
    backend = MockBackend(seed=seed, fe_dim=fe_dim, ol_dim=ol_dim, hop=hop)
    backend_id = backend.descriptor.backend_id
    if backend_id not in _BACKENDS:
        _BACKENDS[backend_id] = backend
    return _BACKENDS[backend_id].descriptor  # type: ignore[union-attr]


def register_backend(backend) -> BackendDescriptor:
    """Register an externally constructed backend object (plug-in hook)."""
    _BACKENDS[backend.descriptor.backend_id] = backend
    return backend.descriptor


def get_backend(backend_id: str):
    """Resolve a backend by id, loading real plug-ins lazily."""
    if backend_id in _BACKENDS:
        return _BACKENDS[backend_id]
    if backend_id in REAL_BACKENDS:
        backend = _load_real_backend(backend_id)
        _BACKENDS[backend_id] = backend
        return backend
    raise KeyError(f"unknown backend {backend_id!r}; register a mock or plug-in first")


def _load_real_backend(backend_id: str):
    entry = REAL_BACKENDS[backend_id]
    try:
        import torch
        import transformers
    except ImportError as exc:
        raise BackendNotInstalledError(
            f"backend {backend_id!r} needs the 'transformers' and 'torch' packages: {exc}"
        ) from exc

    source = os.environ.get(MODEL_ROOT_ENV)
    location = os.path.join(source, backend_id) if source else entry.model_source
    try:
        model = transformers.AutoModel.from_pretrained(location)
    except Exception as exc:  # load failure is distinct from missing package
        raise BackendLoadError(f"backend {backend_id!r} failed to load from {location!r}: {exc}") from exc
    model.eval()
    return _TransformersBackend(entry.descriptor, model, torch)


class _TransformersBackend:
    """Adapter exposing a transformers speech model as fe()/ol()."""

    def __init__(self, descriptor: BackendDescriptor, model, torch_mod):
        self.descriptor = descriptor
        self._model = model
        self._torch = torch_mod

    def fe(self, x: np.ndarray) -> np.ndarray:
        with self._torch.no_grad():
            wave = self._torch.from_numpy(np.asarray(x, dtype=np.float32))[None, :]
            feats = self._model.feature_extractor(wave)  # (1, F, T)
        return feats[0].T.cpu().numpy()

    def ol(self, x: np.ndarray) -> np.ndarray:
        with self._torch.no_grad():
            wave = self._torch.from_numpy(np.asarray(x, dtype=np.float32))[None, :]
            out = self._model(wave).last_hidden_state  # (1, T, F)
        return out[0].cpu().numpy()


# ---------------------------------------------------------------------------
# Extraction operations
# ---------------------------------------------------------------------------

def _extract_stage(backend_desc: BackendDescriptor, w: Waveform, channel: str, kind: FeatureKind) -> FeatureMatrix:
    if w.sample_rate != backend_desc.expected_sample_rate:
        raise ValueError(
            f"backend {backend_desc.backend_id!r} expects {backend_desc.expected_sample_rate} Hz, "
            f"got {w.sample_rate}; resample the waveform first"
        )
    x = w.channel(channel)
    backend = get_backend(backend_desc.backend_id)
    values = backend.fe(x) if kind == FeatureKind.FE else backend.ol(x)
    expected_dim = backend_desc.dim(kind)
    if values.shape[1] != expected_dim:
        # shape contract violations are hard failures, never warnings
        raise RuntimeError(
            f"backend {backend_desc.backend_id!r} produced F={values.shape[1]} for {kind.value}, "
            f"registry declares {expected_dim}"
        )
    return FeatureMatrix(
        values=np.ascontiguousarray(values, dtype=np.float32),
        frame_times=_frame_times(values.shape[0], backend_desc.frame_hop, w.sample_rate),
        feature_kind=kind,
        backend_id=backend_desc.backend_id,
        source_channel=channel,
    )


def extract_fe(backend: BackendDescriptor, w: Waveform, channel: str) -> FeatureMatrix:
    """Feature-encoder (initial convolutional stage) representation of one channel."""
    return _extract_stage(backend, w, channel, FeatureKind.FE)


def extract_ol(backend: BackendDescriptor, w: Waveform, channel: str) -> FeatureMatrix:
    """Final output (transformer stage) representation of one channel."""
    return _extract_stage(backend, w, channel, FeatureKind.OL)


BoundExtractor = Callable[[Waveform, str], FeatureMatrix]


def make_extractor(binding: FeatureBinding, backend: Optional[BackendDescriptor] = None) -> BoundExtractor:
    """Bind a feature family to a (waveform, channel) -> FeatureMatrix callable.

    For FE/OL bindings, ``backend`` may carry the descriptor; otherwise it is
    resolved from the registry by the binding's backend id.
    """
    if binding.kind == FeatureKind.SPEC:
        return lambda w, channel: extract_spectrogram(w, channel)
    desc = backend if backend is not None else get_backend(binding.backend_id).descriptor
    if desc.backend_id != binding.backend_id:
        raise ValueError(f"descriptor {desc.backend_id!r} does not match binding {binding.backend_id!r}")
    if binding.kind == FeatureKind.FE:
        return lambda w, channel: extract_fe(desc, w, channel)
    return lambda w, channel: extract_ol(desc, w, channel)


def binding_feature_dim(binding: FeatureBinding, backend: Optional[BackendDescriptor] = None) -> int:
    """Feature dimension the predictor must be built with for this binding."""
    if binding.kind == FeatureKind.SPEC:
        return SPEC_FFT_SIZE // 2 + 1
    desc = backend if backend is not None else get_backend(binding.backend_id).descriptor
    return desc.dim(binding.kind)


def binding_sample_rate(binding: FeatureBinding, backend: Optional[BackendDescriptor] = None) -> int:
    """Input sample rate the binding expects."""
    if binding.kind == FeatureKind.SPEC:
        return SPEC_SAMPLE_RATE
    desc = backend if backend is not None else get_backend(binding.backend_id).descriptor
    return desc.expected_sample_rate
