"""Non-intrusive correctness predictor: BLSTM encoder + attention pooling.

A (T, F) feature matrix is processed by two bidirectional LSTM layers with a
per-direction hidden size of floor(F / 2); the second layer consumes the
concatenated bidirectional output of the first.  Frames are then pooled by a
learned attention head: a feed-forward scorer (d -> attention_width -> 1,
ReLU in between) produces softmax weights over time, the weighted frame sum
is mapped by one linear layer to a single output, and a sigmoid yields the
predicted correctness fraction.  Binaural inputs are handled by running each
channel separately and taking the maximum of the two channel scores
(better-ear rule).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from sipred.corpus import Waveform
from sipred.features import FeatureMatrix

CHECKPOINT_FORMAT_VERSION = 1

# Reference totals used as soft sanity targets for well-known feature
# dimensions; a build whose count strays more than 10% is flagged (reported,
# never failed), since pooling-head variants legitimately change the total.
REFERENCE_PARAM_COUNTS = {513: 923_906, 1024: 14_701_570}
REFERENCE_TOLERANCE = 0.10

# sigmoid is an open-interval map; clamp guards against float rounding to 0/1
_OUTPUT_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    """Architecture descriptor; the parameter count is a pure function of it."""

    feature_dim: int
    blstm_layers: int = 2
    blstm_hidden: Optional[int] = None  # per direction; defaults to floor(F/2)
    attention_width: Optional[int] = None  # defaults to 2x the BLSTM output dim

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.blstm_layers < 1:
            raise ValueError("blstm_layers must be >= 1")
        if self.blstm_hidden is None:
            object.__setattr__(self, "blstm_hidden", max(1, self.feature_dim // 2))
        if self.blstm_hidden < 1:
            raise ValueError("blstm_hidden must be >= 1")
        if self.attention_width is None:
            object.__setattr__(self, "attention_width", 4 * self.blstm_hidden)
        if self.attention_width < 1:
            raise ValueError("attention_width must be >= 1")

    @property
    def frame_dim(self) -> int:
        """Dimension of one pooled frame embedding (both LSTM directions)."""
        return 2 * self.blstm_hidden

    def parameter_count(self) -> int:
        h, d, a = self.blstm_hidden, self.frame_dim, self.attention_width
        total, in_size = 0, self.feature_dim
        for _ in range(self.blstm_layers):
            total += 2 * (4 * h * in_size + 4 * h * h + 8 * h)
            in_size = d
        total += d * a + a  # attention scorer, hidden layer
        total += a + 1  # attention scorer, output
        total += d + 1  # pooled embedding -> single output unit
        return total


class CorrectnessNet(nn.Module):
    """BLSTM + attention-pooling network with a single sigmoid output."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.blstm = nn.LSTM(
            input_size=config.feature_dim,
            hidden_size=config.blstm_hidden,
            num_layers=config.blstm_layers,
            batch_first=True,
            bidirectional=True,
        )
        d = config.frame_dim
        self.att_hidden = nn.Linear(d, config.attention_width)
        self.att_score = nn.Linear(config.attention_width, 1)
        self.output = nn.Linear(d, 1)

    def forward(self, x: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        """x: (B, T, F); lengths: (B,) valid frame counts for padded batches."""
        if lengths is None:
            frames, _ = self.blstm(x)  # (B, T, d)
        else:
            # packing keeps the reverse direction clear of padded frames
            packed = nn.utils.rnn.pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
            frames, _ = self.blstm(packed)
            frames, _ = nn.utils.rnn.pad_packed_sequence(frames, batch_first=True, total_length=x.shape[1])
        scores = self.att_score(torch.relu(self.att_hidden(frames))).squeeze(-1)  # (B, T)
        if lengths is not None:
            t = frames.shape[1]
            mask = torch.arange(t, device=x.device)[None, :] >= lengths[:, None]
            scores = scores.masked_fill(mask, float("-inf"))
        weights = torch.softmax(scores, dim=1)
        pooled = torch.sum(weights.unsqueeze(-1) * frames, dim=1)  # (B, d)
        return torch.sigmoid(self.output(pooled)).squeeze(-1)  # (B,)


@dataclass
class PredictorModel:
    """A built network plus the metadata needed to use it consistently."""

    config: ModelConfig
    net: CorrectnessNet
    backend_binding: Optional[str] = None  # "SPEC" or "<backend_id>:FE|OL"
    seed: int = 0
    reference_flag: Optional[str] = field(default=None, repr=False)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype


@dataclass(frozen=True)
class Prediction:
    """Utterance-level predicted correctness with its per-channel scores."""

    utterance_id: str
    i_hat: float
    per_channel: dict[str, float]

    def __post_init__(self):
        if self.per_channel and self.i_hat != max(self.per_channel.values()):
            raise ValueError("i_hat must be the maximum of the per-channel scores")


def reference_count_flag(count: int, feature_dim: int) -> Optional[str]:
    """Message when the count strays >10% from a known reference target, else None."""
    target = REFERENCE_PARAM_COUNTS.get(feature_dim)
    if target is None:
        return None
    deviation = abs(count - target) / target
    if deviation <= REFERENCE_TOLERANCE:
        return None
    return (
        f"parameter count {count} deviates {100 * deviation:.1f}% from the reference "
        f"{target} for feature_dim={feature_dim} (pooling-head variants change the total)"
    )


def _init_parameters(net: CorrectnessNet, seed: int) -> None:
    # uniform(-1/sqrt(fan), 1/sqrt(fan)) applied in sorted name order; fan is
    # the LSTM hidden size for recurrent params and fan-in for linear params
    gen = torch.Generator().manual_seed(seed)
    hidden = net.config.blstm_hidden
    with torch.no_grad():
        for name, param in sorted(net.named_parameters()):
            if name.startswith("blstm."):
                bound = 1.0 / math.sqrt(hidden)
            elif param.ndim == 2:
                bound = 1.0 / math.sqrt(param.shape[1])
            else:
                owner = name.rsplit(".", 1)[0]
                fan_in = dict(net.named_modules())[owner].in_features
                bound = 1.0 / math.sqrt(fan_in)
            param.uniform_(-bound, bound, generator=gen)


def build_model(
    feature_dim: int,
    seed: int,
    backend_binding: Optional[str] = None,
    config: Optional[ModelConfig] = None,
    dtype: torch.dtype = torch.float32,
) -> PredictorModel:
    """Build a deterministic, seeded predictor for the given feature dimension.

    The realized parameter count always equals ``config.parameter_count()``;
    it is additionally compared against the known reference totals and any
    >10% deviation is recorded on the returned model (flagged, not failed).
    """
    cfg = config if config is not None else ModelConfig(feature_dim=feature_dim)
    if cfg.feature_dim != feature_dim:
        raise ValueError("config.feature_dim disagrees with feature_dim argument")
    net = CorrectnessNet(cfg).to(dtype)
    _init_parameters(net, seed)
    net.eval()
    model = PredictorModel(config=cfg, net=net, backend_binding=backend_binding, seed=seed)
    expected = cfg.parameter_count()
    if model.parameter_count != expected:
        raise RuntimeError(f"realized parameter count {model.parameter_count} != derived {expected}")
    model.reference_flag = reference_count_flag(expected, feature_dim)
    return model


def forward_channel(model: PredictorModel, feats: FeatureMatrix) -> float:
    """Predicted correctness fraction for a single channel, strictly in (0, 1)."""
    if feats.feature_dim != model.config.feature_dim:
        raise ValueError(
            f"feature dim {feats.feature_dim} does not match model feature_dim "
            f"{model.config.feature_dim}"
        )
    x = torch.from_numpy(np.ascontiguousarray(feats.values)).to(model.dtype).unsqueeze(0)
    with torch.no_grad():
        y = float(model.net(x)[0])
    return min(max(y, _OUTPUT_EPS), 1.0 - _OUTPUT_EPS)


def predict_utterance(
    model: PredictorModel,
    w: Waveform,
    extractor: Callable[[Waveform, str], FeatureMatrix],
    utterance_id: str = "",
) -> Prediction:
    """Per-channel forward passes combined by the better-ear (max) rule."""
    per_channel: dict[str, float] = {}
    for label in w.channel_labels:
        try:
            feats = extractor(w, label)
        except Exception as exc:
            raise RuntimeError(f"feature extraction failed for {utterance_id!r} ({label}): {exc}") from exc
        per_channel[label] = forward_channel(model, feats)
    return Prediction(utterance_id=utterance_id, i_hat=max(per_channel.values()), per_channel=per_channel)


# ---------------------------------------------------------------------------
# Flat parameter access (checkpointing, gradient checks)
# ---------------------------------------------------------------------------

def parameter_segments(model: PredictorModel) -> list[tuple[str, int, tuple[int, ...]]]:
    """(name, offset, shape) of each named segment in the flat vector."""
    segments, offset = [], 0
    for name, param in model.net.named_parameters():
        segments.append((name, offset, tuple(param.shape)))
        offset += param.numel()
    return segments


def flat_parameters(model: PredictorModel) -> np.ndarray:
    return torch.nn.utils.parameters_to_vector(model.net.parameters()).detach().cpu().numpy().copy()


def set_flat_parameters(model: PredictorModel, vector: np.ndarray) -> None:
    expected = model.parameter_count
    if vector.shape != (expected,):
        raise ValueError(f"expected a flat vector of length {expected}, got {vector.shape}")
    tensor = torch.from_numpy(np.ascontiguousarray(vector)).to(model.dtype)
    torch.nn.utils.vector_to_parameters(tensor, model.net.parameters())


def save_checkpoint(model: PredictorModel, path: str | Path) -> Path:
    """Write a self-describing, versioned checkpoint file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_type": "blstm_attention_pool",
        "config": {
            "feature_dim": model.config.feature_dim,
            "blstm_layers": model.config.blstm_layers,
            "blstm_hidden": model.config.blstm_hidden,
            "attention_width": model.config.attention_width,
        },
        "backend_binding": model.backend_binding,
        "seed": model.seed,
        "dtype": str(model.dtype).removeprefix("torch."),
        "state": model.net.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> PredictorModel:
    payload = torch.load(Path(path), weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    cfg = ModelConfig(**payload["config"])
    net = CorrectnessNet(cfg).to(getattr(torch, payload["dtype"]))
    net.load_state_dict(payload["state"])
    net.eval()
    return PredictorModel(
        config=cfg,
        net=net,
        backend_binding=payload["backend_binding"],
        seed=payload["seed"],
    )
