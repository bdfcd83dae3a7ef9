import numpy as np
import pytest
import torch

from sipred.corpus import Waveform
from sipred.features import FeatureKind, FeatureMatrix, extract_ol, make_extractor, FeatureBinding
from sipred.predictor import (
    ModelConfig,
    Prediction,
    build_model,
    flat_parameters,
    forward_channel,
    load_checkpoint,
    parameter_segments,
    predict_utterance,
    reference_count_flag,
    save_checkpoint,
    set_flat_parameters,
)


def _feats(t, f, seed=0, channel="left"):
    rng = np.random.default_rng(seed)
    return FeatureMatrix(
        rng.normal(0, 1, size=(t, f)).astype(np.float32),
        np.arange(t, dtype=np.float64) * 0.02,
        FeatureKind.OL,
        "mock",
        channel,
    )


class TestModelConfig:
    def test_hidden_defaults_to_floor_half(self):
        assert ModelConfig(feature_dim=513).blstm_hidden == 256
        assert ModelConfig(feature_dim=1024).blstm_hidden == 512
        assert ModelConfig(feature_dim=8).blstm_hidden == 4

    def test_parameter_count_known_values(self):
        assert ModelConfig(feature_dim=1024).parameter_count() == 14_701_570
        assert ModelConfig(feature_dim=257).parameter_count() == 923_906

    def test_parameter_count_monotone_in_f(self):
        counts = [ModelConfig(feature_dim=f).parameter_count() for f in range(2, 200, 7)]
        assert all(b > a for a, b in zip(counts, counts[1:]))

    def test_realized_count_matches_derived(self):
        for f in (8, 33, 64):
            model = build_model(f, seed=0)
            assert model.parameter_count == model.config.parameter_count()

    def test_reference_flags(self):
        assert reference_count_flag(ModelConfig(feature_dim=1024).parameter_count(), 1024) is None
        flag = reference_count_flag(ModelConfig(feature_dim=513).parameter_count(), 513)
        assert flag is not None and "deviates" in flag
        assert reference_count_flag(12345, 64) is None  # no reference registered

    def test_build_records_flag(self):
        assert build_model(1024, seed=0).reference_flag is None
        assert build_model(513, seed=0).reference_flag is not None


class TestBuildDeterminism:
    def test_same_seed_identical(self):
        a = build_model(12, seed=5)
        b = build_model(12, seed=5)
        np.testing.assert_array_equal(flat_parameters(a), flat_parameters(b))

    def test_different_seed_differs(self):
        a = build_model(12, seed=5)
        b = build_model(12, seed=6)
        assert not np.array_equal(flat_parameters(a), flat_parameters(b))


class TestForwardChannel:
    def test_output_in_open_interval(self):
        model = build_model(10, seed=1)
        for seed in range(20):
            y = forward_channel(model, _feats(17, 10, seed=seed))
            assert 0.0 < y < 1.0

    def test_single_frame_input(self):
        model = build_model(6, seed=2)
        y = forward_channel(model, _feats(1, 6))
        assert 0.0 < y < 1.0

    def test_dim_mismatch_is_error(self):
        model = build_model(6, seed=2)
        with pytest.raises(ValueError, match="feature_dim"):
            forward_channel(model, _feats(4, 7))

    def test_deterministic_repeat(self):
        model = build_model(10, seed=3)
        f = _feats(30, 10, seed=9)
        assert forward_channel(model, f) == forward_channel(model, f)

    def test_masked_batch_matches_solo(self):
        # padded+packed batch of unequal lengths must agree with per-item passes
        model = build_model(8, seed=4)
        items = [_feats(12, 8, seed=0), _feats(5, 8, seed=1), _feats(9, 8, seed=2)]
        lengths = torch.tensor([f.n_frames for f in items])
        x = torch.zeros(3, 12, 8)
        for i, f in enumerate(items):
            x[i, : f.n_frames] = torch.from_numpy(f.values)
        with torch.no_grad():
            batched = model.net(x, lengths).numpy()
        solo = np.array([forward_channel(model, f) for f in items])
        np.testing.assert_allclose(batched, solo, atol=1e-6)


class TestBetterEar:
    def test_max_rule(self):
        pred = Prediction("u", 0.7, {"left": 0.4, "right": 0.7})
        assert pred.i_hat == 0.7
        with pytest.raises(ValueError, match="maximum"):
            Prediction("u", 0.4, {"left": 0.4, "right": 0.7})

    def test_predict_utterance_max_and_symmetry(self, small_backend):
        model = build_model(small_backend.ol_dim, seed=7)
        extractor = make_extractor(FeatureBinding(small_backend.backend_id, FeatureKind.OL), small_backend)
        rng = np.random.default_rng(0)
        samples = rng.normal(0, 0.1, size=(2, 3000))
        w = Waveform(samples, 16000, ("left", "right"))
        pred = predict_utterance(model, w, extractor, utterance_id="u1")
        assert pred.i_hat == max(pred.per_channel.values())
        assert set(pred.per_channel) == {"left", "right"}
        # channel swap leaves the utterance-level prediction unchanged
        swapped = Waveform(samples[::-1].copy(), 16000, ("left", "right"))
        pred_swapped = predict_utterance(model, swapped, extractor, utterance_id="u1")
        assert pred_swapped.i_hat == pred.i_hat
        assert pred_swapped.per_channel["left"] == pred.per_channel["right"]

    def test_identical_channels(self, small_backend):
        model = build_model(small_backend.ol_dim, seed=7)
        extractor = make_extractor(FeatureBinding(small_backend.backend_id, FeatureKind.OL), small_backend)
        mono = np.random.default_rng(1).normal(0, 0.1, size=(1, 3000))
        stereo = Waveform(np.vstack([mono, mono]), 16000, ("left", "right"))
        pred = predict_utterance(model, stereo, extractor)
        assert pred.per_channel["left"] == pred.per_channel["right"] == pred.i_hat

    def test_mono_passthrough(self, small_backend):
        model = build_model(small_backend.ol_dim, seed=7)
        extractor = make_extractor(FeatureBinding(small_backend.backend_id, FeatureKind.OL), small_backend)
        w = Waveform(np.random.default_rng(2).normal(0, 0.1, size=(1, 3000)), 16000, ("left",))
        pred = predict_utterance(model, w, extractor)
        assert pred.i_hat == pred.per_channel["left"]
        assert "right" not in pred.per_channel

    def test_extraction_failure_carries_context(self, small_backend):
        model = build_model(small_backend.ol_dim, seed=7)
        extractor = make_extractor(FeatureBinding(small_backend.backend_id, FeatureKind.OL), small_backend)
        short = Waveform(np.zeros((1, 50)), 16000, ("left",))
        with pytest.raises(RuntimeError, match="u99"):
            predict_utterance(model, short, extractor, utterance_id="u99")


class TestFlatParameters:
    def test_segments_cover_vector(self):
        model = build_model(9, seed=0)
        segments = parameter_segments(model)
        total = sum(int(np.prod(shape)) for _, _, shape in segments)
        assert total == model.parameter_count
        assert segments[0][1] == 0

    def test_set_get_round_trip(self):
        model = build_model(9, seed=0)
        vec = flat_parameters(model)
        vec2 = vec.copy()
        vec2[3] += 0.5
        set_flat_parameters(model, vec2)
        np.testing.assert_array_equal(flat_parameters(model), vec2)

    def test_wrong_length_rejected(self):
        model = build_model(9, seed=0)
        with pytest.raises(ValueError):
            set_flat_parameters(model, np.zeros(3))


class TestCheckpoint:
    def test_round_trip_bitwise_predictions(self, tmp_path):
        model = build_model(11, seed=13, backend_binding="mock:OL")
        feats = [_feats(t, 11, seed=t) for t in (3, 8, 20)]
        before = [forward_channel(model, f) for f in feats]
        path = save_checkpoint(model, tmp_path / "ck.pt")
        loaded = load_checkpoint(path)
        after = [forward_channel(loaded, f) for f in feats]
        assert before == after  # bitwise identical
        assert loaded.backend_binding == "mock:OL"
        assert loaded.seed == 13
        assert loaded.config == model.config

    def test_version_check(self, tmp_path):
        model = build_model(5, seed=0)
        path = save_checkpoint(model, tmp_path / "ck.pt")
        payload = torch.load(path, weights_only=True)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(ValueError, match="format version"):
            load_checkpoint(path)

    def test_float64_round_trip(self, tmp_path):
        model = build_model(6, seed=1, dtype=torch.float64)
        path = save_checkpoint(model, tmp_path / "ck64.pt")
        loaded = load_checkpoint(path)
        assert loaded.dtype == torch.float64
        f = _feats(4, 6)
        assert forward_channel(loaded, f) == forward_channel(model, f)
