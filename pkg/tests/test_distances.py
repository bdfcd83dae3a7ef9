import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sipred import stats
from sipred.corpus import UtteranceRecord
from sipred.distances import (
    CorrelationRow,
    correlate_with_correctness,
    DistanceResult,
    mse_distance,
    run_distance_study,
    write_correlation_csv,
    write_distance_csv,
)
from sipred.features import FeatureKind, FeatureMatrix
from tests.conftest import synth_corpus


def _fm(values, kind=FeatureKind.FE, backend="mock", channel="left"):
    values = np.asarray(values, dtype=np.float32)
    return FeatureMatrix(values, np.arange(values.shape[0], dtype=np.float64) * 0.02, kind, backend, channel)


def _brute_force_mse(a, b):
    t = min(a.shape[0], b.shape[0])
    total = 0.0
    for i in range(t):
        for j in range(a.shape[1]):
            total += (float(a[i, j]) - float(b[i, j])) ** 2
    return total / (t * a.shape[1])


class TestMseDistance:
    def test_identity_is_zero(self):
        m = _fm(np.random.default_rng(0).normal(size=(4, 3)))
        assert mse_distance(m, m) == 0.0

    def test_hand_computed_example(self):
        ref = _fm([[1.0, 2.0], [3.0, 4.0]])
        test = _fm([[1.0, 0.0], [3.0, 0.0]])
        assert mse_distance(ref, test) == pytest.approx(5.0, abs=0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            a = rng.normal(size=(7, 5))
            b = rng.normal(size=(7, 5))
            got = mse_distance(_fm(a), _fm(b))
            assert got == pytest.approx(_brute_force_mse(a.astype(np.float32), b.astype(np.float32)), rel=1e-12)

    def test_truncation_alignment(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(9, 4))
        b = rng.normal(size=(6, 4))
        got = mse_distance(_fm(a), _fm(b))
        assert got == pytest.approx(_brute_force_mse(a[:6].astype(np.float32), b.astype(np.float32)), rel=1e-12)

    @given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_symmetry(self, t, f, seed):
        rng = np.random.default_rng(seed)
        a, b = _fm(rng.normal(size=(t, f))), _fm(rng.normal(size=(t, f)))
        assert mse_distance(a, b) == mse_distance(b, a)

    @given(st.floats(-4, 4).filter(lambda c: abs(c) > 1e-3), st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_scale_law(self, c, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        base = mse_distance(_fm(a), _fm(b))
        scaled = mse_distance(_fm(c * a), _fm(c * b))
        assert scaled == pytest.approx(c * c * base, rel=1e-5)

    def test_dim_mismatch_is_error(self):
        with pytest.raises(ValueError, match="dims differ"):
            mse_distance(_fm(np.ones((3, 4))), _fm(np.ones((3, 5))))

    def test_kind_mismatch_is_error(self):
        with pytest.raises(ValueError, match="kinds differ"):
            mse_distance(_fm(np.ones((3, 4))), _fm(np.ones((3, 4)), kind=FeatureKind.OL))

    def test_nonnegative_and_zero_iff_identical(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(4, 4))
        b = a.copy()
        b[2, 2] += 1e-3
        assert mse_distance(_fm(a), _fm(b)) > 0


class TestStats:
    def test_spearman_hand_example(self):
        # ranks differ by d = (-2, 1, 1): 1 - 6*6/(3*8) = -0.5
        assert stats.spearman(np.array([1.0, 2, 3]), np.array([3.0, 1, 2])) == pytest.approx(-0.5, abs=1e-15)

    def test_average_ranks_with_ties(self):
        np.testing.assert_allclose(stats.average_ranks(np.array([1.0, 1.0, 2.0])), [1.5, 1.5, 3.0])
        np.testing.assert_allclose(stats.average_ranks(np.array([5.0, 3.0, 3.0, 3.0, 9.0])), [4, 2, 2, 2, 5])

    def test_perfect_monotone(self):
        x = np.array([1.0, 2, 3, 4])
        assert stats.spearman(x, x) == pytest.approx(1.0)
        assert stats.pearson(x, x) == pytest.approx(1.0)

    def test_spearman_monotone_invariance(self):
        rng = np.random.default_rng(7)
        x, y = rng.normal(size=30), rng.normal(size=30)
        base = stats.spearman(x, y)
        assert stats.spearman(np.exp(x), y) == pytest.approx(base, abs=1e-12)
        assert stats.spearman(x, 3.0 * y + 2.0) == pytest.approx(base, abs=1e-12)

    def test_pearson_affine_invariance(self):
        rng = np.random.default_rng(8)
        x, y = rng.normal(size=30), rng.normal(size=30)
        base = stats.pearson(x, y)
        assert stats.pearson(2.0 * x + 5.0, y) == pytest.approx(base, abs=1e-12)
        assert stats.pearson(x, 0.1 * y - 4.0) == pytest.approx(base, abs=1e-12)
        assert stats.pearson(-x, y) == pytest.approx(-base, abs=1e-12)

    def test_constant_input_is_nan(self):
        assert math.isnan(stats.pearson(np.ones(5), np.arange(5.0)))
        assert math.isnan(stats.spearman(np.ones(5), np.arange(5.0)))


def _study_corpus(tmp_path, n=6, **kwargs):
    manifest = synth_corpus(tmp_path, n, seed=11, **kwargs)
    from sipred.corpus import load_manifest

    return load_manifest(manifest, "closed", audio_root=tmp_path)


class TestDistanceStudy:
    def test_cardinality_contract(self, tmp_path, small_backend):
        records = _study_corpus(tmp_path, n=6)
        results = run_distance_study(records, [small_backend], signal_kinds=("enhanced", "hls"))
        # per record: (1 spectrogram + 2 per backend) x 2 signal kinds
        assert len(results) == 6 * (1 + 2) * 2
        assert all(math.isfinite(r.value) for r in results)

    def test_identical_test_signal_gives_zero(self, tmp_path, small_backend):
        records = _study_corpus(tmp_path, n=3, test_equals_clean=True, with_hls=False)
        results = run_distance_study(records, [small_backend], signal_kinds=("enhanced",))
        assert results and all(r.value == 0.0 for r in results)

    def test_missing_clean_reference_skips_with_diagnostic(self, tmp_path, small_backend, caplog):
        records = _study_corpus(tmp_path, n=3)
        records[1] = UtteranceRecord(
            utterance_id=records[1].utterance_id,
            listener_id=records[1].listener_id,
            system_id=records[1].system_id,
            enhanced_audio_ref=records[1].enhanced_audio_ref,
            correctness=records[1].correctness,
            clean_audio_ref=None,
        )
        with caplog.at_level(logging.WARNING):
            results = run_distance_study(records, [small_backend], signal_kinds=("enhanced",))
        assert len({r.utterance_id for r in results}) == 2
        assert any("clean reference" in m for m in caplog.messages)

    def test_bad_audio_does_not_abort(self, tmp_path, small_backend, caplog):
        records = _study_corpus(tmp_path, n=3)
        (tmp_path / "HA_outputs" / f"{records[0].utterance_id}.wav").write_bytes(b"corrupt")
        with caplog.at_level(logging.WARNING):
            results = run_distance_study(records, [small_backend], signal_kinds=("enhanced",))
        assert len({r.utterance_id for r in results}) == 2

    def test_spectrogram_distance_grows_with_noise(self, tmp_path):
        # Monte-Carlo with a fixed seed: MSE grows with the noise variance
        rng = np.random.default_rng(99)
        n = 8000
        t = np.arange(n) / 16000
        clean = 0.4 * np.sin(2 * np.pi * 330 * t)
        from sipred.corpus import Waveform
        from sipred.features import extract_spectrogram

        ref = extract_spectrogram(Waveform(clean[None, :], 16000, ("left",)), "left")
        noise = rng.normal(size=n)
        values = []
        for scale in (0.01, 0.05, 0.2, 0.8):
            noisy = clean + scale * noise
            test = extract_spectrogram(Waveform(noisy[None, :], 16000, ("left",)), "left")
            values.append(mse_distance(ref, test))
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_study_determinism(self, tmp_path, small_backend):
        records = _study_corpus(tmp_path, n=4)
        a = run_distance_study(records, [small_backend], signal_kinds=("enhanced",))
        b = run_distance_study(records, [small_backend], signal_kinds=("enhanced",))
        assert a == b


class TestCorrelateWithCorrectness:
    def _results_from(self, values, kind="enhanced"):
        return [
            DistanceResult(f"U{i:03d}", "d_SG", kind, "SPEC", float(v)) for i, v in enumerate(values)
        ]

    def _records_with(self, correctness):
        return [
            UtteranceRecord(f"U{i:03d}", "L1", "E1", "x.wav", float(c))
            for i, c in enumerate(correctness)
        ]

    def test_perfect_monotone_identity(self):
        values = [10.0, 20.0, 30.0, 40.0]
        rows = correlate_with_correctness(self._results_from(values), self._records_with(values))
        assert len(rows) == 1
        assert rows[0].spearman == pytest.approx(1.0)
        assert rows[0].pearson == pytest.approx(1.0)
        assert rows[0].n == 4 and not rows[0].undefined

    def test_constant_distances_flagged(self):
        rows = correlate_with_correctness(
            self._results_from([5.0, 5.0, 5.0]), self._records_with([10.0, 20.0, 30.0])
        )
        assert rows[0].undefined and math.isnan(rows[0].spearman)

    def test_too_few_pairs_is_error(self):
        with pytest.raises(ValueError, match=">= 2"):
            correlate_with_correctness(self._results_from([1.0]), self._records_with([50.0]))

    def test_unknown_utterance_is_error(self):
        with pytest.raises(ValueError, match="unknown utterance"):
            correlate_with_correctness(self._results_from([1.0, 2.0]), self._records_with([50.0]))

    def test_row_per_group(self, tmp_path, small_backend):
        records = _study_corpus(tmp_path, n=5)
        results = run_distance_study(records, [small_backend], signal_kinds=("enhanced", "hls"))
        rows = correlate_with_correctness(results, records)
        # (SPEC + backend FE + backend OL) x 2 signal kinds
        assert len(rows) == 6
        assert all(isinstance(r, CorrelationRow) for r in rows)
        assert all(abs(r.spearman) <= 1 + 1e-12 or r.undefined for r in rows)


class TestCsvOutputs:
    def test_deterministic_bytes(self, tmp_path):
        results = [
            DistanceResult("U2", "d_SG", "enhanced", "SPEC", 0.5),
            DistanceResult("U1", "d_FE", "enhanced", "mock", 1.25),
            DistanceResult("U2", "d_FE", "enhanced", "mock", 2.5),
            DistanceResult("U1", "d_SG", "enhanced", "SPEC", 0.25),
        ]
        rows = correlate_with_correctness(
            results,
            [
                UtteranceRecord("U1", "L1", "E1", "x.wav", 10.0),
                UtteranceRecord("U2", "L2", "E2", "y.wav", 90.0),
            ],
        )
        for _ in range(2):
            write_distance_csv(results, tmp_path / "d.csv")
            write_correlation_csv(rows, tmp_path / "c.csv")
        d_lines = (tmp_path / "d.csv").read_text().splitlines()
        assert d_lines[0] == "utterance_id,representation,measure,signal_kind,value"
        assert d_lines[1] == "U1,SPEC,d_SG,enhanced,0.25"
        assert d_lines[2].startswith("U1,mock,d_FE")
        c_lines = (tmp_path / "c.csv").read_text().splitlines()
        assert c_lines[0] == "representation,measure,signal_kind,spearman,pearson,n,undefined"
