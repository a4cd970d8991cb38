import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from blindisac.core import Constellation, OfdmConfig, SourceParams, qpsk
from blindisac.hos import DetectedSource
from blindisac.separation import (AmbiguityWarning, FitConfig, MixingModel, RankDeficiencyError,
                                  Separation, build_mixing, demodulate, detections_from_truth,
                                  fit_stream, match_to_truth, resolve_permutation, save_demod_report,
                                  score_against_truth, ser, zf_batched, zf_separate)
from blindisac.waveform import Scenario, channel_tensor, steering_vector, synthesize

from conftest import asym_apsk

CFG = OfdmConfig(8, 6, 4)


def det(delay=0.0, doppler=0.0, angle=0.0, gain=1.0):
    return DetectedSource(delay, doppler, angle, complex(gain), 1.0, 100.0, (0.0, 0.0, 0.0))


def quiet(fn, *a, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AmbiguityWarning)
        return fn(*a, **kw)


class TestMixing:
    def test_flat_source_all_ones(self):
        assert np.allclose(build_mixing([det()], CFG, 3, 2), np.ones((4, 1)))

    def test_origin_bin_is_steering(self):
        d = det(3e-8, 2e3, 0.3, 0.8j)
        assert np.allclose(build_mixing([d], CFG, 0, 0)[:, 0], 0.8j * steering_vector(CFG, 0.3), atol=1e-15)

    def test_factor_by_factor(self):
        ds = [det(3e-8, 2e3, 0.3, 0.8j), det(7e-8, -1e3, -0.2, 1.1)]
        k, n = 5, 4
        A = build_mixing(ds, CFG, k, n)
        for p, d in enumerate(ds):
            tf = np.exp(-2j * np.pi * k * CFG.subcarrier_spacing * d.delay) * \
                 np.exp(2j * np.pi * n * CFG.symbol_duration * d.doppler)
            sv = np.exp(-2j * np.pi * 0.5 * np.arange(4) * np.sin(d.angle))
            assert np.allclose(A[:, p], d.gain * tf * sv, atol=1e-14)
        assert np.allclose(MixingModel(ds, CFG).tensor()[k, n], A)

    def test_too_many_sources(self):
        with pytest.raises(ValueError):
            MixingModel([det(angle=0.1 * i) for i in range(5)], CFG)


class TestZeroForcing:
    def test_single_stream_exact(self):
        xi = SourceParams(3e-8, 2e3, 0.2, 0.7 * np.exp(0.3j))
        y, truth = synthesize(Scenario(CFG, [xi], qpsk(), 2))
        sep = zf_separate(y, detections_from_truth([xi]))
        assert np.allclose(sep.streams[..., 0], truth.symbols[..., 0], atol=1e-9)

    def test_two_orthogonal_streams(self):
        # sin(theta) = 0 and 0.5 give orthogonal steering vectors on four antennas
        srcs = [SourceParams(3e-8, 2e3, 0.0), SourceParams(6e-8, -1e3, np.arcsin(0.5), 0.6)]
        y, truth = synthesize(Scenario(CFG, srcs, qpsk(), 2))
        sv = np.stack([steering_vector(CFG, s.angle) for s in srcs], 1)
        assert abs(np.vdot(sv[:, 0], sv[:, 1])) < 1e-12
        sep = zf_separate(y, detections_from_truth(srcs))
        assert np.allclose(sep.streams, truth.symbols, atol=1e-9)
        A = MixingModel(detections_from_truth(srcs), CFG).tensor()
        pinv = np.stack([[np.linalg.pinv(A[k, n]) @ y.data[k, n] for n in range(6)] for k in range(8)])
        assert np.allclose(sep.streams, pinv, atol=1e-9)

    def test_rotated_gain_rotates_stream(self):
        xi = SourceParams(3e-8, 2e3, 0.2)
        y, truth = synthesize(Scenario(CFG, [xi], qpsk(), 2))
        sep = zf_separate(y, [det(xi.delay, xi.doppler, xi.angle, 1j)])
        assert np.allclose(sep.streams[..., 0], truth.symbols[..., 0] * np.exp(-1j * np.pi / 2), atol=1e-12)

    def test_batched_matches_pinv(self, rng):
        A = rng.standard_normal((5, 3, 4, 2)) + 1j * rng.standard_normal((5, 3, 4, 2))
        r = rng.standard_normal((5, 3, 4)) + 1j * rng.standard_normal((5, 3, 4))
        sep = zf_batched(A, r)
        ref = np.einsum("knpm,knm->knp", np.linalg.pinv(A), r)
        assert np.allclose(sep.streams, ref, atol=1e-9) and sep.valid.all()

    def test_batched_flags_rank_deficient_bins(self, rng):
        A = rng.standard_normal((2, 2, 4, 2)) + 0j
        A[1, 0, :, 1] = A[1, 0, :, 0]
        sep = zf_batched(A, np.ones((2, 2, 4), complex))
        assert not sep.valid[1, 0] and sep.valid.sum() == 3
        assert np.all(sep.streams[1, 0] == 0)

    def test_coincident_angles_raise(self):
        y, _ = synthesize(Scenario(CFG, [SourceParams(0, 0, 0.1)], qpsk()))
        with pytest.raises(RankDeficiencyError):
            zf_separate(y, [det(angle=0.1), det(delay=1e-8, angle=0.1)])

    def test_post_zf_noise_variance(self):
        cfg = OfdmConfig(64, 64, 4, noise_variance=0.5)
        srcs = [SourceParams(2e-8, 0, 0.1), SourceParams(5e-8, 0, -0.3, 0.8)]
        dets = detections_from_truth(srcs)
        y, truth = synthesize(Scenario(cfg, srcs, qpsk(), 8))
        err = zf_separate(y, dets).streams - truth.symbols
        A = MixingModel(dets, cfg).matrix(0, 0)
        expect = 0.5 * np.real(np.diag(np.linalg.inv(A.conj().T @ A)))
        assert np.var(err, axis=(0, 1)) == pytest.approx(expect, rel=0.05)


class TestFitStream:
    def test_exact_points(self):
        c = asym_apsk()
        f = fit_stream(c.points, c)
        assert f.beta == pytest.approx(1, abs=1e-12) and f.residual == pytest.approx(0, abs=1e-20)

    def test_scaled_rotated_apsk(self, rng):
        c = asym_apsk()
        idx = rng.integers(0, 16, 400)
        beta = 1.7 * np.exp(0.3j)
        f = fit_stream(beta * c.points[idx], c)
        assert abs(f.beta - beta) < 1e-6
        assert np.array_equal(f.indices, idx)
        # global optimum check by a fine phase scan at the true magnitude
        scan = [np.sum(np.abs(beta * c.points[idx] - 1.7 * np.exp(1j * p) * c.slice(beta * c.points[idx]
                                                                                   / (1.7 * np.exp(1j * p)))[1]) ** 2)
                for p in np.linspace(0, 2 * np.pi, 721)]
        assert np.argmin(scan) == 34  # 0.3 rad is 17.2 degrees on a half-degree grid
        assert f.residual <= min(scan) + 1e-9

    def test_qpsk_quadrant_unresolvable(self, rng):
        c = qpsk()
        x = c.points[rng.integers(0, 4, 200)] * np.exp(1j * np.pi / 2)
        with pytest.warns(AmbiguityWarning):
            fit_stream(x, c)
        js = [np.sum(np.abs(x - b * c.slice(x / b)[1]) ** 2) for b in (1, 1j, -1, -1j)]
        assert np.ptp(js) < 1e-12

    def test_all_zero_is_degenerate(self):
        f = fit_stream(np.zeros(10), asym_apsk())
        assert f.degenerate and f.beta == 0 and f.residual == 0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fit_stream([], asym_apsk())

    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.6))
    def test_residual_non_increasing(self, seed, noise):
        r = np.random.default_rng(seed)
        c = asym_apsk()
        x = 1.3 * np.exp(0.7j) * c.points[r.integers(0, 16, 300)]
        x = x + noise * (r.standard_normal(300) + 1j * r.standard_normal(300))
        h = fit_stream(x, c, FitConfig(dd_iterations=8)).history
        assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(h, h[1:]))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FitConfig(dd_iterations=0)


class TestAmbiguityModel:
    @pytest.mark.parametrize("k", range(4))
    def test_quadrant_rotation_recovered(self, k):
        c = asym_apsk()
        xi = SourceParams(3e-8, 2e3, 0.2, 0.9)
        y, truth = synthesize(Scenario(CFG, [xi], c, 4))
        d = [det(xi.delay, xi.doppler, xi.angle, 0.9 * 1j**k)]
        res = demodulate(y, d, c)
        assert ser(res.symbols, truth.symbols)[0] == 0


class TestPermutation:
    def test_single_identity(self):
        res = resolve_permutation(asym_apsk().points[:, None, None] * np.ones((1, 1, 1)), asym_apsk())
        assert res.permutation == (0,)

    def test_swapped_streams_restored(self, rng):
        a = asym_apsk()
        b = Constellation(np.exp(1j * np.array([0.1, 1.9, 2.6, 4.4, 5.5])), label="five")
        xa = a.points[rng.integers(0, 16, (10, 10))]
        xb = b.points[rng.integers(0, 5, (10, 10))]
        streams = np.stack([xb * 1.2, xa * np.exp(0.4j)], axis=-1)  # detection order opposite to labels
        res = resolve_permutation(streams, [a, b])
        assert res.permutation == (1, 0)
        assert np.allclose(res.symbols[..., 0], xb) and np.allclose(res.symbols[..., 1], xa)

    def test_relabeling_is_consistent(self, rng):
        labels = [asym_apsk(), Constellation(np.exp(1j * np.array([0.1, 1.9, 2.6, 4.4, 5.5]))),
                  Constellation(np.array([1, 0.3j, -0.7, -1.2j, 0.5 + 0.5j]))]
        xs = [lab.points[rng.integers(0, len(lab), (6, 6))] for lab in labels]
        streams = np.stack(xs, -1)
        base = resolve_permutation(streams, labels)
        for order in itertools.permutations(range(3)):
            res = resolve_permutation(streams[..., list(order)], labels)
            for s, src in enumerate(order):
                assert res.permutation[s] == base.permutation[src]
                assert np.allclose(res.symbols[..., s], base.symbols[..., src])

    def test_many_streams_use_assignment(self, rng):
        labels = [Constellation(np.exp(1j * (np.arange(3) * 2.1 + 0.13 * i)) * (1 + 0.1 * i)) for i in range(7)]
        streams = np.stack([lab.points[rng.integers(0, 3, (4, 4))] for lab in labels], -1)
        with pytest.warns(UserWarning, match="assignment"):
            res = resolve_permutation(streams, labels)
        assert sorted(res.permutation) == list(range(7))

    def test_noiseless_pipeline_zero_ser(self):
        c = asym_apsk()
        srcs = [SourceParams(2e-8, 1e3, 0.1), SourceParams(6e-8, -2e3, -0.4, 0.9)]
        y, truth = synthesize(Scenario(CFG, srcs, c, 6))
        res = demodulate(y, detections_from_truth(srcs), c)
        assert np.all(ser(res.symbols, truth.symbols) == 0)

    def test_qpsk_warns(self):
        with pytest.warns(AmbiguityWarning):
            resolve_permutation(qpsk().points[:, None, None] * np.ones((1, 1, 1)), qpsk())


class TestScoring:
    def test_identical(self, rng):
        x = rng.standard_normal((4, 4, 2))
        assert np.all(ser(x, x) == 0)

    def test_one_flip(self):
        x = np.ones(50)
        y = x.copy()
        y[7] = -1
        assert ser(y, x)[0] == pytest.approx(1 / 50)

    def test_random_streams(self, rng):
        c = asym_apsk()
        a = c.points[rng.integers(0, 16, 20000)]
        b = c.points[rng.integers(0, 16, 20000)]
        assert ser(a, b)[0] == pytest.approx(15 / 16, abs=0.02)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ser(np.zeros(3), np.zeros(4))

    def test_match_to_truth(self):
        cfg = OfdmConfig(64, 64, 8)
        srcs = [SourceParams(2e-8, 1e3, 0.1), SourceParams(8e-8, -2e3, -0.1)]
        dets = [det(8.1e-8, -2e3, -0.1), det(2.05e-8, 1.1e3, 0.1), det(1e-7, 0, 0.2)]
        assert match_to_truth(dets, srcs, cfg) == (1, 0, -1)

    def test_report_files(self, tmp_path):
        c = asym_apsk()
        srcs = [SourceParams(2e-8, 1e3, 0.1)]
        y, truth = synthesize(Scenario(CFG, srcs, c, 6))
        res = demodulate(y, detections_from_truth(srcs), c)
        score_against_truth(res, truth.symbols, (0,))
        save_demod_report(res, tmp_path / "d.json", tmp_path / "s.csv")
        import json

        doc = json.loads((tmp_path / "d.json").read_text())
        assert doc["streams"][0]["ser"] == 0 and doc["permutation"] == [0]
        rows = (tmp_path / "s.csv").read_text().splitlines()
        assert rows[0] == "k,n,stream_0" and rows[1].startswith("0,0,") and rows[2].startswith("0,1,")
        assert len(rows) == 1 + 8 * 6
