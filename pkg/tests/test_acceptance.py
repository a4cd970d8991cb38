"""
End-to-end acceptance checks. Each test records a one-line verdict that is
printed in the terminal summary, then asserts at the stated tolerance.

Runtime is dominated by the Monte-Carlo sweeps (several minutes in total on
one core).
"""

import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

from blindisac.bounds import closed_form_fim, numerical_fim_oracle
from blindisac.core import Constellation, OfdmConfig, SourceParams, qpsk, rotation_separation, slice_points
from blindisac.design import preset_design
from blindisac.harness import Experiment, run_experiment
from blindisac.hos import EstimatorConfig, detect_all, hos_periodogram
from blindisac.separation import (AmbiguityWarning, MixingModel, demodulate, detections_from_truth,
                                  fit_stream, match_to_truth, ser, zf_batched)
from blindisac.waveform import Scenario, noise_variance_for_snr, synthesize

from conftest import ACCEPTANCE

DESK = OfdmConfig.desk_grid()
PARAMS = ("delay", "velocity", "angle")
SOURCE = dict(delay_ns=20, velocity_mps=15, angle_deg=8)


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


def single_source(cfg):
    return Scenario(cfg, [SourceParams.from_physical(cfg=cfg, **SOURCE)], qpsk(), 0)


@pytest.fixture(scope="module")
def snr_sweep():
    exp = Experiment("snr", single_source(DESK), "snr_db", (5, 10, 15, 20), trials=50,
                     methods=("blind", "data_aided"))
    t0 = time.perf_counter()
    table = run_experiment(exp, seed=0)
    return table, time.perf_counter() - t0


def test_c01_fim_oracle():
    tuples = [
        (OfdmConfig(16, 16, 4), SourceParams(10e-9, 1e3, np.deg2rad(5)), 10.0),
        (OfdmConfig(16, 16, 4), SourceParams(10e-9, 1e3, 0.0), 1.0),
        (OfdmConfig(16, 16, 4), SourceParams(40e-9, -3e3, np.deg2rad(30)), 10.0),
        (OfdmConfig(8, 12, 6), SourceParams(70e-9, 2e3, np.deg2rad(30)), 100.0),
        (OfdmConfig(32, 16, 8), SourceParams(5e-9, 8e3, np.deg2rad(-20)), 0.5),
        (OfdmConfig(24, 32, 4, antenna_spacing_ratio=0.4), SourceParams(120e-9, 500.0, 0.0), 3.0),
    ]
    t0 = time.perf_counter()
    worst = 0.0
    for cfg, xi, snr in tuples:
        J = numerical_fim_oracle(cfg, xi, snr)
        C = closed_form_fim(cfg, snr, xi.angle)
        worst = max(worst, float(np.max(np.abs(np.diag(J) / np.diag(C) - 1))))
    dt = time.perf_counter() - t0
    ok = worst <= 0.01 and dt < 10
    record(1, ok, f"{len(tuples)} tuples, worst relative error {worst:.2e}, {dt:.2f} s")
    assert ok


def test_c02_data_aided_efficiency(snr_sweep):
    table, dt = snr_sweep
    worst = 0.0
    for v in (5, 10, 15, 20):
        for p in PARAMS:
            worst = max(worst, table.mean(v, f"data_aided_{p}_rmse") / table.mean(v, f"crlb_{p}"))
    ok = worst <= 2.0 and dt < 600
    record(2, ok, f"max RMSE / sqrt(CRLB) = {worst:.2f} over 4 SNRs x 3 params (limit 2), sweep {dt:.0f} s")
    assert ok


def test_c03_cost_of_blindness(snr_sweep):
    table, _ = snr_sweep
    ratios = {(v, p): table.mean(v, f"blind_{p}_rmse") / table.mean(v, f"data_aided_{p}_rmse")
              for v in (10, 15, 20) for p in PARAMS}
    lo, hi = min(ratios.values()), max(ratios.values())
    ok = all(2.0 <= r <= 8.0 for r in ratios.values())
    record(3, ok, f"blind / data-aided RMSE ratios span [{lo:.2f}, {hi:.2f}] at SNR >= 10 dB (band [2, 8])")
    assert ok


def test_c04_three_sources_full_grid():
    cfg = OfdmConfig.full_grid()
    srcs = [SourceParams.from_physical(20, 15, 8, 1.0, cfg),
            SourceParams.from_physical(80, -20, -5, 0.9, cfg),
            SourceParams.from_physical(50, 0, 0, 1.0, cfg)]
    sc = Scenario(cfg, srcs, qpsk(), 0).with_noise(noise_variance_for_snr(5))
    est = EstimatorConfig.for_grid(cfg)
    t0 = time.perf_counter()
    good, counts = 0, []
    for trial in range(30):
        y, _ = synthesize(sc.with_seed(trial))
        rep = detect_all(y, est)
        counts.append(rep.num_detected)
        if rep.num_detected != 3:
            continue
        match = match_to_truth(rep.detections, srcs, cfg)
        errs = []
        for i, j in enumerate(match):
            d, s = rep.detections[i], srcs[j]
            errs.append((abs(d.delay - s.delay) <= 2e-9)
                        and abs(d.velocity(cfg) - s.velocity(cfg)) <= 2
                        and abs(np.rad2deg(d.angle - s.angle)) <= 1)
        good += sorted(match) == [0, 1, 2] and all(errs)
    dt = time.perf_counter() - t0
    ok = good >= 27 and dt < 900
    record(4, ok, f"{good}/30 trials with P=3 and all errors within (2 ns, 2 m/s, 1 deg), "
                  f"detections per trial {min(counts)}..{max(counts)}, {dt:.0f} s")
    assert ok


def test_c05_cfar_false_alarms():
    sc = Scenario(DESK, [], qpsk(), 0).with_noise(1.0)
    est = EstimatorConfig.for_grid(DESK)
    alarms = sum(detect_all(synthesize(sc.with_seed(10_000 + t))[0], est).num_detected > 0
                 for t in range(200))
    ok = alarms / 200 <= 0.05
    record(5, ok, f"{alarms}/200 noise-only trials with a detection at threshold {est.threshold:g}")
    assert ok


def test_c06_blind_demodulation():
    c = preset_design("balanced").constellation
    cfg = OfdmConfig(16, 16, 8)
    srcs = [SourceParams.from_physical(20, 15, 8, 1.0, cfg), SourceParams.from_physical(80, -20, -5, 0.9, cfg),
            SourceParams.from_physical(50, 0, 0, 1.0, cfg)]
    y, truth = synthesize(Scenario(cfg, srcs, c, 5), noiseless=True)
    sers = []
    for k in range(4):
        dets = [replace(d, gain=d.gain * 1j**k) for d in detections_from_truth(srcs)]
        res = demodulate(y, dets, c)
        sers.append(float(np.max(ser(res.symbols, truth.symbols))))
    q = qpsk()
    rng = np.random.default_rng(0)
    x = 0.8 * np.exp(0.2j) * q.points[rng.integers(0, 4, 500)]
    x = x + 0.05 * (rng.standard_normal(500) + 1j * rng.standard_normal(500))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AmbiguityWarning)
        beta = fit_stream(x, q).beta
    js = [float(np.sum(np.abs(x - b * q.slice(x / b)[1]) ** 2)) for b in beta * 1j ** np.arange(4)]
    spread = (max(js) - min(js)) / max(js)
    ok = max(sers) == 0 and spread < 1e-12
    record(6, ok, f"balanced APSK SER per quadrant rotation {sers}; QPSK J spread over rotations {spread:.1e}")
    assert ok


def test_c07_pilot_crossover():
    cfg = OfdmConfig(128, 64, 8)
    sc = single_source(cfg)
    counts = (2, 4, 8, 16)
    blind = run_experiment(Experiment("b", sc, "snr_db", (10,), trials=30, methods=("blind",)), seed=0)
    pilot = run_experiment(Experiment("p", sc, "pilot_count", counts, trials=30, methods=("pilot",),
                                      snr_db=10), seed=0)
    b = blind.mean(10, "blind_delay_rmse")
    p = {n: pilot.mean(n, "pilot_delay_rmse") for n in counts}
    ok = all(b < p[n] for n in counts)
    detail = ", ".join(f"Np={n}: {p[n] * 1e12:.2f} ps" for n in counts)
    record(7, ok, f"blind delay RMSE {b * 1e12:.2f} ps vs pilot-aided {detail} (128x64x8 grid, 30 trials)")
    assert ok


def test_c08_presets():
    checks = {
        "sensing": lambda m: abs(m.fourth_moment) >= 0.9 and m.d_rot_quarter >= 0.3,
        "comm": lambda m: m.d_min >= 0.5,
        "balanced": lambda m: m.d_min > 0.3 and abs(m.fourth_moment) > 0.2 and m.d_rot_quarter > 0.1,
    }
    parts, ok = [], True
    for name, check in checks.items():
        m = preset_design(name).metrics
        passed = bool(check(m))
        ok &= passed
        parts.append(f"{name} {'ok' if passed else 'miss'} (d_min {m.d_min:.3f}, |mu4| "
                     f"{abs(m.fourth_moment):.3f}, d_rot {m.d_rot_quarter:.3f})")
    record(8, ok, "; ".join(parts))
    assert ok


def _impairment_sweep(kind, values):
    exp = Experiment(kind, single_source(DESK), "impairment", values, trials=30, impairment=kind,
                     snr_db=10)
    return run_experiment(exp, seed=0)


def test_c09_impairments():
    est = EstimatorConfig.for_grid(DESK)
    tau_bin = 1 / (4 * DESK.subcarrier_spacing) / est.fft_sizes[0]
    v_bin = DESK.wavelength / (4 * DESK.symbol_duration) / est.fft_sizes[1]
    lines, ok = [], True

    def stable(t, values, p):
        ref = t.mean(values[0], f"blind_{p}_mean")
        return all(abs(t.mean(v, f"blind_{p}_mean") - ref) <= 0.1 * abs(ref) for v in values)

    taus = (0, 1, 2, 5, 10, 20, 40)
    t = _impairment_sweep("timing_offset_ns", taus)
    shift = max(abs(t.mean(v, "blind_delay_mean") - t.mean(0, "blind_delay_mean") - v * 1e-9) for v in taus)
    good = shift <= tau_bin and stable(t, taus, "velocity") and stable(t, taus, "angle")
    ok &= good
    lines.append(f"timing: worst shift error {shift * 1e9:.3f} ns (bin {tau_bin * 1e9:.3f} ns) "
                 f"{'ok' if good else 'miss'}")

    cfos = (0, 500, 1000, 2000, 5000)
    t = _impairment_sweep("cfo", cfos)
    shift = max(abs(t.mean(v, "blind_velocity_mean") - t.mean(0, "blind_velocity_mean") - v * DESK.wavelength)
                for v in cfos)
    good = shift <= v_bin and stable(t, cfos, "delay") and stable(t, cfos, "angle")
    ok &= good
    lines.append(f"cfo: worst shift error {shift:.3f} m/s (bin {v_bin:.3f} m/s) {'ok' if good else 'miss'}")

    phis = (0, 30, 60, 90, 120, 150, 180)
    t = _impairment_sweep("phase_offset_deg", phis)
    spread = 0.0
    for p in PARAMS:
        r = [t.mean(v, f"blind_{p}_rmse") for v in phis]
        spread = max(spread, max(r) / min(r) - 1)
    good = spread <= 0.1
    ok &= good
    lines.append(f"phase: RMSE spread {spread:.1e} {'ok' if good else 'miss'}")
    record(9, ok, "; ".join(lines))
    assert ok


def test_c10_oracles():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((8, 8, 4)) + 1j * rng.standard_normal((8, 8, 4))
    sizes = (16, 12, 8)
    spec = hos_periodogram(z, EstimatorConfig(sizes)).values
    k, n, m = np.meshgrid(*[np.arange(s) for s in z.shape], indexing="ij")
    direct = np.empty(sizes, complex)
    for u in range(sizes[0]):
        for v in range(sizes[1]):
            for w in range(sizes[2]):
                direct[u, v, w] = np.sum(z * np.exp(-2j * np.pi * (u * k / sizes[0] + v * n / sizes[1]
                                                                    + w * m / sizes[2])))
    e_fft = float(np.max(np.abs(spec - direct)))

    c = Constellation(rng.standard_normal(16) + 1j * rng.standard_normal(16))
    pts = rng.standard_normal(2000) + 1j * rng.standard_normal(2000)
    idx, _ = slice_points(c, pts)
    brute = [min(range(len(c)), key=lambda i: abs(p - c.points[i])) for p in pts]
    slicer_exact = bool(np.array_equal(idx, brute))

    A = rng.standard_normal((4, 3, 8, 3)) + 1j * rng.standard_normal((4, 3, 8, 3))
    r = rng.standard_normal((4, 3, 8)) + 1j * rng.standard_normal((4, 3, 8))
    ref = np.einsum("knpm,knm->knp", np.linalg.pinv(A), r)
    e_zf = float(np.max(np.abs(zf_batched(A, r).streams - ref)))
    srcs = [SourceParams(2e-8, 1e3, 0.1), SourceParams(6e-8, -2e3, -0.3, 0.8)]
    mix = MixingModel(detections_from_truth(srcs), OfdmConfig(4, 3, 8)).tensor()
    e_zf = max(e_zf, float(np.max(np.abs(zf_batched(mix, r).streams
                                         - np.einsum("knpm,knm->knp", np.linalg.pinv(mix), r)))))

    mets = c.metrics
    d_min = min(abs(c.points[i] - c.points[j]) for i in range(16) for j in range(i + 1, 16))
    d_rot = np.mean([min(abs(a - 1j * b) for b in c.points) for a in c.points])
    e_met = max(abs(mets.d_min - d_min), abs(mets.d_rot_quarter - d_rot),
                abs(rotation_separation(c, np.pi / 2) - d_rot))
    ok = e_fft <= 1e-6 and slicer_exact and e_zf <= 1e-9 and e_met <= 1e-12
    record(10, ok, f"periodogram {e_fft:.1e}, slicer exact {slicer_exact}, ZF {e_zf:.1e}, metrics {e_met:.1e}")
    assert ok
