"""
Cramér-Rao bounds for single-source delay/Doppler/angle estimation and the
non-blind baselines they are compared against.

The closed forms assume constant-modulus known symbols and centred grid
indices, under which the Fisher information is diagonal in
``(delay, doppler, angle)``. :func:`numerical_fim_oracle` rebuilds the same
matrix by finite differences of the noiseless mean and serves as an
independent check.

Angle bounds keep the ``cos(theta)**2`` factor and are in rad^2; use
``CrlbReport.crlb_angle_deg2`` for degrees. Doppler bounds are reported both
in Hz^2 and, scaled by ``wavelength**2``, as velocity in (m/s)^2.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .core import OfdmConfig, SourceParams
from .hos import EstimateReport, EstimatorConfig, detect_all
from .waveform import ReceivedTensor


@dataclass(frozen=True)
class CrlbReport:
    crlb_delay: float
    crlb_doppler: float
    crlb_velocity: float
    crlb_angle: float
    beta_f2: float
    beta_t2: float
    beta_s2: float
    processing_gain: int
    snr: float
    stochastic_factor: float

    @property
    def crlb_angle_deg2(self) -> float:
        return self.crlb_angle * (180.0 / np.pi) ** 2

    def rmse(self) -> dict:
        """Square roots of the bounds: seconds, m/s, degrees."""
        return {"delay": np.sqrt(self.crlb_delay), "velocity": np.sqrt(self.crlb_velocity),
                "angle_deg": np.sqrt(self.crlb_angle_deg2)}


def _mean_square_bandwidths(cfg: OfdmConfig):
    K, N, M = cfg.shape
    beta_f2 = (2 * np.pi * cfg.subcarrier_spacing) ** 2 * (K**2 - 1) / 12
    beta_t2 = (2 * np.pi * cfg.symbol_duration) ** 2 * (N**2 - 1) / 12
    beta_s2 = (2 * np.pi * cfg.antenna_spacing_ratio) ** 2 * (M**2 - 1) / 12
    return beta_f2, beta_t2, beta_s2


def _inv(x: float) -> float:
    return np.inf if x == 0 else 1.0 / x


def stochastic_factor(cfg: OfdmConfig, snr: float) -> float:
    """``SNR_eff / (1 + SNR_eff)`` with ``SNR_eff = SNR * K * N_sym * M``."""
    snr_eff = snr * cfg.num_samples
    return snr_eff / (1.0 + snr_eff)


def crlb_data_aided(cfg: OfdmConfig, snr: float, theta: float = 0.0) -> CrlbReport:
    """Data-aided CRLBs for one source at linear ``snr`` and angle ``theta``.

    An axis of length one carries no information; its bound is ``inf``.
    """
    if not snr > 0:
        raise ValueError("snr must be positive")
    bf, bt, bs = _mean_square_bandwidths(cfg)
    g = cfg.num_samples
    cos2 = np.cos(theta) ** 2
    crlb_doppler = _inv(2 * snr * g * bt)
    return CrlbReport(
        crlb_delay=_inv(2 * snr * g * bf),
        crlb_doppler=crlb_doppler,
        crlb_velocity=crlb_doppler * cfg.wavelength**2,
        crlb_angle=_inv(2 * snr * g * bs * cos2) if cos2 > 1e-24 else np.inf,
        beta_f2=bf, beta_t2=bt, beta_s2=bs, processing_gain=g, snr=snr,
        stochastic_factor=stochastic_factor(cfg, snr))


def crlb_stochastic(cfg: OfdmConfig, snr: float, theta: float = 0.0) -> CrlbReport:
    """Gaussian-symbol (blind) bounds: data-aided bounds divided by the factor."""
    da = crlb_data_aided(cfg, snr, theta)
    f = da.stochastic_factor
    return replace(da, crlb_delay=da.crlb_delay / f, crlb_doppler=da.crlb_doppler / f,
                   crlb_velocity=da.crlb_velocity / f, crlb_angle=da.crlb_angle / f)


def _mean_vector(cfg: OfdmConfig, params, symbols, gain) -> np.ndarray:
    tau, nu, theta = params
    K, N, M = cfg.shape
    k = np.arange(K) - (K - 1) / 2
    n = np.arange(N) - (N - 1) / 2
    m = np.arange(M) - (M - 1) / 2
    f = np.exp(-2j * np.pi * k * cfg.subcarrier_spacing * tau)
    t = np.exp(2j * np.pi * n * cfg.symbol_duration * nu)
    s = np.exp(-2j * np.pi * cfg.antenna_spacing_ratio * m * np.sin(theta))
    return gain * symbols[:, :, None] * f[:, None, None] * t[None, :, None] * s[None, None, :]


def numerical_fim_oracle(cfg: OfdmConfig, xi: SourceParams, snr: float, seed: int = 0,
                         rel_step: float = 1e-3, richardson_tol: float = 1e-3) -> np.ndarray:
    """Finite-difference Fisher information for ``(delay, doppler, angle)``.

    Builds ``mu = alpha * s(xi) * x`` on centred indices with random
    unit-modulus symbols, differentiates it by central differences and
    assembles ``J_ij = (2 / sigma_n^2) * Re(dmu_i^H dmu_j)``. Each derivative is
    also taken with half the step; disagreement beyond ``richardson_tol``
    (relative) raises ``RuntimeError``.
    """
    rng = np.random.default_rng(seed)
    K, N, M = cfg.shape
    symbols = np.exp(1j * np.pi / 2 * rng.integers(0, 4, size=(K, N)) + 1j * np.pi / 4)
    sigma2 = abs(xi.gain) ** 2 / snr
    base = np.array([xi.delay, xi.doppler, xi.angle], dtype=float)
    # steps relative to each axis' resolution so the phase change is ~rel_step rad
    scales = np.array([1.0 / (max(K, 2) * cfg.subcarrier_spacing),
                       1.0 / (max(N, 2) * cfg.symbol_duration),
                       1.0 / max(M, 2)])

    def deriv(i, h):
        up, dn = base.copy(), base.copy()
        up[i] += h
        dn[i] -= h
        return (_mean_vector(cfg, up, symbols, xi.gain)
                - _mean_vector(cfg, dn, symbols, xi.gain)).ravel() / (2 * h)

    grads = []
    for i in range(3):
        h = rel_step * scales[i]
        d1, d2 = deriv(i, h), deriv(i, h / 2)
        # Richardson: O(h^2) error shrinks 4x when h halves
        d = (4 * d2 - d1) / 3
        norm = np.linalg.norm(d)
        if norm > 0 and np.linalg.norm(d1 - d2) / norm > richardson_tol:
            raise RuntimeError(f"finite-difference step unstable on parameter {i}")
        grads.append(d)
    G = np.array(grads)
    return (2.0 / sigma2) * np.real(G.conj() @ G.T)


def closed_form_fim(cfg: OfdmConfig, snr: float, theta: float) -> np.ndarray:
    r = crlb_data_aided(cfg, snr, theta)
    return np.diag([_inv(r.crlb_delay), _inv(r.crlb_doppler), _inv(r.crlb_angle)])


def cost_of_blindness_variance(noise_variance: float, samples: int = 200_000, seed: int = 0) -> float:
    """Empirical variance of ``(S + W)**4 - S**4`` for unit-modulus ``S``.

    For small noise this approaches ``16 * noise_variance``.
    """
    rng = np.random.default_rng(seed)
    s = np.exp(2j * np.pi * rng.random(samples))
    w = np.sqrt(noise_variance / 2) * (rng.standard_normal(samples) + 1j * rng.standard_normal(samples))
    d = (s + w) ** 4 - s**4
    return float(np.mean(np.abs(d - d.mean()) ** 2))


# -- baselines ----------------------------------------------------------------

def first_order_config(cfg: OfdmConfig, est: EstimatorConfig | None = None, **kw) -> EstimatorConfig:
    est = est or EstimatorConfig.for_grid(cfg)
    kw.setdefault("max_sources", 1)
    return est.replace(order=1, fourth_moment=1.0, **kw)


def remove_modulation(y: ReceivedTensor, symbols: np.ndarray, bins=None) -> ReceivedTensor:
    """Divide out known symbols; bins with zero symbols (or outside ``bins``) become 0."""
    x = np.asarray(symbols)
    keep = x != 0
    if bins is not None:
        keep = keep & bins
    ratio = np.zeros(x.shape, dtype=complex)
    ratio[keep] = 1.0 / x[keep]
    return y.with_data(y.data * ratio[:, :, None])


def data_aided_estimate(y: ReceivedTensor, symbols: np.ndarray, est: EstimatorConfig | None = None) -> EstimateReport:
    """First-order periodogram on ``Y / X`` for each source hypothesis.

    ``symbols`` has shape ``(K, N_sym)`` or ``(K, N_sym, P)``. One detection
    (the strongest peak) is kept per hypothesis, in source order.
    """
    x = np.asarray(symbols)
    if x.ndim == 2:
        x = x[:, :, None]
    est = first_order_config(y.config, est)
    out = EstimateReport(notes={"estimator": "data_aided"})
    for p in range(x.shape[2]):
        rep = detect_all(remove_modulation(y, x[:, :, p]), est)
        out.detections.extend(rep.detections[:1])
        out.iterations.extend(rep.iterations)
        out.notes.update(rep.notes)
    return out


def comb_pilot_mask(num_subcarriers: int, num_pilots: int) -> tuple[np.ndarray, int]:
    """Boolean subcarrier mask of an evenly spaced comb and its spacing."""
    if num_pilots < 2:
        raise ValueError("need at least two pilot subcarriers")
    if num_pilots > num_subcarriers:
        raise ValueError("more pilots than subcarriers")
    spacing = num_subcarriers // num_pilots
    mask = np.zeros(num_subcarriers, dtype=bool)
    mask[np.arange(num_pilots) * spacing] = True
    return mask, spacing


def pilot_aided_estimate(y: ReceivedTensor, pilot_mask: np.ndarray, pilot_symbols: np.ndarray,
                         est: EstimatorConfig | None = None, spacing: int | None = None) -> EstimateReport:
    """First-order periodogram on the comb pilot subgrid, zero-filled elsewhere.

    Comb spacing ``D`` makes the delay axis periodic with period
    ``1 / (D * subcarrier_spacing)``; the search is restricted to that
    interval and the report's ``notes['unambiguous_delay']`` records it.
    Sources further away alias into the interval.
    """
    cfg = y.config
    pilot_mask = np.asarray(pilot_mask, dtype=bool)
    if pilot_mask.sum() < 2:
        raise ValueError("need at least two pilot subcarriers")
    if spacing is None:
        pos = np.flatnonzero(pilot_mask)
        spacing = int(np.min(np.diff(pos)))
    x = np.asarray(pilot_symbols)
    if x.ndim == 3:
        x = x[:, :, 0]
    bins = np.broadcast_to(pilot_mask[:, None], x.shape)
    window = 1.0 / (spacing * cfg.subcarrier_spacing)
    est = first_order_config(cfg, est, delay_window=None if spacing == 1 else window)
    rep = detect_all(remove_modulation(y, x, bins), est)
    rep.notes.update({"estimator": "pilot_aided", "pilot_count": int(pilot_mask.sum()),
                      "pilot_spacing": spacing, "unambiguous_delay": window})
    return rep


def delay_is_unambiguous(delay: float, report: EstimateReport) -> bool:
    return 0.0 <= delay < report.notes.get("unambiguous_delay", np.inf)


def write_crlb_table(cfg: OfdmConfig, snr_db_list, theta: float, path) -> list[dict]:
    """CSV with columns snr_db, crlb_tau, crlb_v, crlb_theta, stochastic_factor."""
    rows = []
    for snr_db in snr_db_list:
        r = crlb_data_aided(cfg, 10 ** (snr_db / 10), theta)
        rows.append({"snr_db": snr_db, "crlb_tau": r.crlb_delay, "crlb_v": r.crlb_velocity,
                     "crlb_theta": r.crlb_angle, "stochastic_factor": r.stochastic_factor})
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else
                            ["snr_db", "crlb_tau", "crlb_v", "crlb_theta", "stochastic_factor"])
        wr.writeheader()
        for row in rows:
            wr.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    if any(np.isinf(r["crlb_theta"]) for r in rows):
        warnings.warn("angle bound is infinite (single antenna)", stacklevel=2)
    return rows
