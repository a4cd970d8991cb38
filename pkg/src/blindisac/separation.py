"""
Zero-forcing stream separation and blind constellation fitting.

Each accepted detection defines one column of the per-bin mixing matrix
``A[k, n] = S @ diag(alpha * phi_tf[k, n])`` where ``S`` holds the steering
vectors. Because the time-frequency factor is a unit-modulus diagonal, the
pseudoinverse factorizes as ``diag(1 / (alpha * phi_tf)) @ pinv(S)`` and
the condition number is the same at every bin; :func:`zf_batched` keeps the
generic per-bin path for arbitrary mixing tensors.

After ZF every stream still carries an unknown complex scale
``beta_p`` (quadrant ambiguity of the gain plus estimation error) and the
streams may be permuted relative to the source labels. :func:`fit_stream`
removes the scale by minimum-residual fitting to the alphabet and
:func:`resolve_permutation` picks the stream-to-label map with the lowest
total residual. The permutation maps stream index to source label.
"""

from __future__ import annotations

import itertools
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import SCHEMA_VERSION, Constellation, OfdmConfig, rotation_separation, slice_points
from .hos import DetectedSource, EstimateReport
from .waveform import ReceivedTensor, steering_vector

log = logging.getLogger(__name__)

MAX_EXHAUSTIVE = 6
COND_LIMIT = 1e10


class AmbiguityWarning(UserWarning):
    """The alphabet is pi/2 rotation symmetric; the quadrant cannot be resolved."""


class RankDeficiencyError(RuntimeError):
    """Every bin of the mixing matrix is numerically rank deficient."""


def _detections(det) -> list:
    return list(det.detections) if isinstance(det, EstimateReport) else list(det)


@dataclass(frozen=True)
class MixingModel:
    detections: tuple
    config: OfdmConfig

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(_detections(self.detections)))
        if not self.detections:
            raise ValueError("no detections to build a mixing model from")
        if len(self.detections) > self.config.num_antennas:
            raise ValueError(f"{len(self.detections)} sources exceed {self.config.num_antennas} antennas")

    @property
    def num_streams(self) -> int:
        return len(self.detections)

    def gains(self) -> np.ndarray:
        return np.array([d.gain for d in self.detections], dtype=complex)

    def steering(self) -> np.ndarray:
        """``M x P`` steering matrix."""
        return np.stack([steering_vector(self.config, d.angle) for d in self.detections], axis=1)

    def tf_phase(self, k, n) -> np.ndarray:
        """``phi_tf`` with broadcast shape ``(..., P)``."""
        cfg = self.config
        k = np.asarray(k)[..., None]
        n = np.asarray(n)[..., None]
        tau = np.array([d.delay for d in self.detections])
        nu = np.array([d.doppler for d in self.detections])
        return (np.exp(-2j * np.pi * k * cfg.subcarrier_spacing * tau)
                * np.exp(2j * np.pi * n * cfg.symbol_duration * nu))

    def matrix(self, k: int, n: int) -> np.ndarray:
        return self.steering() * (self.gains() * self.tf_phase(k, n))[None, :]

    def tensor(self) -> np.ndarray:
        """Mixing matrices of every bin, shape ``(K, N_sym, M, P)``."""
        K, N, _ = self.config.shape
        diag = self.gains() * self.tf_phase(np.arange(K)[:, None], np.arange(N)[None, :])
        return self.steering()[None, None] * diag[:, :, None, :]


def build_mixing(det, cfg: OfdmConfig, k: int, n: int) -> np.ndarray:
    """``M x P`` mixing matrix at bin ``(k, n)``."""
    return MixingModel(det, cfg).matrix(k, n)


@dataclass(eq=False)
class Separation:
    streams: np.ndarray
    valid: np.ndarray
    condition: np.ndarray

    @property
    def num_streams(self) -> int:
        return self.streams.shape[-1]


def zf_batched(mixing: np.ndarray, data: np.ndarray, cond_limit: float = COND_LIMIT) -> Separation:
    """Per-bin least squares ``x = pinv(A) r`` for ``A`` of shape ``(..., M, P)``.

    Bins whose condition number exceeds ``cond_limit`` are zeroed and marked
    invalid.
    """
    u, s, vh = np.linalg.svd(mixing, full_matrices=False)
    smax, smin = s[..., 0], s[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(smin > 0, smax / smin, np.inf)
    valid = cond <= cond_limit
    inv_s = np.where(valid[..., None], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    uhr = np.einsum("...mp,...m->...p", u.conj(), data)
    x = np.einsum("...qp,...q->...p", vh.conj(), inv_s * uhr)
    return Separation(x, valid, cond)


def zf_separate(y: ReceivedTensor, det, cond_limit: float = COND_LIMIT) -> Separation:
    """Zero-forcing separation into ``P`` streams of shape ``(K, N_sym)``.

    Raises
    ------
    RankDeficiencyError
        If no bin is well conditioned.
    """
    model = MixingModel(det, y.config)
    K, N, _ = y.config.shape
    steer = model.steering()
    gains = model.gains()
    cond_s = np.linalg.cond(steer * np.abs(gains)[None, :]) if np.all(gains != 0) else np.inf
    if not cond_s <= cond_limit:
        raise RankDeficiencyError(f"mixing matrix condition number {cond_s:.3g} above {cond_limit:g}")
    pinv = np.linalg.pinv(steer)
    spatial = np.einsum("pm,knm->knp", pinv, y.data)
    diag = gains * model.tf_phase(np.arange(K)[:, None], np.arange(N)[None, :])
    return Separation(spatial / diag, np.ones((K, N), dtype=bool), np.full((K, N), cond_s))


@dataclass(frozen=True)
class FitConfig:
    coarse_phase_points: int = 64
    dd_iterations: int = 5
    regularizer: float = 1e-12

    def __post_init__(self):
        if self.coarse_phase_points < 1 or self.dd_iterations < 1 or not self.regularizer > 0:
            raise ValueError("fit settings must be positive")


@dataclass(frozen=True, eq=False)
class StreamFit:
    beta: complex
    indices: np.ndarray
    residual: float
    history: tuple = ()
    degenerate: bool = False


def _residual(x, beta, pts) -> float:
    return float(np.sum(np.abs(x - beta * pts) ** 2))


def fit_stream(samples, c: Constellation, fit: FitConfig | None = None, warn: bool = True) -> StreamFit:
    """Scale/rotation fit of one stream to the alphabet ``c``.

    A coarse phase scan at moment-matched magnitude initializes ``beta``;
    decision-directed rounds then alternate slicing ``x / beta`` with the
    least-squares update of ``beta``. ``history`` lists the residual
    ``sum |x - beta X|^2`` after each slicing step and never increases.
    """
    fit = fit or FitConfig()
    x = np.asarray(samples, dtype=complex).ravel()
    if x.size == 0:
        raise ValueError("need at least one sample")
    if warn and rotation_separation(c, np.pi / 2) < 1e-12:
        warnings.warn("constellation is pi/2 rotation symmetric: quadrant ambiguity is unresolvable",
                      AmbiguityWarning, stacklevel=2)
    mean_abs = float(np.mean(np.abs(x)))
    if mean_abs == 0:
        return StreamFit(0j, np.zeros(x.size, dtype=np.int64), 0.0, (0.0,), True)
    mag = mean_abs / float(np.sum(c.probabilities * np.abs(c.points)))

    best = None
    for phi in 2 * np.pi * np.arange(fit.coarse_phase_points) / fit.coarse_phase_points:
        beta = mag * np.exp(1j * phi)
        idx, pts = slice_points(c, x / beta)
        j = _residual(x, beta, pts)
        if best is None or j < best[0]:
            best = (j, beta, idx, pts)
    j, beta, idx, pts = best
    history = [j]
    for _ in range(fit.dd_iterations):
        beta = complex(np.sum(x * pts.conj()) / (np.sum(np.abs(pts) ** 2) + fit.regularizer))
        if beta == 0:
            break
        idx, pts = slice_points(c, x / beta)
        history.append(_residual(x, beta, pts))
    return StreamFit(beta, idx, history[-1], tuple(history))


@dataclass(eq=False)
class DemodResult:
    """Blind demodulation output.

    ``permutation[s]`` is the source label assigned to stream ``s``.
    ``symbols`` and ``indices`` have shape ``(K, N_sym, P)`` in stream order;
    invalid bins carry index -1 and symbol 0.
    """

    betas: np.ndarray
    permutation: tuple
    indices: np.ndarray
    symbols: np.ndarray
    residuals: np.ndarray
    valid: np.ndarray
    aligned: np.ndarray
    ser_per_stream: np.ndarray | None = None
    truth_match: tuple | None = None
    warnings: list = field(default_factory=list)


def _permutation_search(cost: np.ndarray):
    P = cost.shape[0]
    if P <= MAX_EXHAUSTIVE:
        best, best_j = None, np.inf
        for perm in itertools.permutations(range(P)):
            j = sum(cost[s, perm[s]] for s in range(P))
            if best is None or j < best_j:
                best, best_j = perm, j
        return tuple(int(p) for p in best), False
    rows, cols = linear_sum_assignment(cost)
    perm = [0] * P
    for r, c_ in zip(rows, cols):
        perm[r] = int(c_)
    return tuple(perm), True


def resolve_permutation(separation: Separation | np.ndarray, constellations,
                        fit: FitConfig | None = None) -> DemodResult:
    """Fit every stream against every label and choose the best assignment.

    Parameters
    ----------
    separation : Separation or ndarray
        ZF output; a bare ``(K, N_sym, P)`` array counts as all valid.
    constellations : Constellation or sequence of Constellation
        Alphabet of each source label. A single alphabet is shared.

    Notes
    -----
    Exhaustive over all ``P!`` permutations up to ``P = 6``; beyond that the
    assignment problem on the same cost matrix is solved directly and a
    warning is issued. Ties keep the lexicographically first permutation.
    """
    fit = fit or FitConfig()
    if not isinstance(separation, Separation):
        arr = np.asarray(separation)
        separation = Separation(arr, np.ones(arr.shape[:2], dtype=bool), np.ones(arr.shape[:2]))
    streams, valid = separation.streams, separation.valid
    P = streams.shape[-1]
    if P < 1:
        raise ValueError("no streams to demodulate")
    labels = [constellations] * P if isinstance(constellations, Constellation) else list(constellations)
    if len(labels) != P:
        raise ValueError(f"{len(labels)} alphabets for {P} streams")
    notes = []
    if any(rotation_separation(c, np.pi / 2) < 1e-12 for c in labels):
        msg = "pi/2 rotation symmetric alphabet: quadrant ambiguity is unresolvable"
        warnings.warn(msg, AmbiguityWarning, stacklevel=2)
        notes.append(msg)

    samples = [streams[..., s][valid] for s in range(P)]
    fits = {}
    distinct = {id(c) for c in labels}
    cost = np.zeros((P, P))
    for s in range(P):
        cache = {}
        for lab in range(P):
            key = id(labels[lab])
            if key not in cache:
                cache[key] = fit_stream(samples[s], labels[lab], fit, warn=False)
            fits[s, lab] = cache[key]
            cost[s, lab] = cache[key].residual
    perm, greedy = _permutation_search(cost) if len(distinct) > 1 else (tuple(range(P)), False)
    if greedy:
        msg = f"{P} streams: permutation solved by assignment instead of exhaustive search"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)

    shape = streams.shape
    indices = np.full(shape, -1, dtype=np.int64)
    symbols = np.zeros(shape, dtype=complex)
    aligned = np.zeros(shape, dtype=complex)
    betas = np.zeros(P, dtype=complex)
    residuals = np.zeros(P)
    for s in range(P):
        f = fits[s, perm[s]]
        c = labels[perm[s]]
        betas[s], residuals[s] = f.beta, f.residual
        idx_s = indices[..., s]
        idx_s[valid] = f.indices
        sym_s = symbols[..., s]
        sym_s[valid] = c.points[f.indices]
        if f.beta != 0:
            aligned[..., s] = streams[..., s] / f.beta
        if f.degenerate:
            notes.append(f"stream {s} is all zero")
    return DemodResult(betas, perm, indices, symbols, residuals, valid, aligned, warnings=notes)


def ser(sliced: np.ndarray, truth: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Symbol error rate per stream (last axis) between two symbol tensors.

    Bits are not modelled; this is the fraction of differing symbols.
    """
    a, b = np.asarray(sliced), np.asarray(truth)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    wrong = np.abs(a - b) > tol
    return wrong.reshape(-1, a.shape[-1]).mean(axis=0)


def match_to_truth(detections, sources, cfg: OfdmConfig) -> tuple:
    """Detection-to-source assignment minimising distance in resolution cells.

    Returns a tuple with the source index of each detection (``-1`` when
    there are more detections than sources).
    """
    dets = _detections(detections)
    if not dets or not sources:
        return tuple(-1 for _ in dets)
    K, N, M = cfg.shape
    cost = np.zeros((len(dets), len(sources)))
    for i, d in enumerate(dets):
        for j, s in enumerate(sources):
            cost[i, j] = (abs(d.delay - s.delay) * K * cfg.subcarrier_spacing
                          + abs(d.doppler - s.doppler) * N * cfg.symbol_duration
                          + abs(np.sin(d.angle) - np.sin(s.angle)) * M * cfg.antenna_spacing_ratio)
    rows, cols = linear_sum_assignment(cost)
    out = [-1] * len(dets)
    for r, c in zip(rows, cols):
        out[r] = int(c)
    return tuple(out)


def score_against_truth(result: DemodResult, truth_symbols: np.ndarray, match: tuple) -> np.ndarray:
    """SER of each stream against the truth source it was matched to."""
    out = np.full(result.symbols.shape[-1], np.nan)
    for s, j in enumerate(match):
        if j >= 0:
            out[s] = ser(result.symbols[..., s].ravel(), truth_symbols[..., j].ravel())[0]
    result.ser_per_stream = out
    result.truth_match = tuple(match)
    return out


def demodulate(y: ReceivedTensor, det, constellations, fit: FitConfig | None = None) -> DemodResult:
    """ZF separation followed by permutation-resolved fitting."""
    return resolve_permutation(zf_separate(y, det), constellations, fit)


def demod_report(result: DemodResult) -> dict:
    streams = []
    for s in range(result.betas.size):
        entry = {"stream": s, "label": result.permutation[s],
                 "beta": [result.betas[s].real, result.betas[s].imag],
                 "residual": float(result.residuals[s])}
        if result.ser_per_stream is not None:
            entry["ser"] = float(result.ser_per_stream[s])
        if result.truth_match is not None:
            entry["matched_source"] = result.truth_match[s]
        streams.append(entry)
    return {"schema_version": SCHEMA_VERSION, "permutation": list(result.permutation),
            "streams": streams, "invalid_bins": int((~result.valid).sum()),
            "warnings": list(result.warnings)}


def save_demod_report(result: DemodResult, path, symbols_path=None) -> None:
    """Write the JSON report and, optionally, sliced indices as CSV.

    The CSV has columns ``k, n, stream_0, ...`` in row-major order over
    ``k`` then ``n``.
    """
    Path(path).write_text(json.dumps(demod_report(result), indent=2))
    if symbols_path is not None:
        K, N, P = result.indices.shape
        kk, nn = np.meshgrid(np.arange(K), np.arange(N), indexing="ij")
        table = np.column_stack([kk.ravel(), nn.ravel(), result.indices.reshape(K * N, P)])
        header = ",".join(["k", "n"] + [f"stream_{s}" for s in range(P)])
        np.savetxt(symbols_path, table, fmt="%d", delimiter=",", header=header, comments="")


def detections_from_truth(sources, cfg: OfdmConfig | None = None) -> list:
    """Perfect-estimate detections built from ground truth (for testing pipelines)."""
    return [DetectedSource(delay=s.delay, doppler=s.doppler, angle=s.angle, gain=complex(s.gain),
                           peak_power=np.inf, peak_to_background=np.inf, refined_bins=(0.0, 0.0, 0.0))
            for s in sources]
