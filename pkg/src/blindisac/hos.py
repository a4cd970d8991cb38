"""
Blind delay/Doppler/angle estimation from the fourth-order virtual tensor.

Raising every entry of the received cube to the fourth power removes the
unknown symbols in expectation (``E[X^4] = mu4``) and leaves, per source, a
separable 3D exponential whose frequencies are four times the physical
ones. A zero-padded 3D DFT turns each source into a spectral peak which is
enumerated greedily: CFAR gate, separable parabolic refinement, mapping
back to physical units, gain recovery, and masking of the accepted
mainlobe.

The same machinery runs with ``order=1`` on modulation-removed data for
the data- and pilot-aided baselines in :mod:`blindisac.bounds`.

Indices are 0-based throughout. Delay estimates live in
``[0, 1/(order * subcarrier_spacing))`` and Doppler estimates in the
symmetric interval ``[-1, 1) / (2 * order * symbol_duration)``; anything
outside folds back into those intervals.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .core import OfdmConfig
from .waveform import ReceivedTensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings of the periodogram peak enumerator.

    ``mask_radius``, ``guard_cells`` and ``training_cells`` are expressed in
    unpadded resolution cells and are scaled per axis by the zero-padding
    factor, so they follow the mainlobe width rather than the FFT bin size.
    Guard and training extents are per axis ``(delay, doppler, angle)``; the
    default trains over delay-Doppler at the peak's own angle bin because
    inter-source cross terms of ``Y**4`` are white over the TF grid but
    coherent across antennas, so their power sits in a few angle bins.
    """

    fft_sizes: tuple[int, int, int]
    mask_radius: float = 3.0
    threshold: float = 20.0
    max_sources: int = 8
    guard_cells: tuple = (2.0, 2.0, 0.0)
    training_cells: tuple = (5.0, 5.0, 0.0)
    fourth_moment: complex = -1.0
    order: int = 4
    gain_at_refined: bool = True
    delay_window: float | None = None
    cancel_sidelobes: bool = True

    def __post_init__(self):
        if len(self.fft_sizes) != 3 or min(self.fft_sizes) < 1:
            raise ValueError("fft_sizes must be three positive integers")
        object.__setattr__(self, "fft_sizes", tuple(int(n) for n in self.fft_sizes))
        if not self.threshold > 1:
            raise ValueError("threshold must exceed 1")
        if not self.mask_radius >= 1:
            raise ValueError("mask_radius must be >= 1")
        if self.fourth_moment == 0:
            raise ValueError("fourth moment of the constellation is zero")
        if self.order not in (1, 4):
            raise ValueError("order must be 1 or 4")
        for name in ("guard_cells", "training_cells"):
            v = getattr(self, name)
            v = (float(v),) * 3 if np.isscalar(v) else tuple(float(x) for x in v)
            if len(v) != 3 or min(v) < 0:
                raise ValueError(f"{name} must be one or three nonnegative numbers")
            object.__setattr__(self, name, v)
        if not any(t > g for t, g in zip(self.training_cells, self.guard_cells)):
            raise ValueError("training region must extend beyond the guard region")

    @classmethod
    def for_grid(cls, cfg: OfdmConfig, pad: int | tuple | str = "auto", **kw) -> "EstimatorConfig":
        """FFT sizes ``pad`` times the grid; ``"auto"`` picks 8, 4 or 2 to fit memory."""
        if isinstance(pad, str):
            if pad != "auto":
                raise ValueError(f"unknown pad {pad!r}")
            pad = auto_pad(cfg.shape)
        pads = (pad,) * 3 if np.isscalar(pad) else tuple(pad)
        sizes = tuple(int(n * p) for n, p in zip(cfg.shape, pads))
        return cls(fft_sizes=sizes, **kw)

    def check_grid(self, shape) -> None:
        if any(nf < n for nf, n in zip(self.fft_sizes, shape)):
            raise ValueError(f"FFT sizes {self.fft_sizes} smaller than grid {tuple(shape)}")

    def pad_factors(self, shape) -> np.ndarray:
        return np.asarray(self.fft_sizes, float) / np.asarray(shape, float)

    def replace(self, **changes) -> "EstimatorConfig":
        from dataclasses import replace

        return replace(self, **changes)


MAX_FFT_CELLS = 2**26


def auto_pad(shape, max_cells: int = MAX_FFT_CELLS) -> int:
    """Largest padding factor in (8, 4, 2, 1) whose spectrum has at most ``max_cells`` bins."""
    n = int(np.prod(shape))
    for pad in (8, 4, 2):
        if n * pad**3 <= max_cells:
            return pad
    return 1


@dataclass(eq=False)
class HosSpectrum:
    """Complex spectrum plus the residual mask (True = excluded)."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise ValueError("spectrum and mask shapes differ")

    def residual_power(self) -> np.ndarray:
        power = np.abs(self.values) ** 2
        power[self.mask] = 0.0
        return power


@dataclass(frozen=True)
class DetectedSource:
    delay: float
    doppler: float
    angle: float
    gain: complex
    peak_power: float
    peak_to_background: float
    refined_bins: tuple[float, float, float]
    peak_bin: tuple[int, int, int] = (0, 0, 0)
    flags: tuple = ()

    def velocity(self, cfg: OfdmConfig) -> float:
        return self.doppler * cfg.wavelength


@dataclass
class EstimateReport:
    detections: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def num_detected(self) -> int:
        return len(self.detections)


def fourth_power_tensor(y: ReceivedTensor) -> ReceivedTensor:
    return y.with_data(y.data**4)


def hos_periodogram(z: ReceivedTensor | np.ndarray, cfg: EstimatorConfig, workers: int = -1) -> HosSpectrum:
    """Zero-padded 3D DFT ``S[u,v,w] = sum Z[k,n,m] exp(-2j*pi*(uk/Nt + vn/Nv + wm/Na))``.

    Runs as three pruned 1D passes so the padding zeros of earlier axes are
    never transformed.
    """
    data = z.data if isinstance(z, ReceivedTensor) else np.asarray(z)
    cfg.check_grid(data.shape)
    n_tau, n_nu, n_theta = cfg.fft_sizes
    out = sfft.fft(data, n=n_theta, axis=2, workers=workers)
    out = sfft.fft(out, n=n_nu, axis=1, workers=workers, overwrite_x=True)
    out = sfft.fft(out, n=n_tau, axis=0, workers=workers, overwrite_x=True)
    return HosSpectrum(out, np.zeros(out.shape, dtype=bool))


def parabolic_refine(y_minus: float, y0: float, y_plus: float) -> tuple[float, bool]:
    """Vertex offset of the parabola through three equally spaced samples.

    Returns ``(delta, ok)`` with ``delta`` clamped to [-0.5, 0.5]. A flat
    triple (zero curvature) gives ``(0.0, False)``.
    """
    denom = y_minus - 2.0 * y0 + y_plus
    if denom == 0 or not np.isfinite(denom):
        return 0.0, False
    delta = 0.5 * (y_minus - y_plus) / denom
    return float(np.clip(delta, -0.5, 0.5)), True


def _signed(bin_: float, n: int) -> float:
    b = bin_ % n
    return b - n if b >= n / 2 else b


def invert_mapping(u: float, v: float, w: float, cfg: OfdmConfig, est: EstimatorConfig):
    """Refined FFT coordinates to ``(delay, doppler, angle)``.

    Returns ``None`` for the angle when the arcsine argument leaves [-1, 1]
    (virtual spatial aliasing).
    """
    n_tau, n_nu, n_theta = est.fft_sizes
    q = est.order
    delay_period = 1.0 / (q * cfg.subcarrier_spacing)
    delay = ((-u / n_tau) % 1.0) * delay_period
    if delay >= delay_period:  # float rounding at the wrap point
        delay = 0.0
    doppler = _signed(v, n_nu) / (q * n_nu * cfg.symbol_duration)
    arg = -_signed(w, n_theta) / (q * n_theta * cfg.antenna_spacing_ratio)
    angle = float(np.arcsin(arg)) if abs(arg) <= 1.0 else None
    return float(delay) + 0.0, float(doppler) + 0.0, angle


def estimate_gain(peak_value: complex, fourth_moment: complex, g_fft: int, order: int = 4) -> complex:
    """Principal root of ``peak / (moment * G)``.

    For ``order=4`` the result carries the quadrant ambiguity
    ``alpha * exp(1j*k*pi/2)``.
    """
    if peak_value == 0:
        return 0j
    ratio = complex(peak_value) / (complex(fourth_moment) * g_fft)
    return complex(abs(ratio) ** (1.0 / order) * np.exp(1j * np.angle(ratio) / order))


def dft_at(z: np.ndarray, coords, fft_sizes) -> complex:
    """Single-point DFT of ``z`` at fractional bin coordinates."""
    kernels = [np.exp(-2j * np.pi * c * np.arange(n) / nf)
               for c, n, nf in zip(coords, z.shape, fft_sizes)]
    return complex(np.einsum("k,n,m,knm->", *kernels, z, optimize=True))


def dirichlet(x0: float, length: int, nfft: int) -> np.ndarray:
    """``sum_k exp(2j*pi*k*(x0 - u)/nfft)`` for every bin ``u``: the padded
    DFT of a unit tone at fractional bin ``x0`` sampled ``length`` times."""
    k = np.arange(length)[:, None]
    u = np.arange(nfft)[None, :]
    return np.exp(2j * np.pi * k * (x0 - u) / nfft).sum(axis=0)


def tone_at(coords, amplitude: complex, shape, fft_sizes, at) -> complex:
    """Value at fractional bins ``at`` of the padded DFT of a tone with peak ``amplitude`` at ``coords``."""
    out = complex(amplitude) / float(np.prod(shape))
    for c, a, n, nf in zip(coords, at, shape, fft_sizes):
        out *= complex(np.exp(2j * np.pi * np.arange(n) * (c - a) / nf).sum())
    return out


def cancel_tone(values: np.ndarray, coords, amplitude: complex, shape) -> None:
    """Subtract a tone's full footprint (mainlobe and sidelobes) in place."""
    d = [dirichlet(c, n, nf) for c, n, nf in zip(coords, shape, values.shape)]
    scale = complex(amplitude) / float(np.prod(shape))
    values -= scale * d[0][:, None, None] * (d[1][:, None] * d[2][None, :])[None]


def _wrapped(center: int, half: int, n: int) -> np.ndarray:
    half = min(half, (n - 1) // 2)
    return (center + np.arange(-half, half + 1)) % n, half


def local_background(residual: np.ndarray, mask: np.ndarray, peak, guard, train) -> float:
    """Mean residual power over unmasked training cells of a cube shell."""
    idx, offs = [], []
    for c, g, t, n in zip(peak, guard, train, residual.shape):
        i, h = _wrapped(c, t, n)
        idx.append(i)
        offs.append((np.arange(-h, h + 1), min(g, h)))
    block = residual[np.ix_(*idx)]
    blocked = mask[np.ix_(*idx)]
    inner = np.ones(block.shape, dtype=bool)
    for ax, (o, g) in enumerate(offs):
        shape = [1, 1, 1]
        shape[ax] = o.size
        inner = inner & (np.abs(o) <= g).reshape(shape)
    cells = ~inner & ~blocked
    if not cells.any():
        return 0.0
    return float(block[cells].mean())


def mask_ball(mask: np.ndarray, residual: np.ndarray, peak, radii) -> None:
    """Zero the anisotropic ball ``sum((d_i / r_i)^2) < 1`` around ``peak``."""
    idx, dist = [], []
    for c, r, n in zip(peak, radii, mask.shape):
        h = int(np.ceil(r))
        i, h = _wrapped(c, h, n)
        idx.append(i)
        dist.append(np.arange(-h, h + 1) / r)
    d2 = (dist[0][:, None, None] ** 2 + dist[1][None, :, None] ** 2 + dist[2][None, None, :] ** 2)
    inside = d2 < 1.0
    sel = np.ix_(*idx)
    sub = mask[sel]
    sub |= inside
    mask[sel] = sub
    res = residual[sel]
    res[inside] = 0.0
    residual[sel] = res


FLOOR_ELEVATION = 2.0


def slab_elevation(residual: np.ndarray, mask: np.ndarray, angle_bin: int,
                   skipped: np.ndarray | None = None) -> float:
    """Mean unmasked residual of one angle bin over the mean of all bins.

    Angle bins flagged in ``skipped`` are left out of the overall mean.
    """
    keep = ~mask
    if skipped is not None:
        keep = keep & ~skipped[None, None, :]
    total = residual.sum() / max(int(keep.sum()), 1)
    slab = residual[:, :, angle_bin].sum() / max(int(keep[:, :, angle_bin].sum()), 1)
    return float(slab / total) if total > 0 else 0.0


def _delay_window_mask(shape, cfg: OfdmConfig, est: EstimatorConfig) -> np.ndarray | None:
    if est.delay_window is None:
        return None
    n_tau = est.fft_sizes[0]
    u = np.arange(n_tau)
    delays = ((-u / n_tau) % 1.0) / (est.order * cfg.subcarrier_spacing)
    outside = delays >= est.delay_window
    return np.broadcast_to(outside[:, None, None], shape)


def detect_all(y: ReceivedTensor, est: EstimatorConfig, spectrum: HosSpectrum | None = None,
               z: np.ndarray | None = None) -> EstimateReport:
    """Iterative peak enumeration with CFAR stopping.

    Parameters
    ----------
    y : ReceivedTensor
        Received cube (raised to ``est.order`` internally).
    est : EstimatorConfig
    spectrum, z : optional
        Precomputed spectrum / powered tensor, e.g. to reuse one FFT.

    Returns
    -------
    EstimateReport
        Detections in order of acceptance (descending residual power).
        Per-pass diagnostics are in ``iterations``.

    Notes
    -----
    A candidate failing the CFAR test normally ends the search. Cross terms
    between sources of ``Y**4`` are white over delay-Doppler but coherent
    across antennas, so they raise whole angle bins; the largest residual
    can then be a spike of such a floor while a weaker source elsewhere
    would still pass. If the failing candidate's angle bin has a mean
    residual above ``FLOOR_ELEVATION`` times the overall mean, the whole
    bin is left out of the remaining search and the search goes on. White
    noise never triggers this.

    With ``est.cancel_sidelobes`` every accepted or alias-rejected peak is
    removed coherently from ``spectrum.values`` (modified in place) before
    the next pass, so strong sources do not leave sidelobe ridges that the
    CFAR test would accept. The mask ball is still applied on top.
    """
    cfg = y.config
    shape = cfg.shape
    est.check_grid(shape)
    if z is None:
        z = y.data**est.order if est.order != 1 else y.data
    if spectrum is None:
        spectrum = hos_periodogram(z, est)
    pads = est.pad_factors(shape)
    guard = np.round(np.asarray(est.guard_cells) * pads).astype(int)
    train = np.maximum(np.round(np.asarray(est.training_cells) * pads).astype(int), guard)
    radii = est.mask_radius * pads
    g_fft = int(np.prod(shape))

    window = _delay_window_mask(spectrum.values.shape, cfg, est)
    if window is not None:
        spectrum.mask |= window
    residual = spectrum.residual_power()
    report = EstimateReport(notes={
        "order": est.order,
        "delay_period": 1.0 / (est.order * cfg.subcarrier_spacing),
        "doppler_period": 1.0 / (est.order * cfg.symbol_duration),
        "unambiguous_delay": est.delay_window or 1.0 / (est.order * cfg.subcarrier_spacing),
    })
    n_fft = spectrum.values.shape
    rejected = 0
    tones = []  # (refined coords, amplitude) already removed from the spectrum
    skipped = np.zeros(n_fft[2], dtype=bool)  # angle bins given up as cross-term floor

    def leakage(at) -> complex:
        return sum((tone_at(c, a, shape, est.fft_sizes, at) for c, a in tones), 0j)
    while report.num_detected < est.max_sources and rejected < est.max_sources:
        flat = int(np.argmax(residual))
        peak = np.unravel_index(flat, n_fft)
        peak_power = float(residual[peak])
        if peak_power <= 0:
            break
        bg = local_background(residual, spectrum.mask, peak, guard, train)
        ratio = peak_power / bg if bg > 0 else np.inf
        diag = {"peak_bin": tuple(int(i) for i in peak), "peak_power": peak_power,
                "background": bg, "ratio": ratio, "accepted": False}
        report.iterations.append(diag)
        if not ratio > est.threshold:
            elevation = slab_elevation(residual, spectrum.mask, int(peak[2]), skipped)
            diag["slab_elevation"] = elevation
            if elevation <= FLOOR_ELEVATION:
                break
            diag["rejected"] = "elevated_floor"
            skipped[peak[2]] = True
            residual[:, :, skipped] = 0.0
            continue
        # refinement uses the unmasked spectrum so earlier masks cannot bend the parabola
        refined, flags = [], []
        for ax in range(3):
            lo, hi = list(peak), list(peak)
            lo[ax] = (peak[ax] - 1) % n_fft[ax]
            hi[ax] = (peak[ax] + 1) % n_fft[ax]
            ym = abs(spectrum.values[tuple(lo)])
            y0 = abs(spectrum.values[peak])
            yp = abs(spectrum.values[tuple(hi)])
            delta, ok = parabolic_refine(ym, y0, yp)
            if not ok:
                flags.append(f"flat_axis_{ax}")
            refined.append(peak[ax] + delta)
        delay, doppler, angle = invert_mapping(*refined, cfg, est)
        if est.gain_at_refined:
            value = dft_at(z, refined, est.fft_sizes) - leakage(refined)
        else:
            value = complex(spectrum.values[peak])
        if est.cancel_sidelobes:
            cancel_tone(spectrum.values, refined, value, shape)
            tones.append((tuple(refined), value))
            residual = spectrum.residual_power()
            residual[:, :, skipped] = 0.0
        mask_ball(spectrum.mask, residual, peak, radii)
        if angle is None:
            diag["rejected"] = "spatial_alias"
            rejected += 1
            log.debug("rejected peak %s: arcsine argument outside [-1, 1]", peak)
            continue
        moment = est.fourth_moment if est.order == 4 else 1.0
        gain = estimate_gain(value, moment, g_fft, est.order)
        diag["accepted"] = True
        report.detections.append(DetectedSource(
            delay=delay, doppler=doppler, angle=angle, gain=gain,
            peak_power=peak_power, peak_to_background=ratio,
            refined_bins=tuple(float(r) for r in refined),
            peak_bin=tuple(int(i) for i in peak), flags=tuple(flags)))
    return report


def export_heatmaps(spectrum: HosSpectrum, cfg: OfdmConfig, est: EstimatorConfig, prefix: str,
                    peak=None) -> tuple[str, str]:
    """Write range-velocity and range-angle |S|^2 slices through ``peak`` as CSV.

    Rows are ``range_m, velocity_mps | angle_deg, power``. Returns the two
    file paths.
    """
    values = spectrum.values
    if peak is None:
        peak = np.unravel_index(int(np.argmax(np.abs(values))), values.shape)
    n_tau, n_nu, n_theta = est.fft_sizes
    q = est.order
    u = np.arange(n_tau)
    ranges = ((-u / n_tau) % 1.0) / (q * cfg.subcarrier_spacing) * cfg.speed_of_light
    v = np.array([_signed(b, n_nu) for b in range(n_nu)])
    vel = v / (q * n_nu * cfg.symbol_duration) * cfg.wavelength
    w = np.array([_signed(b, n_theta) for b in range(n_theta)])
    arg = -w / (q * n_theta * cfg.antenna_spacing_ratio)
    ang = np.rad2deg(np.arcsin(np.clip(arg, -1, 1)))
    paths = (f"{prefix}_range_velocity.csv", f"{prefix}_range_angle.csv")
    rv = np.abs(values[:, :, peak[2]]) ** 2
    ra = np.abs(values[:, peak[1], :]) ** 2
    for path, axis_vals, grid, name in ((paths[0], vel, rv, "velocity_mps"),
                                         (paths[1], ang, ra, "angle_deg")):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["range_m", name, "power"])
            for i in range(grid.shape[0]):
                for j in range(grid.shape[1]):
                    wr.writerow([f"{ranges[i]:.6g}", f"{axis_vals[j]:.6g}", f"{grid[i, j]:.6g}"])
    return paths


def report_to_dict(report: EstimateReport, cfg: OfdmConfig, est: EstimatorConfig | None = None) -> dict:
    """JSON-ready estimate report; physical units are given alongside SI values."""
    from .core import SCHEMA_VERSION
    from .waveform import config_to_dict

    dets = []
    for d in report.detections:
        dets.append({"delay": d.delay, "delay_ns": d.delay * 1e9, "doppler": d.doppler,
                     "velocity_mps": d.velocity(cfg), "angle": d.angle,
                     "angle_deg": float(np.rad2deg(d.angle)), "gain": [d.gain.real, d.gain.imag],
                     "peak_power": d.peak_power, "peak_to_background": d.peak_to_background,
                     "refined_bins": list(d.refined_bins), "peak_bin": list(d.peak_bin),
                     "flags": list(d.flags)})
    doc = {"schema_version": SCHEMA_VERSION, "config": config_to_dict(cfg),
           "num_detected": report.num_detected, "detections": dets,
           "iterations": report.iterations, "notes": report.notes}
    if est is not None:
        doc["estimator"] = {"fft_sizes": list(est.fft_sizes), "threshold": est.threshold,
                            "mask_radius": est.mask_radius, "max_sources": est.max_sources,
                            "guard_cells": list(est.guard_cells), "training_cells": list(est.training_cells),
                            "fourth_moment": [complex(est.fourth_moment).real, complex(est.fourth_moment).imag],
                            "order": est.order}
    return doc


def report_from_dict(doc: dict) -> EstimateReport:
    dets = []
    for d in doc.get("detections", []):
        g = d.get("gain", [1.0, 0.0])
        dets.append(DetectedSource(delay=float(d["delay"]), doppler=float(d["doppler"]),
                                   angle=float(d["angle"]), gain=complex(*g),
                                   peak_power=float(d.get("peak_power", np.nan)),
                                   peak_to_background=float(d.get("peak_to_background", np.nan)),
                                   refined_bins=tuple(d.get("refined_bins", (0.0, 0.0, 0.0))),
                                   peak_bin=tuple(d.get("peak_bin", (0, 0, 0))),
                                   flags=tuple(d.get("flags", ()))))
    return EstimateReport(dets, list(doc.get("iterations", [])), dict(doc.get("notes", {})))
