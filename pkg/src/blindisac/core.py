"""
Shared domain types and constellation mathematics.

Grid geometry lives in :class:`OfdmConfig`, per-source ground truth in
:class:`SourceParams`, and finite alphabets in :class:`Constellation`.
Everything here is immutable and pure.

Unit conventions
----------------
delay in seconds, Doppler in Hz, angle in radians measured from array
broadside, gains as complex linear amplitudes. Velocities are derived as
``doppler * wavelength``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPEED_OF_LIGHT = 2.998e8
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class OfdmConfig:
    """OFDM grid geometry and physical constants.

    ``symbol_duration`` is the full OFDM symbol interval (useful part plus
    cyclic prefix); only that total enters the post-DFT phase model.
    """

    num_subcarriers: int
    num_symbols: int
    num_antennas: int
    subcarrier_spacing: float = 1e6
    symbol_duration: float = 1e-6
    carrier_frequency: float = 28e9
    antenna_spacing_ratio: float = 0.5
    noise_variance: float = 0.0
    speed_of_light: float = SPEED_OF_LIGHT

    def __post_init__(self):
        for name in ("num_subcarriers", "num_symbols", "num_antennas"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("subcarrier_spacing", "symbol_duration", "carrier_frequency"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be >= 0")

    @property
    def wavelength(self) -> float:
        return self.speed_of_light / self.carrier_frequency

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.num_subcarriers, self.num_symbols, self.num_antennas)

    @property
    def num_samples(self) -> int:
        """Coherent processing gain K * N_sym * M."""
        return self.num_subcarriers * self.num_symbols * self.num_antennas

    def replace(self, **changes) -> "OfdmConfig":
        from dataclasses import replace

        return replace(self, **changes)

    @classmethod
    def full_grid(cls, **kw) -> "OfdmConfig":
        """128 subcarriers, 200 symbols, 16 antennas at 28 GHz, 1 MHz spacing."""
        base = dict(num_subcarriers=128, num_symbols=200, num_antennas=16)
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk_grid(cls, **kw) -> "OfdmConfig":
        """Reduced 64 x 64 x 8 grid used for Monte-Carlo sweeps."""
        base = dict(num_subcarriers=64, num_symbols=64, num_antennas=8)
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class SourceParams:
    """Ground truth of one propagation source."""

    delay: float
    doppler: float
    angle: float
    gain: complex = 1.0 + 0.0j

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError("delay must be >= 0")
        if not abs(self.angle) < np.pi / 2:
            raise ValueError("angle must lie strictly inside (-pi/2, pi/2)")

    def velocity(self, cfg: OfdmConfig) -> float:
        """Radial velocity in m/s."""
        return self.doppler * cfg.wavelength

    @classmethod
    def from_physical(cls, delay_ns: float, velocity_mps: float, angle_deg: float,
                      gain: complex = 1.0, cfg: OfdmConfig | None = None) -> "SourceParams":
        wavelength = (cfg or OfdmConfig(1, 1, 1)).wavelength
        return cls(delay=delay_ns * 1e-9, doppler=velocity_mps / wavelength,
                   angle=np.deg2rad(angle_deg), gain=complex(gain))


@dataclass(frozen=True)
class ConstellationMetrics:
    mean: complex
    second_moment: complex
    fourth_moment: complex
    avg_power: float
    d_min: float
    d_rot_quarter: float
    peak_to_avg: float

    @property
    def d_min_squared(self) -> float:
        return self.d_min**2

    def as_dict(self) -> dict:
        return {
            "mean": [self.mean.real, self.mean.imag],
            "second_moment": [self.second_moment.real, self.second_moment.imag],
            "fourth_moment": [self.fourth_moment.real, self.fourth_moment.imag],
            "abs_fourth_moment": abs(self.fourth_moment),
            "avg_power": self.avg_power,
            "d_min": self.d_min,
            "d_min_squared": self.d_min_squared,
            "d_rot_quarter": self.d_rot_quarter,
            "peak_to_avg": self.peak_to_avg,
        }


@dataclass(frozen=True, eq=False)
class Constellation:
    """Finite complex alphabet with symbol probabilities (uniform by default)."""

    points: np.ndarray
    probabilities: np.ndarray | None = None
    label: str = ""
    _metrics: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=complex).ravel()
        if self.probabilities is None:
            probs = np.full(pts.size, 1.0 / max(pts.size, 1))
        else:
            probs = np.asarray(self.probabilities, dtype=float).ravel()
        if probs.shape != pts.shape:
            raise ValueError("points and probabilities differ in length")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to 1")
        if np.unique(pts).size < 2:
            raise ValueError("constellation needs at least two distinct points")
        pts.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "probabilities", probs)

    def __len__(self) -> int:
        return self.points.size

    def moment(self, order: int) -> complex:
        return complex(np.sum(self.probabilities * self.points**order))

    @property
    def avg_power(self) -> float:
        return float(np.sum(self.probabilities * np.abs(self.points) ** 2))

    def normalized(self) -> "Constellation":
        """Copy scaled to unit average power."""
        return Constellation(self.points / np.sqrt(self.avg_power), self.probabilities, self.label)

    def scaled(self, factor: complex) -> "Constellation":
        return Constellation(self.points * factor, self.probabilities, self.label)

    @property
    def metrics(self) -> ConstellationMetrics:
        if not self._metrics:
            self._metrics.append(compute_metrics(self))
        return self._metrics[0]

    def slice(self, z):
        """Nearest-point decisions; see :func:`slice_points`."""
        return slice_points(self, z)


def qpsk() -> Constellation:
    return Constellation(np.exp(1j * np.pi * (0.25 + 0.5 * np.arange(4))), label="qpsk")


def bpsk() -> Constellation:
    return Constellation(np.array([1.0, -1.0]), label="bpsk")


def _pairwise_min_distance(points: np.ndarray) -> float:
    diff = np.abs(points[:, None] - points[None, :])
    iu = np.triu_indices(points.size, k=1)
    return float(diff[iu].min())


def rotation_separation(c: Constellation, phi: float) -> float:
    """Mean distance from each point to the nearest point of the rotated set.

    Zero iff ``exp(1j*phi) * C`` covers ``C``.
    """
    pts = c.points
    rotated = np.exp(1j * phi) * pts
    return float(np.mean(np.min(np.abs(pts[:, None] - rotated[None, :]), axis=1)))


def compute_metrics(c: Constellation) -> ConstellationMetrics:
    pts, probs = c.points, c.probabilities
    if np.unique(pts).size < 2:
        raise ValueError("degenerate constellation")
    power = float(np.sum(probs * np.abs(pts) ** 2))
    if not power > 0:
        raise ValueError("constellation has zero average power")
    return ConstellationMetrics(
        mean=complex(np.sum(probs * pts)),
        second_moment=complex(np.sum(probs * pts**2)),
        fourth_moment=complex(np.sum(probs * pts**4)),
        avg_power=power,
        d_min=_pairwise_min_distance(pts),
        d_rot_quarter=rotation_separation(c, np.pi / 2),
        peak_to_avg=float(np.max(np.abs(pts) ** 2) / power),
    )


def slice_points(c: Constellation, z):
    """Nearest-neighbour slicer.

    Parameters
    ----------
    c : Constellation
    z : complex or array_like of complex

    Returns
    -------
    index, point
        Same shape as ``z``. Ties go to the lowest index.
    """
    z = np.asarray(z, dtype=complex)
    flat = z.ravel()
    idx = np.empty(flat.size, dtype=np.int64)
    # chunked to bound the |z| x |C| distance matrix
    step = max(1, 2_000_000 // len(c))
    for start in range(0, flat.size, step):
        block = flat[start:start + step]
        d = np.abs(block[:, None] - c.points[None, :]) ** 2
        idx[start:start + step] = np.argmin(d, axis=1)
    idx = idx.reshape(z.shape)
    if idx.ndim == 0:
        i = int(idx)
        return i, complex(c.points[i])
    return idx, c.points[idx]


def save_constellation(c: Constellation, path, metrics: bool = False) -> None:
    """Write the JSON constellation format (see README)."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "label": c.label,
        "points": [[float(p.real), float(p.imag)] for p in c.points],
        "probabilities": [float(p) for p in c.probabilities],
    }
    if metrics:
        doc["metrics"] = c.metrics.as_dict()
    Path(path).write_text(json.dumps(doc, indent=2))


def constellation_from_dict(doc: dict) -> Constellation:
    if "points" not in doc:
        raise ValueError("constellation document lacks 'points'")
    pts = np.array([complex(re, im) for re, im in doc["points"]])
    probs = doc.get("probabilities")
    return Constellation(pts, None if probs is None else np.asarray(probs, float), doc.get("label", ""))


def load_constellation(path) -> Constellation:
    return constellation_from_dict(json.loads(Path(path).read_text()))
