"""
Frequency-domain synthesis of the multi-source received tensor.

The simulator writes the post-DFT grid directly: no time-domain OFDM
modulation or cyclic prefix handling is performed. Random draws come from
``numpy.random.Generator(PCG64(seed))`` in a fixed order (symbols for
source 0, 1, ..., then the noise cube as two ``standard_normal`` draws for
the real and imaginary parts), so a seed reproduces a tensor bit for bit
on a given platform.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (SCHEMA_VERSION, Constellation, OfdmConfig, SourceParams,
                   constellation_from_dict, qpsk)

TENSOR_MAGIC = b"BISAC-TENSOR"


@dataclass(frozen=True)
class ImpairmentConfig:
    """Synchronisation errors injected into the received tensor (0 disables)."""

    timing_offset: float = 0.0
    cfo: float = 0.0
    phase_offset: float = 0.0

    def __post_init__(self):
        if not all(np.isfinite([self.timing_offset, self.cfo, self.phase_offset])):
            raise ValueError("impairments must be finite")

    @property
    def active(self) -> bool:
        return any((self.timing_offset, self.cfo, self.phase_offset))


@dataclass(frozen=True)
class Scenario:
    config: OfdmConfig
    sources: tuple
    constellation: Constellation = field(default_factory=qpsk)
    rng_seed: int = 0
    source_constellations: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if self.source_constellations is not None:
            if len(self.source_constellations) != len(self.sources):
                raise ValueError("one constellation per source required")
            object.__setattr__(self, "source_constellations", tuple(self.source_constellations))
        for s in self.sources:
            if not abs(s.angle) < np.pi / 2:
                raise ValueError("source angle outside the array field of view")
            if 4 * self.config.symbol_duration * abs(s.doppler) >= 0.5:
                warnings.warn("Doppler aliases in the fourth-order virtual domain "
                              "(4 * T_sym * |nu| >= 0.5)", stacklevel=2)

    def constellation_of(self, p: int) -> Constellation:
        if self.source_constellations is None:
            return self.constellation
        return self.source_constellations[p]

    def with_noise(self, noise_variance: float) -> "Scenario":
        from dataclasses import replace

        return replace(self, config=self.config.replace(noise_variance=noise_variance))

    def with_seed(self, seed: int) -> "Scenario":
        from dataclasses import replace

        return replace(self, rng_seed=int(seed))


@dataclass(frozen=True, eq=False)
class ReceivedTensor:
    """K x N_sym x M observation cube indexed ``[k, n, m]``."""

    data: np.ndarray
    config: OfdmConfig

    def __post_init__(self):
        if self.data.shape != self.config.shape:
            raise ValueError(f"tensor shape {self.data.shape} != grid {self.config.shape}")

    def with_data(self, data: np.ndarray) -> "ReceivedTensor":
        return ReceivedTensor(np.asarray(data), self.config)


def _axes(cfg: OfdmConfig):
    k = np.arange(cfg.num_subcarriers)
    n = np.arange(cfg.num_symbols)
    m = np.arange(cfg.num_antennas)
    return k, n, m


def channel_response(cfg: OfdmConfig, xi: SourceParams, k, n, m):
    """Unit-modulus channel response at grid indices ``(k, n, m)``.

    Broadcasts over array-valued indices.
    """
    k, n, m = (np.asarray(v, dtype=float) for v in (k, n, m))
    phase = (-k * cfg.subcarrier_spacing * xi.delay
             + n * cfg.symbol_duration * xi.doppler
             - cfg.antenna_spacing_ratio * m * np.sin(xi.angle))
    out = np.exp(2j * np.pi * phase)
    return complex(out) if out.ndim == 0 else out


def steering_vector(cfg: OfdmConfig, angle: float) -> np.ndarray:
    m = np.arange(cfg.num_antennas)
    return np.exp(-2j * np.pi * cfg.antenna_spacing_ratio * m * np.sin(angle))


def channel_factors(cfg: OfdmConfig, xi: SourceParams):
    """Per-axis phase vectors whose outer product is the channel cube."""
    k, n, _ = _axes(cfg)
    f = np.exp(-2j * np.pi * k * cfg.subcarrier_spacing * xi.delay)
    t = np.exp(2j * np.pi * n * cfg.symbol_duration * xi.doppler)
    return f, t, steering_vector(cfg, xi.angle)


def channel_tensor(cfg: OfdmConfig, xi: SourceParams) -> np.ndarray:
    f, t, s = channel_factors(cfg, xi)
    return f[:, None, None] * t[None, :, None] * s[None, None, :]


def apply_impairments(data: np.ndarray, cfg: OfdmConfig, imp: ImpairmentConfig) -> np.ndarray:
    if not imp.active:
        return data
    k, n, _ = _axes(cfg)
    ramp = (np.exp(-2j * np.pi * cfg.subcarrier_spacing * imp.timing_offset * k)[:, None, None]
            * np.exp(2j * np.pi * cfg.symbol_duration * imp.cfo * n)[None, :, None])
    return data * ramp * np.exp(1j * imp.phase_offset)


def draw_symbols(c: Constellation, shape, rng: np.random.Generator):
    """Return (indices, symbols) drawn i.i.d. from ``c``."""
    if np.allclose(c.probabilities, c.probabilities[0]):
        idx = rng.integers(0, len(c), size=shape)
    else:
        idx = rng.choice(len(c), size=shape, p=c.probabilities)
    return idx, c.points[idx]


def complex_noise(shape, variance: float, rng: np.random.Generator) -> np.ndarray:
    scale = np.sqrt(variance / 2.0)
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return scale * (re + 1j * im)


@dataclass(frozen=True, eq=False)
class SymbolTruth:
    """Transmitted symbols, shape ``(K, N_sym, P)``, plus alphabet indices."""

    symbols: np.ndarray
    indices: np.ndarray


def synthesize(sc: Scenario, imp: ImpairmentConfig | None = None,
               noiseless: bool = False) -> tuple[ReceivedTensor, SymbolTruth]:
    """Draw data and noise and build the received tensor.

    Returns
    -------
    y : ReceivedTensor
    truth : SymbolTruth
        Ground-truth symbols for benchmarking.
    """
    cfg = sc.config
    rng = np.random.Generator(np.random.PCG64(sc.rng_seed))
    K, N, M = cfg.shape
    P = len(sc.sources)
    symbols = np.zeros((K, N, P), dtype=complex)
    indices = np.zeros((K, N, P), dtype=np.int64)
    data = np.zeros(cfg.shape, dtype=complex)
    for p, xi in enumerate(sc.sources):
        idx, x = draw_symbols(sc.constellation_of(p), (K, N), rng)
        indices[..., p] = idx
        symbols[..., p] = x
        data += xi.gain * x[:, :, None] * channel_tensor(cfg, xi)
    if cfg.noise_variance > 0 and not noiseless:
        data += complex_noise(cfg.shape, cfg.noise_variance, rng)
    if imp is not None:
        data = apply_impairments(data, cfg, imp)
    return ReceivedTensor(data, cfg), SymbolTruth(symbols, indices)


def snr_of(sc: Scenario) -> np.ndarray:
    """Linear per-source SNR ``|alpha|^2 * sigma_x^2 / sigma_n^2``."""
    nv = sc.config.noise_variance
    if nv <= 0:
        raise ValueError("noise variance is zero: SNR is infinite")
    return np.array([abs(s.gain) ** 2 * sc.constellation_of(p).avg_power / nv
                     for p, s in enumerate(sc.sources)])


def noise_variance_for_snr(snr_db: float, gain: complex = 1.0, symbol_power: float = 1.0) -> float:
    return abs(gain) ** 2 * symbol_power / 10 ** (snr_db / 10)


# -- scenario files ---------------------------------------------------------

def _source_from_dict(d: dict, cfg: OfdmConfig) -> SourceParams:
    if "delay" in d:
        delay = float(d["delay"])
    elif "delay_ns" in d:
        delay = float(d["delay_ns"]) * 1e-9
    else:
        raise ValueError("source lacks 'delay' or 'delay_ns'")
    if "doppler" in d:
        doppler = float(d["doppler"])
    elif "velocity_mps" in d:
        doppler = float(d["velocity_mps"]) / cfg.wavelength
    else:
        raise ValueError("source lacks 'doppler' or 'velocity_mps'")
    if "angle" in d:
        angle = float(d["angle"])
    elif "angle_deg" in d:
        angle = np.deg2rad(float(d["angle_deg"]))
    else:
        raise ValueError("source lacks 'angle' or 'angle_deg'")
    g = d.get("gain", [1.0, 0.0])
    gain = complex(*g) if isinstance(g, (list, tuple)) else complex(g)
    return SourceParams(delay, doppler, angle, gain)


def config_from_dict(d: dict) -> OfdmConfig:
    known = set(OfdmConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    return OfdmConfig(**d)


def config_to_dict(cfg: OfdmConfig) -> dict:
    return {name: getattr(cfg, name) for name in OfdmConfig.__dataclass_fields__}


def scenario_from_dict(doc: dict, base_dir: Path | None = None) -> Scenario:
    """Build a scenario from its JSON document.

    ``snr_db`` (optional) sets the noise variance relative to a unit-gain,
    unit-power source and overrides ``config.noise_variance``.
    """
    cfg = config_from_dict(doc["config"])
    from .design import preset_constellation  # deferred: design imports core only

    spec = doc.get("constellation", "qpsk")
    if isinstance(spec, dict):
        const = constellation_from_dict(spec)
    elif spec == "qpsk":
        const = qpsk()
    else:
        try:
            const = preset_constellation(spec)
        except KeyError:
            from .core import load_constellation

            path = Path(spec)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            const = load_constellation(path)
    if doc.get("snr_db") is not None:
        cfg = cfg.replace(noise_variance=noise_variance_for_snr(float(doc["snr_db"]),
                                                                symbol_power=const.avg_power))
    sources = tuple(_source_from_dict(s, cfg) for s in doc.get("sources", []))
    return Scenario(cfg, sources, const, int(doc.get("seed", 0)))


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "config": config_to_dict(sc.config),
        "sources": [{"delay": s.delay, "doppler": s.doppler, "angle": s.angle,
                     "gain": [s.gain.real, s.gain.imag]} for s in sc.sources],
        "constellation": {"label": sc.constellation.label,
                          "points": [[p.real, p.imag] for p in sc.constellation.points],
                          "probabilities": list(map(float, sc.constellation.probabilities))},
        "seed": sc.rng_seed,
    }


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return scenario_from_dict(doc, path.parent)


# -- tensor dump ------------------------------------------------------------

def save_tensor(y: ReceivedTensor, path, extra: dict | None = None) -> None:
    """Write the binary tensor dump.

    Layout: the ASCII line ``BISAC-TENSOR 1``, one line of JSON header
    (shape, config, extra), then K*N_sym*M complex values in C order
    ``[k][n][m]``, each as little-endian float64 real part followed by
    float64 imaginary part.
    """
    header = {"schema_version": SCHEMA_VERSION, "shape": list(y.data.shape),
              "dtype": "<c16", "config": config_to_dict(y.config)}
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC + b" 1\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(y.data, dtype="<c16").tobytes())


def load_tensor(path) -> tuple[ReceivedTensor, dict]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if not magic.startswith(TENSOR_MAGIC):
            raise ValueError(f"{path}: not a tensor dump")
        header = json.loads(fh.readline())
        raw = fh.read()
    shape = tuple(header["shape"])
    data = np.frombuffer(raw, dtype="<c16")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload has {data.size} values, header says {shape}")
    cfg = config_from_dict(header["config"])
    return ReceivedTensor(data.reshape(shape).astype(complex), cfg), header.get("extra", {})
