"""
Twin-ring APSK geometry, the weighted design objective and its optimizer.

A geometry is two concentric rings of ``M1`` and ``M2`` points with radii
``(r1, r2)``, ring phase offsets ``(psi1, psi2)`` and optional per-point
phase perturbations. Radii are relative; :func:`realize` normalizes to
unit average power, so only ``r2 / r1`` matters.

Uniform rings are mapped onto themselves by a pi/2 rotation whenever
``M1`` and ``M2`` are multiples of four, so with ``(4, 12)`` rings the
rotation separation is exactly zero and a uniform 12-ring adds nothing to
``E[X^4]``. The optimizer therefore searches the per-point perturbations
in addition to ``(r2/r1, psi1, psi2)``; ``optimize(..., perturb=False)``
restricts it to the three ring parameters.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Constellation, compute_metrics, save_constellation

RHO_BOUNDS = (1.0, 4.0)


@dataclass(frozen=True)
class ApskGeometry:
    ring_sizes: tuple = (4, 12)
    ring_radii: tuple = (1.0, 2.5)
    ring_phase_offsets: tuple = (np.pi / 4, 0.0)
    perturbations: tuple | None = None

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.ring_sizes)
        if len(sizes) != 2 or min(sizes) < 0 or sum(sizes) < 2:
            raise ValueError("ring_sizes must be two nonnegative counts totalling at least 2")
        if sizes[0] < 1:
            raise ValueError("inner ring must hold at least one point")
        radii = tuple(float(r) for r in self.ring_radii)
        if len(radii) != 2 or min(radii) <= 0:
            raise ValueError("ring radii must be positive")
        object.__setattr__(self, "ring_sizes", sizes)
        object.__setattr__(self, "ring_radii", radii)
        object.__setattr__(self, "ring_phase_offsets", tuple(float(p) for p in self.ring_phase_offsets))
        if self.perturbations is not None:
            pert = tuple(float(p) for p in self.perturbations)
            if len(pert) != sum(sizes):
                raise ValueError("one perturbation per point required")
            object.__setattr__(self, "perturbations", pert)

    @property
    def size(self) -> int:
        return sum(self.ring_sizes)

    @property
    def radius_ratio(self) -> float:
        return self.ring_radii[1] / self.ring_radii[0]

    def angles(self) -> np.ndarray:
        m1, m2 = self.ring_sizes
        a = np.concatenate([self.ring_phase_offsets[0] + 2 * np.pi * np.arange(m1) / m1,
                            self.ring_phase_offsets[1] + 2 * np.pi * np.arange(m2) / max(m2, 1)])
        if self.perturbations is not None:
            a = a + np.asarray(self.perturbations)
        return a

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ring_sizes"] = list(self.ring_sizes)
        d["ring_radii"] = list(self.ring_radii)
        d["ring_phase_offsets"] = list(self.ring_phase_offsets)
        d["perturbations"] = None if self.perturbations is None else list(self.perturbations)
        return d


@dataclass(frozen=True)
class DesignWeights:
    w_d: float
    w_4: float
    w_r: float
    w_1: float
    w_2: float

    def __post_init__(self):
        w = np.array(self.as_tuple(), dtype=float)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if not np.any(w > 0):
            raise ValueError("at least one weight must be positive")

    def as_tuple(self) -> tuple:
        return (self.w_d, self.w_4, self.w_r, self.w_1, self.w_2)


PRESET_WEIGHTS = {
    "balanced": DesignWeights(190, 60, 25, 200, 700),
    "comm": DesignWeights(600, 5, 80, 200, 120),
    "sensing": DesignWeights(80, 180, 10, 150, 1200),
}
PRESET_ALIASES = {"comm-prioritized": "comm", "communication": "comm",
                  "sensing-prioritized": "sensing"}


def _points(geom_radii, angles, sizes) -> np.ndarray:
    r = np.concatenate([np.full(sizes[0], geom_radii[0]), np.full(sizes[1], geom_radii[1])])
    pts = r * np.exp(1j * angles)
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


def realize(g: ApskGeometry, label: str = "") -> Constellation:
    """Points of ``g`` scaled to unit average power.

    Raises
    ------
    ValueError
        If two points coincide.
    """
    pts = _points(g.ring_radii, g.angles(), g.ring_sizes)
    if np.min(np.abs(pts[:, None] - pts[None, :]) + np.eye(pts.size)) < 1e-12:
        raise ValueError("geometry has coincident points")
    return Constellation(pts, label=label)


def batch_objective(points: np.ndarray, w: DesignWeights) -> np.ndarray:
    """Objective for a batch of uniform-probability point sets, shape ``(B, n)``."""
    pts = np.atleast_2d(points)
    n = pts.shape[1]
    d = np.abs(pts[:, :, None] - pts[:, None, :])
    iu = np.triu_indices(n, k=1)
    d_min = d[:, iu[0], iu[1]].min(axis=1)
    rot = np.abs(pts[:, :, None] - 1j * pts[:, None, :]).min(axis=2).mean(axis=1)
    m1 = np.abs(pts.mean(axis=1)) ** 2
    m2 = np.abs((pts**2).mean(axis=1)) ** 2
    m4 = np.abs((pts**4).mean(axis=1))
    return w.w_d * d_min + w.w_4 * m4 + w.w_r * rot - w.w_1 * m1 - w.w_2 * m2


def objective(c: Constellation, w: DesignWeights) -> float:
    """``w_d d_min + w_4 |E X^4| + w_r d_rot(pi/2) - w_1 |E X|^2 - w_2 |E X^2|^2``."""
    m = c.metrics
    return float(w.w_d * m.d_min + w.w_4 * abs(m.fourth_moment) + w.w_r * m.d_rot_quarter
                 - w.w_1 * abs(m.mean) ** 2 - w.w_2 * abs(m.second_moment) ** 2)


@dataclass(eq=False)
class DesignResult:
    geometry: ApskGeometry
    constellation: Constellation
    value: float
    history: list = field(default_factory=list)
    evaluations: int = 0
    identifiable: bool = True

    @property
    def metrics(self):
        return self.constellation.metrics


def _batch_points(xs: np.ndarray, sizes) -> np.ndarray:
    """Unit-power points for search vectors ``[rho, psi1, psi2, pert...]``."""
    m1, m2 = sizes
    base = np.concatenate([2 * np.pi * np.arange(m1) / m1, 2 * np.pi * np.arange(m2) / max(m2, 1)])
    ring = np.concatenate([np.zeros(m1, dtype=int), np.ones(m2, dtype=int)])
    ang = base[None] + np.where(ring == 0, xs[:, 1:2], xs[:, 2:3])
    if xs.shape[1] > 3:
        ang = ang + xs[:, 3:]
    radii = np.where(ring == 0, 1.0, xs[:, 0:1])
    pts = radii * np.exp(1j * ang)
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2, axis=1, keepdims=True))


def _rotation_batch(pts: np.ndarray) -> np.ndarray:
    return np.abs(pts[:, :, None] - 1j * pts[:, None, :]).min(axis=2).mean(axis=1)


class _Search:
    """Budgeted batch evaluator tracking the best feasible point."""

    def __init__(self, w, sizes, budget, min_rotation):
        self.w, self.sizes, self.budget, self.min_rotation = w, sizes, budget, min_rotation
        self.used = 0
        self.best = -np.inf
        self.best_x = None
        self.history = []

    @property
    def exhausted(self) -> bool:
        return self.used >= self.budget

    def __call__(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(xs)
        out = np.full(len(xs), -np.inf)
        take = min(len(xs), self.budget - self.used)
        if take <= 0:
            return out
        pts = _batch_points(xs[:take], self.sizes)
        vals = batch_objective(pts, self.w)
        # rotation floor as an exact penalty; the raw objective is what gets recorded
        short = np.maximum(self.min_rotation - _rotation_batch(pts), 0.0)
        feasible = short <= 0
        out[:take] = vals - 1e4 * short
        self.used += take
        if feasible.any():
            i = int(np.argmax(np.where(feasible, vals, -np.inf)))
            if vals[i] > self.best:
                self.best, self.best_x = float(vals[i]), xs[i].copy()
        self.history.append(self.best)
        return out


def _compass(f: _Search, x0: np.ndarray, steps: np.ndarray, min_step: float) -> None:
    x = x0.copy()
    fx = f(x)[0]
    steps = steps.copy()
    dim = x.size
    while not f.exhausted and steps.max() > min_step:
        # all 2 * dim poll points evaluated as one batch
        cand = np.repeat(x[None], 2 * dim, axis=0)
        cand[np.arange(dim), np.arange(dim)] += steps
        cand[dim + np.arange(dim), np.arange(dim)] -= steps
        cand[:, 0] = np.clip(cand[:, 0], *RHO_BOUNDS)
        vals = f(cand)
        i = int(np.argmax(vals))
        if vals[i] > fx:
            x, fx = cand[i], vals[i]
        else:
            steps *= 0.5


def default_min_rotation(num_samples: int = 64 * 64, snr: float = 1.0, margin_db: float = 10.0) -> float:
    """Smallest ``d_rot`` meeting the reliability margin at unit gain.

    ``d_rot^2 >= 10^(margin/10) * N0 / L`` with ``N0 = 1 / snr``. The default
    is the 64 x 64 time-frequency grid at 0 dB, about 0.049.
    """
    return float(np.sqrt(10 ** (margin_db / 10) / (snr * num_samples)))


START_SCALES = (0.05, 0.1, 0.2, 0.4, 0.8)


def optimize(template: ApskGeometry | None, w: DesignWeights, budget: int = 120_000, seed: int = 0,
             perturb: bool = True, starts: int = 30, min_rotation: float | None = None) -> DesignResult:
    """Maximize the design objective over the twin-ring family.

    A coarse grid over ``(r2/r1, psi1, psi2)`` is evaluated first. Then a
    batch compass search runs from ``starts`` seeded points whose per-point
    perturbations are drawn at several scales. Candidates with rotation
    separation below ``min_rotation`` (default
    :func:`default_min_rotation`) are infeasible. ``budget`` bounds the
    number of objective evaluations. ``history`` holds the best feasible
    value after every evaluation batch and never decreases.
    """
    if budget < 100:
        raise ValueError("budget must be at least 100 evaluations")
    template = template or ApskGeometry()
    sizes = template.ring_sizes
    n = sum(sizes)
    if min_rotation is None:
        min_rotation = default_min_rotation() if perturb else 0.0
    f = _Search(w, sizes, budget, min_rotation)
    rng = np.random.default_rng(seed)

    # coarse grid; phases beyond one ring period are redundant
    n_rho, n_psi = (16, 8) if budget >= 10_000 else (4, 4)
    rhos = np.linspace(*RHO_BOUNDS, n_rho)
    p1 = np.linspace(0, 2 * np.pi / sizes[0], n_psi, endpoint=False)
    p2 = np.linspace(0, 2 * np.pi / max(sizes[1], 1), n_psi, endpoint=False)
    grid = np.array([[r, a, b] for r in rhos for a in p1 for b in p2])
    if perturb:
        grid = np.hstack([grid, np.zeros((len(grid), n))])
    vals = f(grid)
    order = np.argsort(-vals, kind="stable")
    steps = np.full(grid.shape[1], 0.3)
    steps[0] = 0.5
    per_start = max(1, (budget - f.used) // max(starts, 1))
    for s in range(starts):
        if f.exhausted:
            break
        x0 = grid[order[s % len(order)]].copy()
        if perturb:
            x0[0] = rng.uniform(*RHO_BOUNDS)
            x0[3:] = rng.uniform(-1, 1, n) * START_SCALES[s % len(START_SCALES)]
        sub = _Search(w, sizes, min(per_start, budget - f.used), min_rotation)
        _compass(sub, x0, steps, 1e-4)
        f.used += sub.used
        if sub.best > f.best:
            f.best, f.best_x = sub.best, sub.best_x
        f.history.append(f.best)

    if f.best_x is None:
        raise RuntimeError("no feasible geometry found; lower min_rotation or raise the budget")
    x = f.best_x
    geom = ApskGeometry(sizes, (1.0, float(x[0])), (float(x[1]), float(x[2])),
                        tuple(float(p) for p in x[3:]) if x.size > 3 else None)
    c = realize(geom, label="apsk")
    result = DesignResult(geom, c, objective(c, w), f.history, f.used)
    if w.w_r > 0 and c.metrics.d_rot_quarter <= 1e-9:
        result.identifiable = False
        warnings.warn("optimized constellation is pi/2 rotation symmetric", stacklevel=2)
    return result


def reliability_margin_db(beta: complex, c: Constellation, noise_variance: float, num_samples: int) -> float:
    """``|beta|^2 d_rot^2 / (N0 / L)`` in dB; at least 10 dB is advised."""
    num = abs(beta) ** 2 * c.metrics.d_rot_quarter**2
    den = noise_variance / num_samples
    if num == 0:
        return -np.inf
    if den == 0:
        return np.inf
    return float(10 * np.log10(num / den))


def reliability_ok(beta, c, noise_variance, num_samples, margin_db: float = 10.0) -> bool:
    return reliability_margin_db(beta, c, noise_variance, num_samples) >= margin_db


def metrics_sidecar(result: DesignResult, w: DesignWeights | None = None) -> dict:
    """Metrics in the reported layout; radii are given after unit-power normalization."""
    g = result.geometry
    pts = result.constellation.points
    m1, _ = g.ring_sizes
    doc = {"geometry": g.to_dict(), "radius_ratio": g.radius_ratio,
           "normalized_radii": [float(np.abs(pts[0])), float(np.abs(pts[m1])) if pts.size > m1 else None],
           "objective": result.value, "evaluations": result.evaluations,
           "identifiable": result.identifiable, **result.metrics.as_dict()}
    if w is not None:
        doc["weights"] = dict(zip(("w_d", "w_4", "w_r", "w_1", "w_2"), w.as_tuple()))
    return doc


def save_design(result: DesignResult, path, w: DesignWeights | None = None) -> Path:
    """Constellation file at ``path`` plus ``<stem>.metrics.json`` next to it."""
    path = Path(path)
    save_constellation(result.constellation, path, metrics=True)
    side = path.with_name(path.stem + ".metrics.json")
    side.write_text(json.dumps(metrics_sidecar(result, w), indent=2))
    return side


_PRESET_CACHE: dict = {}


def preset_weights(name: str) -> DesignWeights:
    key = PRESET_ALIASES.get(name, name)
    if key not in PRESET_WEIGHTS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESET_WEIGHTS)}")
    return PRESET_WEIGHTS[key]


def preset_design(name: str, budget: int = 120_000, seed: int = 0) -> DesignResult:
    """Optimized design for a named weight preset (cached per process)."""
    key = (PRESET_ALIASES.get(name, name), budget, seed)
    if key not in _PRESET_CACHE:
        _PRESET_CACHE[key] = optimize(None, preset_weights(name), budget=budget, seed=seed)
    return _PRESET_CACHE[key]


def preset_constellation(name: str) -> Constellation:
    res = preset_design(name)
    return Constellation(res.constellation.points, label=PRESET_ALIASES.get(name, name))


def check_metrics(c: Constellation) -> dict:
    """Recompute metrics; convenience for sidecars of arbitrary point sets."""
    return compute_metrics(c).as_dict()
