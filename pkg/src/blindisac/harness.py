"""
Monte-Carlo experiments: sweep one axis, run trials, aggregate errors.

Trial ``t`` of every sweep point uses the seed ``base_seed ^ t``, so the
points of a sweep share symbols and noise (common random numbers) and
differences between them come from the swept quantity alone. Results do
not depend on the number of worker processes: trials are reduced in index
order.

Metrics
-------
``<method>_<param>_rmse``
    Root mean square error over all matched (source, trial) pairs; the
    ``std`` column is the standard deviation of the absolute error.
``<method>_<param>_bias``, ``<method>_<param>_mean``
    Mean signed error and mean estimate.
``<method>_detect``
    Fraction of trials in which the number of detections equals the
    number of sources (blind only).
``<method>_ser``
    Symbol error rate after blind demodulation (constellation sweeps).
``crlb_<param>``
    Square root of the data-aided bound for the first source.

Units: delay in s, velocity in m/s, angle in degrees.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import comb_pilot_mask, crlb_data_aided, data_aided_estimate, pilot_aided_estimate
from .core import SCHEMA_VERSION, OfdmConfig
from .design import preset_constellation
from .hos import EstimatorConfig, detect_all
from .separation import demodulate, match_to_truth, score_against_truth
from .waveform import (ImpairmentConfig, Scenario, noise_variance_for_snr, scenario_from_dict,
                       scenario_to_dict, synthesize)

log = logging.getLogger(__name__)

SWEEP_AXES = ("snr_db", "pilot_count", "impairment", "constellation")
METHODS = ("blind", "data_aided", "pilot")
IMPAIRMENT_KINDS = {
    "timing_offset": ("timing_offset", 1.0),
    "timing_offset_ns": ("timing_offset", 1e-9),
    "cfo": ("cfo", 1.0),
    "phase_offset": ("phase_offset", 1.0),
    "phase_offset_deg": ("phase_offset", np.pi / 180),
}
PARAMS = ("delay", "velocity", "angle")


@dataclass(frozen=True)
class EstimatorSettings:
    """Grid-independent estimator settings; resolved per scenario."""

    pad: int | tuple | str = "auto"
    threshold: float = 20.0
    mask_radius: float = 3.0
    max_sources: int = 8
    guard_cells: tuple = (2.0, 2.0, 0.0)
    training_cells: tuple = (5.0, 5.0, 0.0)

    def resolve(self, cfg: OfdmConfig, fourth_moment: complex = -1.0) -> EstimatorConfig:
        return EstimatorConfig.for_grid(cfg, self.pad, threshold=self.threshold,
                                        mask_radius=self.mask_radius, max_sources=self.max_sources,
                                        guard_cells=self.guard_cells, training_cells=self.training_cells,
                                        fourth_moment=fourth_moment)

    def to_dict(self) -> dict:
        return {"pad": list(self.pad) if isinstance(self.pad, tuple) else self.pad,
                "threshold": self.threshold, "mask_radius": self.mask_radius,
                "max_sources": self.max_sources, "guard_cells": list(self.guard_cells),
                "training_cells": list(self.training_cells)}

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorSettings":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown estimator fields: {sorted(unknown)}")
        d = dict(d)
        for k in ("pad", "guard_cells", "training_cells"):
            if isinstance(d.get(k), list):
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class Experiment:
    name: str
    scenario: Scenario
    axis: str
    values: tuple
    trials: int = 50
    estimator: EstimatorSettings = field(default_factory=EstimatorSettings)
    methods: tuple = ("blind",)
    impairment: str = "timing_offset"
    pilot_count: int = 16
    snr_db: float | None = None
    output: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"sweep axis must be one of {SWEEP_AXES}")
        if not self.values:
            raise ValueError("sweep has no values")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if self.axis == "impairment" and self.impairment not in IMPAIRMENT_KINDS:
            raise ValueError(f"impairment must be one of {sorted(IMPAIRMENT_KINDS)}")
        if not self.scenario.sources:
            raise ValueError("experiments need at least one source")

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "name": self.name,
                "scenario": scenario_to_dict(self.scenario),
                "sweep": {"axis": self.axis, "values": list(self.values), "impairment": self.impairment},
                "trials": self.trials, "estimator": self.estimator.to_dict(),
                "methods": list(self.methods), "pilot_count": self.pilot_count,
                "snr_db": self.snr_db, "output": self.output}

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("output", None)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def experiment_from_dict(doc: dict, base_dir: Path | None = None) -> Experiment:
    for key in ("scenario", "sweep"):
        if key not in doc:
            raise ValueError(f"experiment lacks '{key}'")
    sweep = doc["sweep"]
    return Experiment(
        name=doc.get("name", "experiment"),
        scenario=scenario_from_dict(doc["scenario"], base_dir),
        axis=sweep["axis"], values=tuple(sweep["values"]),
        impairment=sweep.get("impairment", "timing_offset"),
        trials=int(doc.get("trials", 50)),
        estimator=EstimatorSettings.from_dict(doc.get("estimator", {})),
        methods=tuple(doc.get("methods", ("blind",))),
        pilot_count=int(doc.get("pilot_count", 16)),
        snr_db=doc.get("snr_db", doc["scenario"].get("snr_db")),
        output=doc.get("output"))


def load_experiment(path) -> Experiment:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    return experiment_from_dict(doc, path.parent)


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("sweep_value", "metric", "mean", "std", "trials")

    def add(self, value, metric: str, mean: float, std: float, trials: int) -> None:
        self.rows.append((value, metric, float(mean), float(std), int(trials)))

    def get(self, value, metric: str) -> tuple:
        for row in self.rows:
            if row[0] == value and row[1] == metric:
                return row
        raise KeyError((value, metric))

    def mean(self, value, metric: str) -> float:
        return self.get(value, metric)[2]

    def metrics(self) -> list:
        return sorted({r[1] for r in self.rows})

    def write_csv(self, path) -> None:
        """CSV with ``#``-prefixed metadata lines followed by the rows."""
        with open(path, "w", newline="") as fh:
            for k in sorted(self.metadata):
                fh.write(f"# {k}: {self.metadata[k]}\n")
            wr = csv.writer(fh)
            wr.writerow(self.COLUMNS)
            for v, metric, mean, std, n in self.rows:
                wr.writerow([v, metric, repr(mean), repr(std), n])

    @classmethod
    def read_csv(cls, path) -> "ResultTable":
        meta, rows = {}, []
        with open(path) as fh:
            lines = fh.read().splitlines()
        body = []
        for line in lines:
            if line.startswith("# "):
                k, _, v = line[2:].partition(": ")
                meta[k] = v
            else:
                body.append(line)
        for rec in csv.DictReader(body):
            v = rec["sweep_value"]
            try:
                v = float(v)
            except ValueError:
                pass
            rows.append((v, rec["metric"], float(rec["mean"]), float(rec["std"]), int(rec["trials"])))
        return cls(rows, meta)


def trial_seed(base: int, trial: int) -> int:
    return int(base) ^ int(trial)


def _point_scenario(exp: Experiment, value):
    """Scenario, impairment and pilot count for one sweep value."""
    sc = exp.scenario
    imp = None
    pilots = exp.pilot_count
    snr_db = exp.snr_db
    if exp.axis == "snr_db":
        snr_db = float(value)
    elif exp.axis == "pilot_count":
        pilots = int(value)
    elif exp.axis == "impairment":
        name, scale = IMPAIRMENT_KINDS[exp.impairment]
        imp = ImpairmentConfig(**{name: float(value) * scale})
    elif exp.axis == "constellation":
        sc = Scenario(sc.config, sc.sources, preset_constellation(value), sc.rng_seed)
    if snr_db is not None:
        nv = noise_variance_for_snr(snr_db, symbol_power=sc.constellation.avg_power)
        sc = sc.with_noise(nv)
    return sc, imp, pilots


def _errors(dets, sources, cfg: OfdmConfig) -> dict:
    """Signed errors per parameter for each source (nan when missed)."""
    out = {p: np.full(len(sources), np.nan) for p in PARAMS}
    est = {p: np.full(len(sources), np.nan) for p in PARAMS}
    match = match_to_truth(dets, sources, cfg)
    for i, j in enumerate(match):
        if j < 0:
            continue
        d, s = dets[i], sources[j]
        est["delay"][j] = d.delay
        est["velocity"][j] = d.velocity(cfg)
        est["angle"][j] = np.rad2deg(d.angle)
        out["delay"][j] = d.delay - s.delay
        out["velocity"][j] = d.velocity(cfg) - s.velocity(cfg)
        out["angle"][j] = np.rad2deg(d.angle - s.angle)
    return {"err": out, "est": est, "match": match}


def run_trial(exp: Experiment, value, trial: int, base_seed: int = 0) -> dict:
    """One trial at one sweep value; returns raw per-method results."""
    sc, imp, pilots = _point_scenario(exp, value)
    sc = sc.with_seed(trial_seed(base_seed, trial))
    y, truth = synthesize(sc, imp)
    cfg = sc.config
    out = {}
    if "blind" in exp.methods:
        mu4 = sc.constellation.moment(4)
        rep = detect_all(y, exp.estimator.resolve(cfg, mu4))
        res = _errors(rep.detections, sc.sources, cfg)
        res["detected"] = rep.num_detected
        if exp.axis == "constellation" and 0 < rep.num_detected <= cfg.num_antennas:
            dem = demodulate(y, rep, sc.constellation)
            match = [m if m >= 0 else -1 for m in res["match"]]
            sers = score_against_truth(dem, truth.symbols, match)
            res["ser"] = float(np.nanmean(sers)) if np.isfinite(sers).any() else 1.0
        elif exp.axis == "constellation":
            res["ser"] = 1.0
        out["blind"] = res
    if "data_aided" in exp.methods:
        rep = data_aided_estimate(y, truth.symbols, exp.estimator.resolve(cfg))
        out["data_aided"] = _errors(rep.detections, sc.sources, cfg)
    if "pilot" in exp.methods:
        mask, spacing = comb_pilot_mask(cfg.num_subcarriers, pilots)
        rep = pilot_aided_estimate(y, mask, truth.symbols[:, :, 0], exp.estimator.resolve(cfg),
                                   spacing=spacing)
        # pilots belong to the first source only
        out["pilot"] = _errors(rep.detections[:1], sc.sources[:1], cfg)
    return out


def _aggregate(table: ResultTable, value, results: list, sources: int) -> None:
    for method in METHODS:
        per = [r[method] for r in results if method in r]
        if not per:
            continue
        for p in PARAMS:
            err = np.concatenate([r["err"][p] for r in per])
            est = np.concatenate([r["est"][p] for r in per])
            ok = np.isfinite(err)
            n = int(ok.sum())
            if n == 0:
                table.add(value, f"{method}_{p}_rmse", np.nan, np.nan, 0)
                continue
            e = err[ok]
            table.add(value, f"{method}_{p}_rmse", np.sqrt(np.mean(e**2)), np.std(np.abs(e)), n)
            table.add(value, f"{method}_{p}_bias", np.mean(e), np.std(e), n)
            table.add(value, f"{method}_{p}_mean", np.mean(est[ok]), np.std(est[ok]), n)
        if method == "blind":
            hit = np.array([r["detected"] == sources for r in per], float)
            table.add(value, "blind_detect", hit.mean(), hit.std(), hit.size)
            if "ser" in per[0]:
                s = np.array([r["ser"] for r in per])
                table.add(value, "blind_ser", s.mean(), s.std(), s.size)


def run_experiment(exp: Experiment, seed: int = 0, workers: int = 1) -> ResultTable:
    """Run every sweep point and aggregate into a :class:`ResultTable`."""
    table = ResultTable(metadata={"name": exp.name, "seed": seed, "config_hash": exp.config_hash(),
                                  "version": __version__, "axis": exp.axis,
                                  "schema_version": SCHEMA_VERSION})
    jobs = [(v, t) for v in exp.values for t in range(exp.trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_trial, exp, v, t, seed) for v, t in jobs]
            raw = [f.result() for f in futures]
    else:
        raw = [run_trial(exp, v, t, seed) for v, t in jobs]
    by_value = {}
    for (v, _), r in zip(jobs, raw):
        by_value.setdefault(v, []).append(r)
    for v in exp.values:
        _aggregate(table, v, by_value[v], len(exp.scenario.sources))
        if exp.axis == "snr_db":
            sc, _, _ = _point_scenario(exp, v)
            xi = sc.sources[0]
            snr = abs(xi.gain) ** 2 * sc.constellation.avg_power / sc.config.noise_variance
            r = crlb_data_aided(sc.config, snr, xi.angle).rmse()
            table.add(v, "crlb_delay", r["delay"], 0.0, 0)
            table.add(v, "crlb_velocity", r["velocity"], 0.0, 0)
            table.add(v, "crlb_angle", r["angle_deg"], 0.0, 0)
        log.info("sweep %s=%s done", exp.axis, v)
    return table
