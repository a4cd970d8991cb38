"""
Command-line front end: ``blindisac {simulate,estimate,demod,sweep,design,crlb}``.

Exit codes: 0 on success, 2 for configuration or input errors, 3 for
numerical failures such as a rank-deficient mixing matrix.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bounds import write_crlb_table
from .core import OfdmConfig, load_constellation, qpsk
from .design import (DesignWeights, optimize, preset_constellation, preset_design, preset_weights,
                     save_design)
from .harness import EstimatorSettings, load_experiment, run_experiment
from .hos import detect_all, export_heatmaps, hos_periodogram, report_from_dict, report_to_dict
from .separation import (RankDeficiencyError, demodulate, match_to_truth, save_demod_report,
                         score_against_truth)
from .waveform import (ImpairmentConfig, config_from_dict, load_scenario, load_tensor, save_tensor,
                       scenario_from_dict, scenario_to_dict, synthesize)

log = logging.getLogger("blindisac")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


def _read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc


def _global_config(args) -> dict:
    return _read_json(args.config) if args.config else {}


def _constellation(spec: str | None):
    if spec is None or spec == "qpsk":
        return qpsk()
    try:
        return preset_constellation(spec)
    except KeyError:
        return load_constellation(spec)


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc = sc.with_seed(args.seed)
    imp = ImpairmentConfig(args.timing_offset_ns * 1e-9, args.cfo, np.deg2rad(args.phase_offset_deg))
    y, truth = synthesize(sc, imp if imp.active else None)
    out = _out(args, "tensor.bin")
    save_tensor(y, out, extra={"seed": sc.rng_seed})
    stem = out.with_suffix("")
    np.save(f"{stem}.symbols.npy", truth.indices)
    doc = {"scenario": scenario_to_dict(sc), "impairments": vars(imp),
           "symbol_indices": f"{stem.name}.symbols.npy"}
    Path(f"{stem}.truth.json").write_text(json.dumps(doc, indent=2))
    print(f"wrote {out} shape {y.data.shape}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    y, _ = load_tensor(args.tensor)
    settings = EstimatorSettings.from_dict(_global_config(args).get("estimator", {}))
    if args.threshold is not None:
        settings = EstimatorSettings(**{**settings.__dict__, "threshold": args.threshold})
    c = _constellation(args.constellation)
    est = settings.resolve(y.config, c.moment(4))
    spectrum = hos_periodogram(y.data**4, est, workers=args.threads or -1)
    if args.heatmaps:
        # before detection, which cancels accepted peaks from the spectrum
        export_heatmaps(spectrum, y.config, est, args.heatmaps)
    rep = detect_all(y, est, spectrum=spectrum)
    out = _out(args, "estimate.json")
    out.write_text(json.dumps(report_to_dict(rep, y.config, est), indent=2))
    print(f"{rep.num_detected} source(s) detected; report in {out}")
    return EXIT_OK


def cmd_demod(args) -> int:
    y, _ = load_tensor(args.tensor)
    rep = report_from_dict(_read_json(args.report))
    if rep.num_detected == 0:
        raise ConfigError("report has no detections to demodulate")
    c = _constellation(args.constellation)
    result = demodulate(y, rep, c)
    if args.truth:
        tdoc = _read_json(args.truth)
        sc = scenario_from_dict(tdoc["scenario"])
        idx = np.load(Path(args.truth).parent / tdoc["symbol_indices"])
        truth_symbols = sc.constellation.points[idx]
        score_against_truth(result, truth_symbols, match_to_truth(rep.detections, sc.sources, sc.config))
    for w in result.warnings:
        log.warning(w)
    out = _out(args, "demod.json")
    save_demod_report(result, out, args.symbols_out)
    print(f"demodulated {result.betas.size} stream(s); report in {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    exp = load_experiment(args.experiment)
    table = run_experiment(exp, seed=args.seed or 0, workers=args.threads or 1)
    out = _out(args, exp.output or f"{exp.name}.csv")
    table.write_csv(out)
    print(f"{len(table.rows)} rows written to {out}")
    return EXIT_OK


def cmd_design(args) -> int:
    if args.preset:
        w = preset_weights(args.preset)
    elif args.weights:
        w = DesignWeights(*args.weights)
    else:
        raise ConfigError("give --preset or --weights")
    seed = args.seed or 0
    if args.preset and args.budget is None and args.min_rotation is None:
        result = preset_design(args.preset, seed=seed)
    else:
        result = optimize(None, w, budget=args.budget or 120_000, seed=seed,
                          min_rotation=args.min_rotation)
    out = _out(args, "constellation.json")
    side = save_design(result, out, w)
    m = result.metrics
    print(f"d_min={m.d_min:.4f} |E[X^4]|={abs(m.fourth_moment):.4f} "
          f"d_rot={m.d_rot_quarter:.4f}; wrote {out} and {side}")
    return EXIT_OK


def cmd_crlb(args) -> int:
    cfg_doc = _global_config(args).get("grid")
    if cfg_doc is not None:
        cfg = config_from_dict(cfg_doc)
    elif args.grid == "full":
        cfg = OfdmConfig.full_grid()
    else:
        cfg = OfdmConfig.desk_grid()
    out = _out(args, "crlb.csv")
    write_crlb_table(cfg, args.snr_db, np.deg2rad(args.theta_deg), out)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    def globals_parser(default):
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--seed", type=int, default=default, help="base random seed")
        g.add_argument("--threads", type=int, default=default, help="worker threads/processes")
        g.add_argument("--out", default=default, help="output path")
        g.add_argument("--config", default=default, help="JSON with 'grid' and/or 'estimator' sections")
        g.add_argument("-v", "--verbose", action="store_true", default=False if default is None else default)
        return g

    # flags may appear before or after the subcommand; the subcommand copy must not reset them
    top = globals_parser(None)
    common = globals_parser(argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="blindisac", parents=[top],
                                description="Blind OFDM sensing and demodulation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="synthesize a received tensor")
    s.add_argument("scenario")
    s.add_argument("--timing-offset-ns", type=float, default=0.0)
    s.add_argument("--cfo", type=float, default=0.0, help="carrier offset in Hz")
    s.add_argument("--phase-offset-deg", type=float, default=0.0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", parents=[common], help="blind delay/Doppler/angle estimation")
    s.add_argument("tensor")
    s.add_argument("--constellation", default=None, help="qpsk, preset name or constellation file")
    s.add_argument("--threshold", type=float, default=None)
    s.add_argument("--heatmaps", default=None, help="prefix for heatmap CSV files")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("demod", parents=[common], help="separate and demodulate streams")
    s.add_argument("tensor")
    s.add_argument("report")
    s.add_argument("--constellation", default=None)
    s.add_argument("--truth", default=None, help="truth sidecar written by simulate")
    s.add_argument("--symbols-out", default=None, help="CSV dump of sliced indices")
    s.set_defaults(func=cmd_demod)

    s = sub.add_parser("sweep", parents=[common], help="run a Monte-Carlo experiment file")
    s.add_argument("experiment")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("design", parents=[common], help="optimize a twin-ring APSK constellation")
    s.add_argument("--preset", default=None, help="balanced, comm or sensing")
    s.add_argument("--weights", type=float, nargs=5, default=None, metavar=("WD", "W4", "WR", "W1", "W2"))
    s.add_argument("--budget", type=int, default=None)
    s.add_argument("--min-rotation", type=float, default=None)
    s.set_defaults(func=cmd_design)

    s = sub.add_parser("crlb", parents=[common], help="tabulate Cramér-Rao bounds")
    s.add_argument("--snr-db", type=float, nargs="+", default=[0, 5, 10, 15, 20])
    s.add_argument("--theta-deg", type=float, default=0.0)
    s.add_argument("--grid", choices=("full", "desk"), default="desk",
                   help="preset grid when --config has no 'grid' section")
    s.set_defaults(func=cmd_crlb)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, FileNotFoundError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RankDeficiencyError, FloatingPointError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
