"""Command-line entry point.

Subcommands: simulate, estimate, differentiate, synth.  Failures print one
line ``rampmeter: error: <kind>: <location>: <message>`` to stderr and exit
with a nonzero status.  ``RAMPMETER_OUT`` overrides every output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dataio, harness
from .algediff import DiffConfig, IrregularSampling, DegenerateWindow, derivative_stream
from .config import Config, ConfigError, load_config
from .fd_estim import run_estimator
from .traffic_model import SimulationInstability

OUT_ENV = "RAMPMETER_OUT"

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_RUNTIME = 4


class CliError(Exception):
    def __init__(self, kind: str, msg: str, code: int = EXIT_INPUT):
        super().__init__(msg)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # keep usage errors on one line
        raise CliError("usage", message.replace("\n", " "), EXIT_USAGE)


def _out_dir(arg: Optional[str]) -> Path:
    path = Path(os.environ.get(OUT_ENV) or arg or ".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_simulate(args) -> int:
    cfg = load_config(args.scenario)
    sc = cfg.scenario
    if args.controller:
        sc = sc.with_controller(args.controller)
    if args.seed is not None:
        sc = replace(sc, noise=replace(sc.noise, seed=args.seed))
    result = harness.run(sc)
    out = _out_dir(args.out)
    dataio.write_trajectory(out / "trajectory.csv", result.trajectory)
    dataio.write_metrics(out / "metrics.txt", result.metrics)
    print(f"wrote {out / 'trajectory.csv'} and {out / 'metrics.txt'}")
    return 0


def cmd_estimate(args) -> int:
    cfg = load_config(args.config) if args.config else Config()
    det = cfg.detector
    data = dataio.read_detector_csv(args.detector_csv, l_eff=det.l_eff, lanes=det.lanes_divisor)
    result = run_estimator(data.t, data.density, data.speed, cfg.estimator)
    out = _out_dir(args.out)
    dataio.write_estimates(out / "estimates.csv", result.records)
    final = result.final()
    lines = [
        f"samples={len(result.records)}",
        f"accepted={result.accepted}",
        f"filled={data.filled}",
        f"rejection_rate={result.rejection_rate!r}",
    ]
    for reason, count in sorted(result.rejections.items()):
        lines.append(f"rejected_{reason}={count}")
    if final is not None:
        for key, val in zip(("a", "K", "rho_c", "v_f"), final):
            lines.append(f"{key}={val!r}")
    else:
        lines.append("uninformative=1")
    (out / "estimates_summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out / 'estimates.csv'}")
    return 0


def cmd_differentiate(args) -> int:
    t, y = dataio.read_column(args.csv, args.column)
    if len(t) < 2:
        raise CliError("input", f"{args.csv}: need at least two samples")
    cfg = DiffConfig(degree=args.degree, window=args.window, n=args.n, eval_point=args.eval_point)
    period = float(np.median(np.diff(t)))
    try:
        ests = [e for e in derivative_stream(t, y, cfg, period) if e is not None]
    except (IrregularSampling, DegenerateWindow) as exc:
        raise CliError("input", f"{args.csv}: {exc}") from None
    out = _out_dir(args.out)
    dataio.write_derivatives(out / "derivatives.csv", ests, args.degree)
    print(f"wrote {out / 'derivatives.csv'}")
    return 0


def synth_stream(cfg: Config, noise: float, seed: Optional[int] = None):
    """Simulate the scenario and sample the detector station; speed noise is multiplicative."""
    sc = cfg.scenario
    det = cfg.detector
    result = harness.run(sc)
    tr = result.trajectory
    every = det.period / (sc.dt * 3600.0)
    if abs(every - round(every)) > 1e-9 or round(every) < 1:
        raise CliError("config", "detector period must be a multiple of the simulation step")
    idx = np.arange(0, len(tr.t), int(round(every)))
    t = tr.t[idx] * 3600.0
    rho = tr.rho[idx, det.station_segment].copy()
    v = tr.v[idx, det.station_segment].copy()
    rng = np.random.default_rng(sc.noise.seed if seed is None else seed)
    if noise:
        v = v * (1.0 + noise * rng.standard_normal(len(v)))
    return t, rho, v


def cmd_synth(args) -> int:
    cfg = load_config(args.scenario)
    if args.noise < 0:
        raise CliError("usage", "--noise must be non-negative", EXIT_USAGE)
    t, rho, v = synth_stream(cfg, args.noise, args.seed)
    out = Path(args.out)
    if os.environ.get(OUT_ENV):
        out = _out_dir(None) / out.name
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    station = f"seg{cfg.detector.station_segment}"
    dataio.write_detector_csv(out, t, rho, v, station=station)
    truth = dataio.ground_truth(
        cfg.scenario.road.fd,
        cfg.detector.station_segment,
        {"noise": args.noise, "samples": len(t), "scenario": cfg.scenario.name},
    )
    sidecar = out.with_suffix(".truth.json")
    sidecar.write_text(json.dumps(truth, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out} and {sidecar}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rampmeter", description="Ramp-metering and diagram-estimation workbench")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run a scenario and write trajectory.csv, metrics.txt")
    s.add_argument("scenario")
    s.add_argument("--out", default=".")
    s.add_argument("--controller", choices=harness.CONTROLLERS)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="estimate diagram parameters from a detector CSV")
    e.add_argument("detector_csv")
    e.add_argument("--config")
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_estimate)

    d = sub.add_parser("differentiate", help="algebraic derivative of one CSV column")
    d.add_argument("csv")
    d.add_argument("--column", required=True)
    d.add_argument("--degree", type=int, choices=(1, 2), default=1)
    d.add_argument("--window", type=float, default=300.0, help="seconds (in the file's time unit)")
    d.add_argument("--n", type=int, default=3, help="extra integrations")
    d.add_argument("--eval-point", choices=("delay", "window_end"), default="delay")
    d.add_argument("--out", default=".")
    d.set_defaults(func=cmd_differentiate)

    y = sub.add_parser("synth", help="synthetic detector data from a simulation run")
    y.add_argument("scenario")
    y.add_argument("--noise", type=float, default=0.0, help="multiplicative speed noise sigma")
    y.add_argument("--seed", type=int)
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        kind, msg, code = exc.kind, str(exc), exc.code
    except ConfigError as exc:
        kind, msg, code = "config", str(exc), EXIT_INPUT
    except dataio.CsvFormatError as exc:
        kind, msg, code = "csv", str(exc), EXIT_INPUT
    except SimulationInstability as exc:
        kind, msg, code = "instability", str(exc), EXIT_RUNTIME
    except (ValueError, OSError) as exc:
        kind, msg, code = "input", str(exc), EXIT_INPUT
    msg = " ".join(msg.split())
    print(f"rampmeter: error: {kind}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
