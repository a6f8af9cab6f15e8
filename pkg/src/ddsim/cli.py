"""Command line entry point: ``ddsim run | compare | sweep``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, Mode, ScenarioConfig, load_config
from .metrics import CSV_HEADER, Comparison
from .simnet import InvariantError, Simulation

log = logging.getLogger("ddsim")

DEFAULT_SWEEP = tuple(range(50, 501, 50))


def _modes(mode: Mode) -> list:
    return [Mode.CENTRALIZED, Mode.DISTRIBUTED] if mode is Mode.BOTH else [mode]


def _run_one(cfg: ScenarioConfig, mode: Mode):
    sim = Simulation(cfg, mode)
    return sim.run(), sim.transcript


def _write_csv(path: Path, rows):
    path.write_text(CSV_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in rows))


def build_config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.mode is not None:
        changes["mode"] = Mode(args.mode)
    if args.devices is not None:
        changes["devices"] = args.devices
    return cfg.with_(**changes) if changes else cfg


def out_dir(args) -> Path:
    d = Path(args.out or os.environ.get("DDS_SIM_OUT") or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_run(args) -> int:
    cfg = build_config(args)
    out = out_dir(args)
    rows = []
    for mode in _modes(cfg.mode):
        metrics, transcript = _run_one(cfg, mode)
        rows.append(metrics)
        if args.transcript:
            transcript.dump(out / f"transcript-{mode.value}.tsv")
        print(metrics.csv_row())
    _write_csv(out / "metrics.csv", rows)
    return 0


def cmd_compare(args) -> int:
    cfg = build_config(args)
    out = out_dir(args)
    (c, tc), (d, td) = _run_one(cfg, Mode.CENTRALIZED), _run_one(cfg, Mode.DISTRIBUTED)
    if args.transcript:
        tc.dump(out / "transcript-centralized.tsv")
        td.dump(out / "transcript-distributed.tsv")
    cmp = Comparison(c, d)
    _write_csv(out / "compare.csv", [c, d])
    (out / "compare_deltas.csv").write_text(
        "metric,centralized,distributed,reduction_pct\n"
        f"cost_total_ms,{c.cost_of_operation_ms.total},{d.cost_of_operation_ms.total},"
        f"{cmp.cost_reduction_pct:.4f}\n"
        f"bytes,{c.comm_overhead.bytes},{d.comm_overhead.bytes},"
        f"{cmp.overhead_reduction_pct:.4f}\n")
    print(f"cost of operation reduction: {cmp.cost_reduction_pct:.2f}%")
    print(f"communication overhead reduction (bytes): {cmp.overhead_reduction_pct:.2f}%")
    return 0


def _sweep_point(cfg: ScenarioConfig, n: int, mode: Mode):
    return _run_one(cfg.with_(devices=n), mode)[0]


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    out = out_dir(args)
    points = [int(x) for x in args.points.split(",")] if args.points else list(DEFAULT_SWEEP)
    jobs = [(cfg, n, m) for n in points for m in _modes(cfg.mode)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            rows = list(ex.map(_sweep_point, *zip(*jobs)))
    else:
        rows = [_sweep_point(*j) for j in jobs]
    rows.sort(key=lambda r: (r.devices, r.mode))
    _write_csv(out / "sweep.csv", rows)
    for r in rows:
        print(r.csv_row())
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddsim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (
        ("run", cmd_run, "run the configured mode(s) and write metrics.csv"),
        ("compare", cmd_compare, "run both modes on one seed and report reductions"),
        ("sweep", cmd_sweep, "vary the device count and write sweep.csv"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=[m.value for m in Mode])
        sp.add_argument("--devices", type=int)
        sp.add_argument("--out", metavar="DIR", help="output directory (default $DDS_SIM_OUT or .)")
        sp.add_argument("--transcript", action="store_true", help="persist event transcripts")
        if name == "sweep":
            sp.add_argument("--points", help="comma separated device counts (default 50,100,...,500)")
            sp.add_argument("--jobs", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"ddsim: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ddsim: I/O error: {exc}", file=sys.stderr)
        return 1
    except InvariantError as exc:
        print(f"ddsim: invariant violated: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
