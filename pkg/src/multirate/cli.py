"""Command-line scenario runner.

    multirate run <config> [--out DIR]
    multirate baseline <config> --rate HZ
    multirate compare <dir> <dir> ...

``<config>`` is a TOML file or a bundled scenario name. Each run writes
``trace.csv``, ``report.txt``, ``meta.json``, ``config.toml`` and ``plots/`` into
its own timestamped directory under ``--out`` (or ``$MULTIRATE_OUT``, or
``./runs``). Exit codes: 0 finished, 1 invalid input, 2 infeasible at runtime.
"""

import argparse
import datetime
import json
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from . import plots, sets
from ._jit import backend_name
from .mpc import MpcError
from .sim import CSV_HEADER, TraceLog, run_closed_loop, summarize

log = logging.getLogger("multirate")

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 1, 2


class SchemaMismatch(ValueError):
    pass


def _out_root(arg):
    return arg or os.environ.get("MULTIRATE_OUT") or "runs"


def _run_dir(root, name, seedless):
    if seedless:
        path = os.path.join(root, name)
    else:
        stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        path = os.path.join(root, f"{name}_{stamp}")
    os.makedirs(os.path.join(path, "plots"), exist_ok=True)
    return path


def _load(args):
    cfg = cfgmod.load(args.config)
    over = {}
    if args.dt_low is not None:
        if not args.dt_low > 0:
            raise cfgmod.ConfigError("--dt-low", "must be positive")
        over["low_level_hz"] = 1.0 / args.dt_low
    if args.duration is not None:
        over["duration"] = args.duration
    if over:
        cfg = cfgmod.loads(cfgmod.dumps(cfgmod.with_overrides(cfg, **over)))
    return cfg


def _report_lines(kind, cfg, rep, summ, seedless):
    yield f"scenario: {cfg.name}"
    yield f"controller: {kind}"
    yield f"planner: {cfg.planner_hz:g} Hz, N = {cfg.N}; low level: {cfg.low_level_hz:g} Hz"
    yield f"duration: {cfg.duration:g} s ({summ['rows']} rows, final t = {summ['final_t']:.6g} s)"
    yield ""
    yield from rep.lines()
    yield ""
    yield f"goal error |x(T) - x_goal|: {summ['goal_error']:.6g}"
    yield f"position error |p_x(T) - p_goal|: {summ['position_error']:.6g} m"
    yield f"max |theta|: {summ['max_abs_theta']:.6g} rad"
    yield f"max e'Qe e: {1.0 - summ['min_h_e']:.6g}"
    if not seedless:
        yield ""
        for key, name in (("mpc", "MPC"), ("qp", "CLF-CBF QP")):
            n = summ[f"{key}_solves"]
            if n:
                yield (f"{name} solves: {n}, mean {1e3 * summ[f'{key}_mean_s']:.3f} ms, "
                       f"max {1e3 * summ[f'{key}_max_s']:.3f} ms")
        yield f"kernel backend: {backend_name()}"


def _execute(kind, cfg, sc, args):
    x0 = np.array(cfg.x_start)
    x_goal = np.array(cfg.x_goal)
    log.info("running %s (%s) for %g s", cfg.name, kind, cfg.duration)
    trace, rep = run_closed_loop(sc.plant, sc.pm, sc.planner, sc.low_level, sc.cfg.schedule(), x0,
                                 sc.monitor_sets, h_e=sc.h_e)
    summ = summarize(trace, x_goal)
    out = _run_dir(_out_root(args.out), sc.cfg.name, args.seedless)
    trace.to_csv(os.path.join(out, "trace.csv"))
    with open(os.path.join(out, "config.toml"), "w", encoding="utf-8") as fh:
        fh.write(cfgmod.dumps(sc.cfg))
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(_report_lines(kind, sc.cfg, rep, summ, args.seedless)) + "\n")
    meta = {"kind": kind, "scenario": sc.cfg.name, "theta_max": cfg.theta_max,
            "monitors": rep.as_dict(), "summary": summ, "backend": backend_name()}
    if args.seedless:
        # wall-clock timings differ between reruns
        meta["summary"] = {k: v for k, v in summ.items() if not k.endswith("_s")}
    else:
        meta["created"] = datetime.datetime.now().isoformat()
    with open(os.path.join(out, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    plots.trace_plots(trace, os.path.join(out, "plots"), cfg.theta_max, label=kind)
    print(out)
    for line in rep.lines():
        log.info(line)
    if rep.halted:
        print(f"halted: {rep.halt_reason}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_run(args):
    cfg = _load(args)
    sc = cfgmod.build(cfg)
    return _execute("multirate", cfg, sc, args)


def cmd_baseline(args):
    cfg = _load(args)
    sc = cfgmod.build_baseline(cfg, args.rate)
    log.info("baseline horizon N = %d", sc.cfg.N)
    return _execute(f"linear MPC only at {args.rate:g} Hz", cfg, sc, args)


def _read_run(path):
    csv_path = os.path.join(path, "trace.csv")
    with open(csv_path, encoding="utf-8") as fh:
        header = tuple(fh.readline().strip().split(","))
    if header != CSV_HEADER:
        raise SchemaMismatch(f"{csv_path}: unexpected columns")
    meta_path = os.path.join(path, "meta.json")
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    return TraceLog.from_csv(csv_path), meta


def compare_runs(paths):
    """Rows of ``(label, goal error, max|theta|, pass, mean/max MPC s, max|dx| vs first)``."""
    if len(paths) < 2:
        raise SchemaMismatch("compare needs at least two run directories")
    runs = [_read_run(p) for p in paths]
    ref = runs[0][0].x
    rows = []
    for p, (trace, meta) in zip(paths, runs):
        summ = meta.get("summary", {})
        x = trace.x
        x_goal = None
        if os.path.exists(os.path.join(p, "config.toml")):
            x_goal = np.array(cfgmod.load(os.path.join(p, "config.toml")).x_goal)
        goal_err = float(np.linalg.norm(x[-1] - x_goal)) if x_goal is not None else float("nan")
        diff = float(np.max(np.abs(x - ref))) if x.shape == ref.shape else float("nan")
        rows.append(dict(
            label=meta.get("kind", os.path.basename(os.path.normpath(p))),
            path=p, goal_error=goal_err, max_abs_theta=float(np.max(np.abs(x[:, 2]))),
            passed=meta.get("monitors", {}).get("passed"),
            mpc_mean_s=summ.get("mpc_mean_s", float("nan")),
            mpc_max_s=summ.get("mpc_max_s", float("nan")), max_diff=diff))
    return rows, [r[0] for r in runs]


def _format_table(rows):
    head = ("run", "goal err", "max|theta|", "pass", "MPC mean ms", "MPC max ms", "max|dx| vs 1st")
    lines = [" | ".join(head)]
    for r in rows:
        lines.append(" | ".join((
            r["label"], f"{r['goal_error']:.4g}", f"{r['max_abs_theta']:.4g}", str(r["passed"]),
            f"{1e3 * r['mpc_mean_s']:.3f}", f"{1e3 * r['mpc_max_s']:.3f}", f"{r['max_diff']:.3g}")))
    return "\n".join(lines)


def cmd_compare(args):
    rows, traces = compare_runs(args.dirs)
    table = _format_table(rows)
    print(table)
    out = _run_dir(_out_root(args.out), "compare", args.seedless)
    with open(os.path.join(out, "comparison.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    theta_max = None
    for p in args.dirs:
        meta_path = os.path.join(p, "meta.json")
        if os.path.exists(meta_path):
            with open(meta_path, encoding="utf-8") as fh:
                theta_max = theta_max or json.load(fh).get("theta_max")
    plots.overlay_plots(traces, [r["label"] for r in rows], os.path.join(out, "plots", "overlay.svg"),
                        theta_max)
    print(out)
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output root (default $MULTIRATE_OUT or ./runs)")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--seedless", action="store_true",
                        help="fixed directory name and no wall-clock data, for byte-identical reruns")
    sim_opts = argparse.ArgumentParser(add_help=False)
    sim_opts.add_argument("config", help="TOML file or bundled scenario name")
    sim_opts.add_argument("--dt-low", type=float, help="low-level period in seconds")
    sim_opts.add_argument("--duration", type=float, help="run length in seconds")

    p = argparse.ArgumentParser(prog="multirate", description="Multi-rate MPC + CLF-CBF runner")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common, sim_opts], help="run the multirate controller")
    r.set_defaults(func=cmd_run)
    b = sub.add_parser("baseline", parents=[common, sim_opts], help="run the planner alone")
    b.add_argument("--rate", type=float, required=True, help="planner rate in Hz")
    b.set_defaults(func=cmd_baseline)
    c = sub.add_parser("compare", parents=[common], help="tabulate and overlay finished runs")
    c.add_argument("dirs", nargs="+")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (cfgmod.ConfigError, SchemaMismatch, MpcError, sets.SetError, ValueError, OSError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
