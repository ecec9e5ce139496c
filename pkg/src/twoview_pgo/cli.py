"""Command-line interface: ``twoview-pgo {synth,run,eval,graph,report}``.

Log verbosity comes from the ``TWOVIEW_PGO_LOG`` environment variable
(DEBUG, INFO, WARNING, ...).  Every printed number is computed by a library
call; the CLI only parses arguments and moves files.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import TwoViewPGOError
from .evaluation import align_6dof, associate, lc_edge_errors, rmse_ate
from .optimizer import optimize
from .pipeline import VARIANTS, PipelineConfig, run_scenario_frames
from .synth import KINDS, Scenario, SyntheticWorld

log = logging.getLogger("twoview_pgo")


def _configs(args):
    if args.config:
        return io.load_config(args.config)
    return PipelineConfig(), None, dict(io.EXTRA_KEYS)


def cmd_synth(args):
    _, sc, _ = _configs(args)
    sc = sc or Scenario()
    updates = {}
    if args.scenario:
        updates.update(kind=args.scenario, name=args.scenario)
    if args.seed is not None:
        updates["seed"] = args.seed
    sc = dataclasses.replace(sc, **updates)
    world = SyntheticWorld(sc)
    out = io.save_dataset(args.out, world)
    print(f"wrote {len(world)} frames of scenario {sc.kind!r} (seed {sc.seed}) to {out}")
    return 0


def cmd_run(args):
    cfg, _, extras = _configs(args)
    if args.variant:
        cfg = dataclasses.replace(cfg, variant=args.variant)
    if args.no_retrieval:
        cfg = dataclasses.replace(cfg, retrieval_enabled=False)
    seed = args.seed if args.seed is not None else extras["seed"]
    rate = args.adversarial_rate if args.adversarial_rate is not None else extras["adversarial_rate"]
    data = io.load_dataset(args.data)
    res = run_scenario_frames(data.frames(), data.scenario, data.groundtruth, cfg, rate, seed)

    if args.format == "kitti":
        io.write_kitti(args.out, res.estimates)
    else:
        io.write_tum(args.out, res.timestamps, res.estimates)
    if args.report:
        io.write_events(args.report, res.events)
    if args.graph:
        io.write_graph(args.graph, res.graph)

    gt = [data.groundtruth[f] for f in res.frames]
    loops = len(res.graph.loop_edges())
    print(f"keyframes {len(res.frames)}  loop edges {loops}  variant {cfg.variant}")
    if len(gt) >= 3:
        try:
            base, _ = rmse_ate(res.odometry, gt)
            ate, dec = rmse_ate(res.estimates, gt, baseline=base) if base > 0 else \
                (rmse_ate(res.estimates, gt)[0], None)
            line = f"rmse_ate odometry {base:.6f} m  optimized {ate:.6f} m"
            print(line + (f"  decrease {dec:.2f} %" if dec is not None else ""))
        except TwoViewPGOError as exc:
            log.warning("ATE not available: %s", exc)
    return 0


def cmd_eval(args):
    t_est, est = io.read_tum(args.est)
    t_ref, ref = io.read_tum(args.ref)
    baseline = None
    if args.baseline:
        t_b, b = io.read_tum(args.baseline)
        baseline, _ = rmse_ate(b, ref, t_b, t_ref)
    ate, dec = rmse_ate(est, ref, t_est, t_ref, baseline=baseline)
    print(f"rmse_ate {ate!r}")
    if dec is not None:
        print(f"baseline_ate {baseline!r}")
        print(f"percent_decrease {dec!r}")
    if args.graph:
        g = io.read_graph(args.graph)
        stamps = np.array([g.nodes[n].timestamp for n in g.ids()])
        i, j = associate(stamps, t_ref)
        gt = {g.ids()[a]: ref[b] for a, b in zip(i, j)}
        rows = []
        for e in g.loop_edges():
            if e.source in gt and e.target in gt:
                te, re = lc_edge_errors(e, gt)
                rows.append((type(e).__name__, e.source, e.target, te, re))
        print("edge source target trans_error rot_error_deg")
        for kind, s, t, te, re in rows:
            print(f"{kind} {s} {t} {float(te)!r} {float(np.degrees(re))!r}")
    return 0


def cmd_graph(args):
    g = io.read_graph(args.input)
    print(f"nodes {len(g.ids())}  edges {len(g.edges)}  loop edges {len(g.loop_edges())}")
    if args.optimize:
        cfg = io.load_config(args.config)[0] if args.config else PipelineConfig()
        est, rep = optimize(g, cfg.solver)
        g.set_estimates(est)
        print(rep.to_table())
    if args.out:
        io.write_graph(args.out, g)
    if args.trajectory:
        ids = g.ids()
        io.write_tum(args.trajectory, [g.nodes[n].timestamp for n in ids],
                     [g.nodes[n].estimate for n in ids])
    return 0


def cmd_report(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t_est, est = io.read_tum(args.est)
    t_ref, ref = io.read_tum(args.ref)
    i, j = associate(t_est, t_ref)
    G = align_6dof([est[k] for k in i], [ref[k] for k in j])
    cols = {"est": [G.act(est[k].t) for k in i]}
    if args.odometry:
        t_odo, odo = io.read_tum(args.odometry)
        oi, oj = associate(t_odo, t_ref)
        H = align_6dof([odo[k] for k in oi], [ref[k] for k in oj])
        by_ref = {b: H.act(odo[a].t) for a, b in zip(oi, oj)}
        cols["odometry"] = [by_ref.get(b, np.full(3, np.nan)) for b in j]
    with open(out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "gt_x", "gt_y", "gt_z"] +
                   [f"{c}_{a}" for c in cols for a in "xyz"])
        for r, b in enumerate(j):
            row = [repr(float(t_ref[b])), *map(repr, map(float, ref[b].t))]
            for c in cols:
                row += list(map(repr, map(float, cols[c][r])))
            w.writerow(row)
    written = ["trajectories.csv"]
    if args.report:
        events = io.read_events(args.report)
        keys = ["event", "node", "candidate", "source", "stage", "edge_kind"]
        with open(out / "events.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for e in events:
                w.writerow(["" if e.get(k) is None else e[k] for k in keys])
        written.append("events.csv")
    print("wrote " + ", ".join(str(out / f) for f in written))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twoview-pgo",
                                description="Two-view loop-closure pose-graph optimization")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset directory")
    s.add_argument("--scenario", choices=KINDS)
    s.add_argument("--config", help="flat config file (scenario.*, camera.*, synth_noise.*)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("run", help="run the pipeline on a dataset directory")
    r.add_argument("--data", required=True)
    r.add_argument("--config")
    r.add_argument("--variant", choices=VARIANTS)
    r.add_argument("--seed", type=int, help="matcher seed")
    r.add_argument("--adversarial-rate", type=float)
    r.add_argument("--no-retrieval", action="store_true")
    r.add_argument("--out", required=True, help="output trajectory")
    r.add_argument("--format", choices=("tum", "kitti"), default="tum")
    r.add_argument("--report", help="event trace output (NDJSON)")
    r.add_argument("--graph", help="final pose graph output (graph text)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="RMSE ATE and loop-edge errors")
    e.add_argument("--est", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--baseline", help="trajectory for the percent-decrease baseline")
    e.add_argument("--graph", help="graph text file whose loop edges are scored")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("graph", help="load, optionally optimize, and dump a graph text file")
    g.add_argument("--in", dest="input", required=True)
    g.add_argument("--config")
    g.add_argument("--optimize", action="store_true")
    g.add_argument("--out")
    g.add_argument("--trajectory", help="write node estimates as TUM")
    g.set_defaults(func=cmd_graph)

    rp = sub.add_parser("report", help="plot-ready CSV of trajectories and events")
    rp.add_argument("--est", required=True)
    rp.add_argument("--ref", required=True)
    rp.add_argument("--odometry")
    rp.add_argument("--report", help="event trace (NDJSON) to tabulate")
    rp.add_argument("--out", required=True, help="output directory")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    level = os.environ.get("TWOVIEW_PGO_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TwoViewPGOError, OSError, ValueError) as exc:
        print(f"twoview-pgo {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
