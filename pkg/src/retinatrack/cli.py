"""``retinatrack`` command line: phantom, build-space, track, eval, simulate, bench.

Every command works inside a run directory, writes the fully resolved config
there as ``config.txt`` and exits with 0 on success, 2 on configuration or
usage errors and 3 on pipeline failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io, plotting
from . import phantom as ph
from .canonical import SpaceConstructionError, build_space, load_space, save_space
from .config import ConfigError, RunConfig, load_config
from .evaluation import (angular_errors, bench_stages, coverage_curve, edge_removal_sim,
                         noisy_grid_measurements, percentile_stats, robustness_noise_sim)
from .gaze import track_frame

log = logging.getLogger("retinatrack")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE = 0, 2, 3


class PipelineError(RuntimeError):
    pass


def _resolve_config(args) -> RunConfig:
    path = args.config
    run_cfg = Path(args.run) / "config.txt"
    if path is None and run_cfg.exists():
        path = run_cfg
    cfg = load_config(path, args.set or ())
    Path(args.run).mkdir(parents=True, exist_ok=True)
    run_cfg.write_text(cfg.to_text())
    return cfg


def _trial_targets(cfg: RunConfig, pattern: str, rng) -> list[ph.GazeAngle]:
    n = cfg.frames_per_trial
    if pattern == "grid":
        ticks = np.linspace(-cfg.range_deg, cfg.range_deg, cfg.target_grid)
        targets = [ph.GazeAngle(float(y), float(p)) for p in ticks[::-1] for y in ticks]
        return [targets[k % len(targets)] for k in range(n)]
    return ph.random_gazes(rng, n, cfg.range_deg)


def cmd_phantom(cfg: RunConfig, run: Path) -> None:
    cal = cfg.calibration
    phantom = ph.generate_phantom(cfg.seed, cfg.vessel_density, cfg.phantom_size,
                                  frame_size=cfg.frame_size, range_deg=cfg.range_deg, cal=cal)
    io.write_pgm(run / "phantom.pgm", phantom.intensity)

    def draw(rng):
        return ph.jittered_appearance(rng, cfg.gamma_jitter, cfg.noise_std, cfg.blur_max, cfg.vignette)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    aps = [draw(rng) for _ in range(cfg.grid_rows * cfg.grid_cols)]
    scan = ph.grid_scan(phantom, cal, aps, cfg.grid_rows, cfg.grid_cols, cfg.spacing_deg,
                        seed=cfg.seed, frame_size=cfg.frame_size)
    (run / "scan").mkdir(exist_ok=True)
    scan_entries = []
    for f, a in zip(scan.frames, aps):
        rel = f"scan/{f.frame_id}.pgm"
        io.write_pgm(run / rel, f.intensity)
        scan_entries.append(io.frame_entry(f, rel, "scan", a.as_dict()))

    trials = []
    for tid, (pattern, steer) in enumerate(cfg.trial_specs()):
        trng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, tid]))
        targets = _trial_targets(cfg, pattern, trng)
        seeds = np.random.SeedSequence([cfg.seed, 3, tid]).generate_state(len(targets))
        off = cal.steering_offset if steer else (0.0, 0.0)
        tdir = run / f"trial_{tid}"
        tdir.mkdir(exist_ok=True)
        entries = []
        for k, (g, s) in enumerate(zip(targets, seeds)):
            # with steering the hardware supplies `off`; the retina only sees the remainder
            seen = ph.GazeAngle(g.yaw - off[0], g.pitch - off[1])
            a = draw(trng)
            f = ph.render_frame(phantom, seen, cal, a, int(s), cfg.frame_size, frame_id=f"t{tid}_{k:04d}")
            f = ph.with_gaze(f, g)
            rel = f"trial_{tid}/frame_{k:04d}.pgm"
            io.write_pgm(run / rel, f.intensity)
            entries.append(io.frame_entry(f, rel, tid, a.as_dict()))
        trials.append({"trial_id": tid, "pattern": pattern, "steering": steer, "frames": entries})

    io.write_manifest(run / "manifest.json", {
        "seed": cfg.seed,
        "phantom": "phantom.pgm",
        "calibration": {"ppd_x": cal.ppd_x, "ppd_y": cal.ppd_y,
                        "steering_offset": list(cal.steering_offset)},
        "scan": {"rows": scan.rows, "cols": scan.cols, "central": scan.central,
                 "spacing_deg": cfg.spacing_deg, "edges": [list(e) for e in scan.edges],
                 "frames": scan_entries},
        "trials": trials,
    })
    print(f"wrote {len(scan.frames)} scan frames and {len(trials)} trials to {run}")


def _manifest(run: Path) -> dict:
    p = run / "manifest.json"
    if not p.exists():
        raise PipelineError(f"{p} not found; run 'retinatrack phantom' first")
    return io.read_manifest(p)


def cmd_build_space(cfg: RunConfig, run: Path) -> None:
    man = _manifest(run)
    scan = man["scan"]
    frames = [io.load_frame(run, e) for e in scan["frames"]]
    edges = [tuple(e) for e in scan["edges"]]
    cal = cfg.calibration
    t0 = time.perf_counter()
    try:
        b = build_space(frames, edges, scan["central"], cal, cfg.consensus, cfg.use_enhancement)
    except SpaceConstructionError as exc:
        lines = [f"  edge {k}: {edges[k][0]} -> {edges[k][1]}" for k in exc.failed_edges]
        raise PipelineError(f"{exc}; failed edges:\n" + "\n".join(lines)) from None
    elapsed = time.perf_counter() - t0
    save_space(b.space, run / "space.json")

    by_edge = {m.edge_index: m for m in b.measurements}
    truth = [ph.gaze_to_offset(f.true_gaze, cal) if f.true_gaze else (float("nan"),) * 2 for f in frames]
    rows = []
    for k, (a, c) in enumerate(edges):
        m = by_edge.get(k)
        tx, ty = truth[c][0] - truth[a][0], truth[c][1] - truth[a][1]
        if m is None:
            rows.append([k, a, c, "failed", float("nan"), float("nan"), 0.0, 0, tx, ty])
        else:
            rows.append([k, a, c, "ok", m.mu.dx, m.mu.dy, m.weight,
                         int(m.matches.retained(cfg.inlier_cut).sum()), tx, ty])
    io.write_csv(run / "edges.csv", ["edge", "from", "to", "status", "mu_x", "mu_y", "weight",
                                     "n_retained", "mu_true_x", "mu_true_y"], rows)
    plotting.plot_space(b.space, run / "space")
    print(f"built space: {len(b.space)} entries, {len(b.measurements)}/{len(edges)} edges, "
          f"{elapsed:.2f} s")


def _load_run_space(run: Path):
    p = run / "space.json"
    if not p.exists():
        raise PipelineError(f"{p} not found; run 'retinatrack build-space' first")
    return load_space(p)


def cmd_track(cfg: RunConfig, run: Path, trial=None) -> None:
    man = _manifest(run)
    space = _load_run_space(run)
    out = run / "results"
    out.mkdir(exist_ok=True)
    for t in man["trials"]:
        if trial is not None and t["trial_id"] != trial:
            continue
        frames = [io.load_frame(run, e) for e in t["frames"]]
        tcfg = cfg.tracker(steering=bool(t["steering"]))
        est = [track_frame(f, space, tcfg) for f in frames]
        path = out / f"track_trial{t['trial_id']}.csv"
        io.write_track_csv(path, frames, est)
        print(f"trial {t['trial_id']}: {sum(e.valid for e in est)}/{len(est)} valid -> {path}")


def cmd_eval(cfg: RunConfig, run: Path, results=None) -> None:
    paths = [Path(p) for p in results] if results else sorted((run / "results").glob("track_*.csv"))
    if not paths:
        raise PipelineError("no track CSVs to evaluate")
    per_trial, errors, rows = [], {}, []
    all_err, all_bad = [], 0
    for p in paths:
        est, truth, _ = io.read_track_csv(p)
        err, bad = angular_errors(est, truth)
        name = p.stem.replace("track_", "")
        if err.size == 0:
            rows.append([name, 0, bad] + [float("nan")] * 5)
            continue
        s = percentile_stats(err, bad)
        per_trial.append(s)
        errors[name] = err
        all_err.append(err)
        all_bad += bad
        rows.append([name, s.count, s.n_invalid, s.mean, s.std, s.e50, s.e75, s.e95])
    if all_err:
        s = percentile_stats(np.concatenate(all_err), all_bad)
        rows.append(["all", s.count, s.n_invalid, s.mean, s.std, s.e50, s.e75, s.e95])
    out = run / "results"
    out.mkdir(parents=True, exist_ok=True)
    io.write_csv(out / "stats.csv", ["trial", "count", "n_invalid", "mean", "std", "e50", "e75", "e95"], rows)
    if per_trial:
        table = coverage_curve(per_trial, cfg.coverage_thresholds)
        io.write_csv(out / "coverage.csv", ["threshold", "mean_coverage", "e95_coverage"], table.rows())
        plotting.plot_coverage(table, out / "coverage")
        plotting.plot_error_cdf(errors, out / "error_cdf")
    for r in rows:
        print(",".join(io.fmt(v) if isinstance(v, float) else str(v) for v in r))


def cmd_simulate(cfg: RunConfig, run: Path, kind: str) -> None:
    out = run / "results"
    out.mkdir(parents=True, exist_ok=True)
    cal = cfg.calibration
    if kind == "noise":
        rows = robustness_noise_sim(cfg.grid_rows, cfg.grid_cols, cal, cfg.noise_stds,
                                    cfg.sim_trials, cfg.seed, cfg.spacing_deg)
        io.write_csv(out / "simulate_noise.csv", ["noise_std", "max_node_error_mean", "max_node_error_std"],
                     [[r.noise_std, r.max_node_error_mean, r.max_node_error_std] for r in rows])
        plotting.plot_robustness(rows, out / "simulate_noise")
        for r in rows:
            print(f"{r.noise_std:5.1f} px: {r.max_node_error_mean:.3f} +/- {r.max_node_error_std:.3f} deg")
    else:
        graph, mu = noisy_grid_measurements(cfg.grid_rows, cfg.grid_cols, cfg.edge_noise_std,
                                            cfg.seed, cfg.spacing_deg, cal)
        rows = edge_removal_sim(graph, mu, cal)
        io.write_csv(out / "simulate_edge_removal.csv", ["edge", "from", "to", "connected", "max_shift_deg"],
                     [[r.edge_index, r.edge[0], r.edge[1], int(r.connected), r.max_shift_deg] for r in rows])
        plotting.plot_edge_removal(rows, out / "simulate_edge_removal")
        shifts = [r.max_shift_deg for r in rows if r.connected]
        print(f"{sum(r.connected for r in rows)}/{len(rows)} removals connected; "
              f"worst shift {max(shifts) if shifts else float('nan'):.4f} deg")


def cmd_bench(cfg: RunConfig, run: Path) -> None:
    man = _manifest(run)
    space = _load_run_space(run)
    entries = [e for t in man["trials"] for e in t["frames"]][:cfg.bench_frames]
    if not entries:
        raise PipelineError("no test frames in manifest")
    frames = [io.load_frame(run, e) for e in entries]
    res = bench_stages(frames, space, cfg.tracker(), min_frames=cfg.bench_frames)
    out = run / "results"
    out.mkdir(exist_ok=True)
    rows = [[k, v] for k, v in res.stage_ms.items()] + [["total", res.total_ms]]
    io.write_csv(out / "bench.csv", ["stage", "mean_ms"], rows)
    plotting.plot_latency(res.stage_ms, out / "bench")
    print(f"{res.n_frames} frames, {res.total_ms:.1f} ms/frame ({res.fps:.1f} fps)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run", required=True, type=Path, help="run directory")
    common.add_argument("--config", type=Path, help="key = value config file (default: RUN/config.txt)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="retinatrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="render phantom, grid scan and test trials")
    sub.add_parser("build-space", parents=[common], help="construct the canonical feature space")
    t = sub.add_parser("track", parents=[common], help="estimate gaze for test trials")
    t.add_argument("--trial", type=int, help="only this trial id")
    e = sub.add_parser("eval", parents=[common], help="error statistics and coverage curves")
    e.add_argument("--results", nargs="+", help="track CSVs (default: RUN/results/track_*.csv)")
    s = sub.add_parser("simulate", parents=[common], help="bundle-adjustment robustness studies")
    s.add_argument("--kind", choices=("noise", "edge-removal"), required=True)
    sub.add_parser("bench", parents=[common], help="per-stage latency")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run = Path(args.run)
    try:
        if args.command == "phantom":
            cmd_phantom(cfg, run)
        elif args.command == "build-space":
            cmd_build_space(cfg, run)
        elif args.command == "track":
            cmd_track(cfg, run, args.trial)
        elif args.command == "eval":
            cmd_eval(cfg, run, args.results)
        elif args.command == "simulate":
            cmd_simulate(cfg, run, args.kind)
        elif args.command == "bench":
            cmd_bench(cfg, run)
    except (PipelineError, ph.CoverageError, ValueError, OSError) as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


def entry_point() -> None:
    sys.exit(main())
