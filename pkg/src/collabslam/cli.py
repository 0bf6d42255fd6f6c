"""Command line: server, simulator, evaluation and verification replay.

Evaluation commands print CSV on stdout and a readable summary on stderr,
so ``collabslam eval ate ... > ate.csv`` keeps only the table.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import threading

import numpy as np


def _setup_logging(level: str):
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _csv(rows: list[dict], out=None):
    out = out or sys.stdout
    if not rows:
        return
    w = csv.DictWriter(out, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)


def _note(*a):
    print(*a, file=sys.stderr)


# -- serve -------------------------------------------------------------------

def cmd_serve(args):
    from .place_recognition import Vocabulary
    from .server import ServerConfig, load_config, serve
    cfg = load_config(args.config) if args.config else ServerConfig()
    if args.export_dir:
        cfg.export_dir = args.export_dir
    vocab_path = args.vocab or cfg.vocabulary
    if not vocab_path:
        _note("error: a vocabulary is required (--vocab or [server] vocabulary)")
        return 2
    serve(args.bind, cfg, Vocabulary.load(vocab_path))
    return 0


def cmd_process(args):
    """Offline, deterministic equivalent of serving the given logs."""
    from .map_manager import MapRegistry
    from .place_recognition import Vocabulary
    from .server import ServerConfig, load_config, process_log_files
    cfg = load_config(args.config) if args.config else ServerConfig()
    reg = MapRegistry(Vocabulary.load(args.vocab), cfg.manager)
    process_log_files(reg, args.logs)
    paths = reg.export_all(args.export_dir)
    with open(os.path.join(args.export_dir, "stats.json"), "w") as f:
        json.dump({"summary": reg.summary(), "stats": reg.stats.snapshot()}, f, indent=1, default=str)
    _note(json.dumps(reg.summary(), default=str))
    _note(f"wrote {len(paths) + 1} files to {args.export_dir}")
    return 0


# -- sim ---------------------------------------------------------------------

def cmd_sim_generate(args):
    from .place_recognition import train_vocabulary
    from .simulator import Scenario, default_scenario, generate, vocabulary_corpus, write_outputs
    if args.scenario:
        sc = Scenario.load(args.scenario)
    else:
        sc = default_scenario(args.agents, args.seed, tracking_camera_agent=args.tracking_camera)
    streams, truth = generate(sc)
    vocab = None
    if not args.no_vocab:
        vocab = train_vocabulary(vocabulary_corpus(streams, seed=sc.seed), seed=sc.seed)
    summary = write_outputs(args.out, sc, streams, truth, vocab)
    _csv([{"agent": a, **{k: v for k, v in s.items() if k != "odom_frame"}} for a, s in summary["agents"].items()])
    _note(f"{len(streams)} agents written to {args.out}")
    return 0


def cmd_sim_scenario(args):
    from .simulator import default_scenario
    default_scenario(args.agents, args.seed, tracking_camera_agent=args.tracking_camera).save(args.out)
    _note(f"scenario written to {args.out}")
    return 0


def cmd_sim_play(args):
    from .errors import ConnectionLost
    from .simulator import play
    from .wire import read_log_frames
    reports, errors = {}, {}

    def run(path):
        try:
            reports[path] = play(read_log_frames(path), args.server, args.rate)
        except ConnectionLost as e:
            errors[path] = str(e)
            reports[path] = e.report

    threads = [threading.Thread(target=run, args=(p,)) for p in args.log]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    rows = []
    for p in args.log:
        r = reports[p]
        rows.append({"log": p, "frames_sent": r.frames_sent, "frames_total": r.frames_total,
                     "bytes_sent": r.bytes_sent, "wall_time_s": f"{r.wall_time_s:.3f}", "error": errors.get(p, "")})
    _csv(rows)
    return 1 if errors else 0


# -- eval --------------------------------------------------------------------

def cmd_eval_ate(args):
    from .evaluation import align_se3, ate_rmse, concat, read_tum
    if len(args.est) != len(args.gt):
        _note("error: --est and --gt need the same number of files")
        return 2
    est = [read_tum(p) for p in args.est]
    gt = [read_tum(p) for p in args.gt]
    rows = []
    for pe, pg, e, g in zip(args.est, args.gt, est, gt):
        a = align_se3(e, g, args.tolerance)
        rows.append({"estimate": pe, "ground_truth": pg, "pairs": len(a.est_index),
                     "ate_rmse_m": f"{ate_rmse(a):.6f}"})
    if len(est) > 1:
        a = align_se3(concat(est), concat(gt), args.tolerance)
        rows.append({"estimate": "joint", "ground_truth": "joint", "pairs": len(a.est_index),
                     "ate_rmse_m": f"{ate_rmse(a):.6f}"})
    _csv(rows)
    for r in rows:
        _note(f"{r['estimate']}: ATE {float(r['ate_rmse_m']):.4f} m over {r['pairs']} poses")
    return 0


def cmd_eval_compare(args):
    from .evaluation import compare, concat, read_tum
    if len(args.before) != len(args.after) or (args.gt and len(args.gt) != len(args.before)):
        _note("error: --before, --after (and --gt) need the same number of files")
        return 2
    before = concat([read_tum(p) for p in args.before])
    after = concat([read_tum(p) for p in args.after])
    gt = concat([read_tum(p) for p in args.gt]) if args.gt else None
    res = compare(before, after, gt)
    _csv([{k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in res.items()}])
    if gt is not None:
        _note(f"ATE before {res['ate_before']:.4f} m, after {res['ate_after']:.4f} m "
              f"({100 * res['improvement']:.1f}% lower)")
    _note(f"poses moved {res['mean_shift']:.4f} m on average, {res['max_shift']:.4f} m at most")
    return 0


def cmd_eval_loops(args):
    from .evaluation import read_loop_log, summarize_loops
    rows = read_loop_log(args.log)
    s = summarize_loops(rows)
    _csv([s])
    if rows:
        _note(f"{s['loops']} loops ({s['fusions']} fusions), inliers median {s['inliers_median']:.0f} "
              f"[{s['inliers_min']}, {s['inliers_max']}], covariance trace median {s['cov_trace_median']:.3e}")
    else:
        _note("no loops in log")
    return 0


# -- solve-loop --------------------------------------------------------------

def cmd_solve_loop(args):
    from .evaluation import describe_pose, replay_verification
    from .geometry import Pose, pose_error
    from .relpose.verify import load_job
    job = load_job(args.job)
    out = replay_verification(job, args.inject_outliers)
    row = {"accepted": out.accepted, "reason": out.reason}
    if out.accepted:
        T = out.result.T_cq
        row.update({"inliers": out.result.n_inliers, "tx": f"{T.p[0]:.6f}", "ty": f"{T.p[1]:.6f}",
                    "tz": f"{T.p[2]:.6f}", "rotation_deg": f"{np.rad2deg(pose_error(T, Pose.identity())[0]):.6f}",
                    "covariance_trace": f"{np.trace(out.constraint.covariance):.6e}"})
    for stage in ("matching", "prefilter", "ransac", "covariance"):
        row[f"{stage}_ms"] = f"{1e3 * out.timings.get(stage, float('nan')):.3f}"
    _csv([row])
    if out.accepted:
        _note(f"accepted: {out.result.n_inliers} inliers, {describe_pose(out.result.T_cq)}")
        if job.recorded:
            rec = np.array(job.recorded["T_cq"])
            d = pose_error(out.result.T_cq, Pose(rec[:4], rec[4:]))
            _note(f"recorded result differs by {d[0]:.3e} rad / {d[1]:.3e} m")
    else:
        _note(f"rejected: {out.reason}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="collabslam", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the back-end server")
    p.add_argument("--bind", default="0.0.0.0:7878", help="host:port")
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--vocab", help="vocabulary file (overrides the config)")
    p.add_argument("--export-dir", help="write trajectories, loops and graphs here on shutdown")
    p.add_argument("--log-level", dest="sub_log_level", choices=["debug", "info", "warning", "error"])
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("process", help="ingest message logs offline in timestamp order")
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--config")
    p.add_argument("--export-dir", required=True)
    p.set_defaults(func=cmd_process)

    sim = sub.add_parser("sim", help="synthetic agents").add_subparsers(dest="sim_command", required=True)
    p = sim.add_parser("generate", help="generate message logs and ground truth")
    p.add_argument("--scenario", help="scenario JSON; the default scenario is used if omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--agents", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tracking-camera", type=int, default=None, metavar="AGENT_ID",
                   help="give this agent the tracking-camera profile")
    p.add_argument("--no-vocab", action="store_true", help="skip vocabulary training")
    p.set_defaults(func=cmd_sim_generate)
    p = sim.add_parser("scenario", help="write the default scenario file for editing")
    p.add_argument("--out", required=True)
    p.add_argument("--agents", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tracking-camera", type=int, default=None, metavar="AGENT_ID")
    p.set_defaults(func=cmd_sim_scenario)
    p = sim.add_parser("play", help="stream message logs to a server")
    p.add_argument("--log", nargs="+", required=True)
    p.add_argument("--server", required=True, help="host:port")
    p.add_argument("--rate", type=float, default=1.0, help="realtime factor, 0 = as fast as possible")
    p.set_defaults(func=cmd_sim_play)

    ev = sub.add_parser("eval", help="trajectory and loop evaluation").add_subparsers(dest="eval_command",
                                                                                      required=True)
    p = ev.add_parser("ate", help="absolute trajectory error after SE(3) alignment")
    p.add_argument("--est", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--tolerance", type=float, default=0.05, help="pairing tolerance in seconds")
    p.set_defaults(func=cmd_eval_ate)
    p = ev.add_parser("compare", help="before/after optimization statistics")
    p.add_argument("--before", nargs="+", required=True)
    p.add_argument("--after", nargs="+", required=True)
    p.add_argument("--gt", nargs="+")
    p.set_defaults(func=cmd_eval_compare)
    p = ev.add_parser("loops", help="summarize a loop log CSV")
    p.add_argument("--log", required=True)
    p.set_defaults(func=cmd_eval_loops)

    p = sub.add_parser("solve-loop", help="replay a dumped verification job")
    p.add_argument("--job", required=True)
    p.add_argument("--inject-outliers", type=float, default=0.0, metavar="P")
    p.set_defaults(func=cmd_solve_loop)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(getattr(args, "sub_log_level", None) or args.log_level)
    from .errors import CollabSlamError
    try:
        return args.func(args)
    except (CollabSlamError, OSError, ValueError) as e:
        _note(f"error: {type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
