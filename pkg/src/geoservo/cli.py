"""Command line entry point: ``servo run``, ``servo poses`` and ``servo ot-test``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .lie import Pose
from .sim import load_bundled_poses, load_config, run_servo, write_log
from .transport import compare_with_exact


def _read_pose_file(path) -> Pose:
    vals = np.array(Path(path).read_text().split(), dtype=float)
    if vals.size == 12:
        vals = np.concatenate([vals, [0.0, 0.0, 0.0, 1.0]])
    if vals.size != 16:
        raise SystemExit(f"{path}: expected 12 or 16 numbers for a pose matrix")
    return Pose.from_matrix(vals.reshape(4, 4), project=True)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.pose_matrix:
        cfg = replace(cfg, pose=None, pose_matrix=_read_pose_file(args.pose_matrix))
    elif args.pose is not None:
        cfg = replace(cfg, pose=args.pose, pose_matrix=None)
    if args.no_udc:
        cfg = replace(cfg, use_udc=False)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.max_steps is not None:
        cfg = replace(cfg, max_steps=args.max_steps)
    out_dir = Path(args.out or cfg.out_dir)
    t0 = time.perf_counter()
    traj = run_servo(cfg)
    path = write_log(traj, out_dir)
    last = traj.rows[-1]
    print(f"converged={traj.converged} steps={traj.steps} geodesic={last[2]:.4g} "
          f"wasserstein={traj.final_wasserstein:.4g} wall={time.perf_counter() - t0:.1f}s")
    print(f"log written to {path}")
    return 0 if traj.converged else 1


def cmd_poses(args) -> int:
    ps = load_bundled_poses()
    names = ["g1", "g2", "g3", "g4", "target"]
    poses = list(ps.initial) + [ps.target]
    np.set_printoptions(precision=6, suppress=True)
    for name, g in zip(names, poses):
        print(f"{name}: position {g.p} m, rotation correction {ps.correction[name]:.4f} (Frobenius)")
        print(g.matrix)
    return 0


def cmd_ot_test(args) -> int:
    t0 = time.perf_counter()
    rep = compare_with_exact(args.instances, args.seed, args.eps)
    ok_cost = rep.worst <= 0.01
    ok_mono = bool(np.all(rep.monotone))
    ok_same = rep.identical_distance <= 10 * rep.eps
    print(f"instances: {len(rep.relative_errors)}  eps: {rep.eps:g}  taus: {rep.taus}")
    print(f"worst relative error vs LP (tau={rep.taus[-1]:g}): {rep.worst:.3e}  {'ok' if ok_cost else 'FAIL'}")
    print(f"gap non-increasing in tau on {int(rep.monotone.sum())}/{len(rep.monotone)} instances  "
          f"{'ok' if ok_mono else 'FAIL'}")
    print(f"identical-cloud distance: {rep.identical_distance:.3e}  {'ok' if ok_same else 'FAIL'}")
    print(f"wall: {time.perf_counter() - t0:.1f}s")
    return 0 if (ok_cost and ok_mono and ok_same) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="servo", description="Geometric visual servoing with optimal transport")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one closed-loop experiment")
    r.add_argument("--config", default=None, help="run configuration (YAML); bundled default if omitted")
    g = r.add_mutually_exclusive_group()
    g.add_argument("--pose", type=int, choices=[1, 2, 3, 4], help="initial pose from the bundled set")
    g.add_argument("--pose-matrix", help="file holding a 4x4 (or 3x4) initial pose matrix")
    r.add_argument("--no-udc", action="store_true", help="disable the transport steering input")
    r.add_argument("--out", help="output directory")
    r.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    r.add_argument("--max-steps", type=int)
    r.set_defaults(func=cmd_run)

    sub.add_parser("poses", help="print the bundled initial and target poses").set_defaults(func=cmd_poses)

    o = sub.add_parser("ot-test", help="check Sinkhorn against the exact LP optimum")
    o.add_argument("--instances", type=int, default=50)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--eps", type=float, default=1e-3)
    o.set_defaults(func=cmd_ot_test)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        raise SystemExit("seed must be an unsigned 64-bit integer")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
