"""Compare the numba kernels against the plain numpy fallback.

Each backend runs in its own subprocess because the backend is fixed at
import time (GEOSERVO_DISABLE_NUMBA=1 selects numpy).

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def best_of(fn, repeat):
    fn()                                   # warm-up, includes JIT compilation
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def workload(repeat):
    from scipy.spatial.distance import cdist

    from geoservo._accel import backend_name
    from geoservo.camera import raycast_depths
    from geoservo.port_hamiltonian import PhaseState, integrate_step, task_terms
    from geoservo.sim import Servo, build_scene, load_config, solve_setup
    from geoservo.transport import sinkhorn_unbalanced

    cfg = load_config()
    m, target, _q_star, q0 = solve_setup(cfg)
    scene = build_scene(cfg, target.g_star)
    s = PhaseState.from_joint(m, q0, np.linspace(-0.2, 0.2, m.n))

    rng = np.random.default_rng(0)
    X, Y = rng.random((200, 3)), rng.random((180, 3))
    a, b = np.full(200, 1 / 200), np.full(180, 1 / 180)
    C = cdist(X, Y) ** 2

    servo = Servo(cfg, m, target, scene, np.random.default_rng(0))
    rest = PhaseState.at_rest(m, q0)
    timings = {
        "sinkhorn 200x180": best_of(lambda: sinkhorn_unbalanced(a, b, C, 1e-2, 1.0), repeat),
        "raycast 32x24": best_of(lambda: raycast_depths(scene, cfg.camera, s.g), repeat),
        "task_terms": best_of(lambda: task_terms(m, s), repeat),
        "integrate_step": best_of(lambda: integrate_step(m, s, np.zeros(m.n), cfg.dt), repeat),
        "full control update": best_of(lambda: servo.full_update(rest), repeat),
    }
    return backend_name(), timings


def run_backend(disable, repeat):
    env = dict(os.environ)
    env.pop("GEOSERVO_DISABLE_NUMBA", None)
    if disable:
        env["GEOSERVO_DISABLE_NUMBA"] = "1"
    cmd = [sys.executable, __file__, "--worker", "--repeat", str(repeat)]
    out = subprocess.run(cmd, env=env, check=True, capture_output=True, text=True).stdout
    return json.loads(out.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.worker:
        backend, timings = workload(args.repeat)
        print(json.dumps({"backend": backend, "timings": timings}))
        return

    fast = run_backend(False, args.repeat)
    slow = run_backend(True, args.repeat)
    print(f"{'kernel':<22}{fast['backend']:>12}{slow['backend']:>12}{'speedup':>10}")
    for name, t_fast in fast["timings"].items():
        t_slow = slow["timings"][name]
        print(f"{name:<22}{1e3 * t_fast:>10.3f}ms{1e3 * t_slow:>10.3f}ms{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()
