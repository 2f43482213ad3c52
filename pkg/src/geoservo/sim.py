"""Closed-loop visual servo experiments.

One run renders the target view once, then repeatedly reads the state,
evaluates energy shaping, damping injection and the transport-driven
steering input, applies the summed torques and integrates the dynamics
until the end effector is within ``epsilon_converge`` of the target pose.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .camera import CameraModel, EmptyViewError, Scene, render_depth
from .control import (Gains, TargetState, check_matching, desired_hamiltonian, lyapunov_rate,
                      u_damping, u_energy_shaping)
from .lie import Pose, exp_twist, geodesic_distance, log_pose, nearest_rotation, position_distance, rotation_distance
from .port_hamiltonian import PhaseState, hamiltonian, integrate_step, task_terms
from .robot import (RobotModel, SingularityError, body_jacobian, forward_kinematics, inverse_kinematics,
                    load_robot, reference_robot, sigma_min)
from .transport import (DepthCloud, ground_cost, gramians_at, relative_eps, sinkhorn_unbalanced,
                        transport_map, u_dc, write_cloud)

log = logging.getLogger(__name__)

DEFAULT_CONFIG = Path(__file__).parent / "data" / "default_run.yaml"

# Poses as printed (two decimals, so the rotation blocks are only nearly orthogonal).
PRINTED_POSES = {
    "g1": [[-0.63, -0.47, -0.61, -0.16], [-0.25, 0.88, -0.42, 0.49], [0.73, -0.11, -0.67, 0.34]],
    "g2": [[0.05, -0.816, -0.58, -0.07], [-0.85, 0.27, -0.45, 0.54], [0.52, 0.51, -0.68, 0.15]],
    "g3": [[-0.18, -0.62, -0.76, -0.1], [-0.98, 0.2, -0.08, 0.34], [0.1, 0.76, -0.64, 0.31]],
    "g4": [[0.28, 0.25, -0.93, -0.05], [0.65, 0.66, 0.38, 0.21], [0.7, -0.71, 0.03, 0.06]],
    "target": [[0.01, 0.07, -1.0, -0.27], [0.01, 1.0, 0.07, 0.31], [1.0, -0.01, 0.01, 0.038]],
}


class DivergenceError(RuntimeError):
    def __init__(self, step: int, distance: float, limit: float):
        self.step = step
        super().__init__(f"geodesic distance {distance:.4g} exceeded {limit:.4g} at step {step}")


class UnreachablePoseError(ValueError):
    pass


@dataclass(frozen=True)
class PoseSet:
    initial: tuple          # four projected initial poses
    target: Pose
    printed: dict           # raw printed 3x4 blocks
    correction: dict        # ||R - R_printed||_F per pose


def load_bundled_poses() -> PoseSet:
    """The four initial poses and the target with rotations projected onto SO(3)."""
    projected, corr = {}, {}
    for name, rows in PRINTED_POSES.items():
        A = np.array(rows, dtype=float)
        R = nearest_rotation(A[:, :3])
        projected[name] = Pose(R, A[:, 3])
        corr[name] = float(np.linalg.norm(R - A[:, :3]))
    return PoseSet(tuple(projected[k] for k in ("g1", "g2", "g3", "g4")), projected["target"],
                   {k: np.array(v) for k, v in PRINTED_POSES.items()}, corr)


# ------------------------------------------------------------------ config


@dataclass(frozen=True, eq=False)
class RunConfig:
    robot: str | None = None                 # robot YAML; None for the bundled arm
    gains: Gains = field(default_factory=Gains)
    eps: float = 1e-2                        # relative to the median ground cost
    tau: float = 1.0
    p: float = 2.0
    dt: float = 1e-3
    epsilon_converge: float = 1e-2
    max_steps: int = 60000
    pose: int | None = 1                     # 1..4, or None with pose_matrix
    pose_matrix: Pose | None = None
    out_dir: str = "runs"
    torque_limit: float = 50.0
    use_udc: bool = True
    controller: bool = True                  # False applies zero torque (free dynamics)
    udc_gain: float = 1.0
    udc_receding: bool = True                # re-plan the steering horizon at every update
    control_period: int = 10                 # integrator steps per control update
    ot_period: int = 10                      # control updates per transport refresh
    pinv_damping: float = 1e-3
    gramian_steps: int = 16
    gramian_increment: float = 0.05
    sinkhorn_max_iter: int = 5000
    sinkhorn_tol: float = 1e-7
    divergence_factor: float = 10.0
    continuation_steps: int = 80
    q_star_seed: tuple = (0.0,) * 6
    seed: int = 0
    depth_noise: float = 0.0
    scene: Scene | dict | None = None
    camera: CameraModel = field(default_factory=CameraModel)
    plane_offset: tuple = (0.0, 0.0, 0.35)   # plane origin in the target camera frame
    log_every: int = 1

    def __post_init__(self):
        for name in ("eps", "tau", "dt", "epsilon_converge", "torque_limit", "sinkhorn_tol",
                     "gramian_increment", "divergence_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.pose is None and self.pose_matrix is None:
            raise ValueError("give an initial pose index or an explicit pose")
        if self.pose is not None and self.pose not in (1, 2, 3, 4):
            raise ValueError("pose index must be 1..4")
        if self.control_period < 1 or self.ot_period < 1 or self.log_every < 1:
            raise ValueError("periods must be at least 1")


def _gains_from(d: dict | None) -> Gains:
    if not d:
        return Gains()
    conv = {}
    for key in ("Kp", "KR", "Kd"):
        if key in d:
            v = np.asarray(d[key], dtype=float)
            conv[key] = np.diag(v) if v.ndim == 1 else v
    return Gains(**conv)


def config_from_dict(d: dict, base: Path | None = None) -> RunConfig:
    d = dict(d)
    kw = {}
    if d.get("robot"):
        r = Path(d.pop("robot"))
        kw["robot"] = str(r if r.is_absolute() or base is None else base / r)
    else:
        d.pop("robot", None)
    kw["gains"] = _gains_from(d.pop("gains", None))
    ot = d.pop("transport", {}) or {}
    for key in ("eps", "tau", "p", "sinkhorn_max_iter", "sinkhorn_tol", "ot_period", "udc_gain", "udc_receding",
                "gramian_steps", "gramian_increment"):
        if key in ot:
            kw[key] = ot[key]
    cam = d.pop("camera", None)
    if cam:
        kw["camera"] = CameraModel(tuple(cam.get("resolution", (32, 24))), float(cam.get("focal", 16.0)),
                                   cam.get("principal_point"), float(cam.get("max_range", 2.0)))
    sc = d.pop("scene", None)
    if sc:
        kw["plane_offset"] = tuple(sc.get("plane_offset", (0.0, 0.0, 0.35)))
        kw["scene"] = {k: sc[k] for k in ("plane_extent", "hole_center", "hole_size")}
    if "pose_matrix" in d and d["pose_matrix"] is not None:
        kw["pose_matrix"] = Pose.from_matrix(np.array(d.pop("pose_matrix"), dtype=float).reshape(4, 4), project=True)
        kw["pose"] = d.pop("pose", None)
    if "q_star_seed" in d:
        kw["q_star_seed"] = tuple(float(x) for x in d.pop("q_star_seed"))
    for key, val in d.items():
        if key not in RunConfig.__dataclass_fields__:
            raise ValueError(f"unknown config key {key!r}")
        kw[key] = val
    return RunConfig(**kw)


def load_config(path=None) -> RunConfig:
    path = Path(path) if path is not None else DEFAULT_CONFIG
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return config_from_dict(data, base=path.parent)


def build_scene(cfg: RunConfig, target: Pose) -> Scene:
    sc = cfg.scene
    if isinstance(sc, Scene):
        return sc
    sc = sc or {"plane_extent": (0.5, 0.5), "hole_center": (0.05, 0.03), "hole_size": (0.1, 0.1)}
    plane = target @ Pose(np.eye(3), np.asarray(cfg.plane_offset, dtype=float))
    return Scene(plane, sc["plane_extent"], sc["hole_center"], sc["hole_size"])


# ----------------------------------------------------------- initial states


def _continue_along(m: RobotModel, q, g_from: Pose, g_to: Pose, steps: int):
    """Track g_from -> g_to along the geodesic with small IK corrections."""
    tw, th = log_pose(g_from.inverse() @ g_to)
    worst = sigma_min(body_jacobian(m, q))
    for k in range(1, steps + 1):
        goal = g_from @ exp_twist(tw, th * k / steps)
        try:
            q_new = inverse_kinematics(m, goal, q, tol=1e-10, max_iter=100, damping=1e-3)
        except RuntimeError as exc:
            raise UnreachablePoseError(f"inverse kinematics failed along the path: {exc}") from None
        if np.max(np.abs(q_new - q)) > 0.5:
            raise UnreachablePoseError("joint path jumps branches on the way to the pose")
        q = q_new
        worst = min(worst, sigma_min(body_jacobian(m, q)))
    return q, worst


def solve_setup(cfg: RunConfig, m: RobotModel | None = None):
    """Robot, target state, target joints and initial joints for a config.

    The target joints come from inverse kinematics seeded by ``q_star_seed``;
    the initial joints by continuation along the geodesic from the target to
    the requested pose, which also checks that the pose is reachable.
    """
    m = m if m is not None else (load_robot(cfg.robot) if cfg.robot else reference_robot())
    poses = load_bundled_poses()
    try:
        q_star = inverse_kinematics(m, poses.target, np.asarray(cfg.q_star_seed, dtype=float))
    except RuntimeError as exc:
        raise UnreachablePoseError(f"target pose is not reachable: {exc}") from None
    g_star = forward_kinematics(m, q_star)
    g0 = cfg.pose_matrix if cfg.pose_matrix is not None else poses.initial[cfg.pose - 1]
    if geodesic_distance(g0, g_star) == 0.0:
        return m, TargetState(g_star), q_star, q_star.copy()
    q0, _ = _continue_along(m, q_star, g_star, g0, cfg.continuation_steps)
    return m, TargetState(g_star), q_star, q0


# ---------------------------------------------------------------- the loop


COLUMNS = (["step", "time_s", "geodesic", "delta_p", "delta_R"]
           + [f"wrench_{c}" for c in ("vx", "vy", "vz", "wx", "wy", "wz")])


@dataclass
class TrajectoryLog:
    n_joints: int
    rows: list = field(default_factory=list)
    converged: bool = False
    steps: int = 0
    final_cloud: DepthCloud | None = None
    target_cloud: DepthCloud | None = None
    final_state: PhaseState | None = None
    final_wasserstein: float = np.nan
    wall_time: float = 0.0

    @property
    def columns(self) -> list[str]:
        return (COLUMNS + [f"tau_{i + 1}" for i in range(self.n_joints)]
                + ["H", "H_d", "lyapunov_rate", "wasserstein", "matching_residual", "kinetic"])

    def column(self, name: str) -> np.ndarray:
        return np.array([r[self.columns.index(name)] for r in self.rows], dtype=float)


class Servo:
    """Mutable per-run state: held steering torque, transport potentials, Gramians."""

    def __init__(self, cfg, m, target, scene, rng):
        self.cfg, self.m, self.target, self.scene, self.rng = cfg, m, target, scene, rng
        self.target_cloud = self.render(target.g_star)
        self.u_hold = np.zeros(m.n)
        self.g_potential = None
        self.field = None
        self.grams = None
        self.gram_pose = None
        self.wasserstein = np.nan
        self.progress = 0.0
        self.cloud = None

    def render(self, g):
        return render_depth(self.scene, self.cfg.camera, g, self.cfg.depth_noise,
                            self.rng if self.cfg.depth_noise > 0 else None)

    def refresh_transport(self, g):
        """Render the current view and transport it onto the target view.

        If the plane has left the view, the transport quantities are cleared
        (W becomes NaN, no steering field) and None is returned.
        """
        cfg = self.cfg
        try:
            self.cloud = self.render(g)
        except EmptyViewError:
            log.warning("plane not visible; transport skipped")
            self.cloud, self.field, self.wasserstein = None, None, np.nan
            return None
        C = ground_cost(self.cloud, self.target_cloud, cfg.p)
        eps = relative_eps(C, cfg.eps)
        init = None if self.g_potential is None else (None, self.g_potential)
        plan = sinkhorn_unbalanced(self.cloud, self.target_cloud, C, eps, cfg.tau,
                                   cfg.sinkhorn_max_iter, cfg.sinkhorn_tol, init=init)
        self.g_potential = plan.potentials[1]
        self.field = transport_map(plan, self.cloud, self.target_cloud)
        self.wasserstein = max(plan.cost, 0.0) ** (1.0 / cfg.p)
        return plan

    def steering(self, s, terms):
        cfg = self.cfg
        if self.field is None:
            return np.zeros(self.m.n)
        if self.grams is None or geodesic_distance(s.g, self.gram_pose) > cfg.gramian_increment:
            self.grams = gramians_at(self.m, s, self.progress, cfg.gramian_steps, terms)
            self.gram_pose = s.g
        res = u_dc(self.m, s, self.progress, self.field, self.grams, cfg.torque_limit, cfg.udc_gain, terms,
                   cfg.udc_receding)
        return res.torque

    def full_update(self, s):
        """One complete control update from scratch: render, transport, Gramians, steering and torque.

        The run loop spreads these pieces over different rates; this is the
        worst case, used for timing.
        """
        terms = task_terms(self.m, s)
        self.refresh_transport(s.g)
        self.grams = None
        self.u_hold = self.steering(s, terms)
        return self.policy(s, terms)

    def policy(self, s, terms):
        cfg, k = self.cfg, self.cfg.gains
        if not cfg.controller:
            return np.zeros(self.m.n)
        u = (u_energy_shaping(self.m, s, self.target, k, terms, cfg.pinv_damping)
             + u_damping(self.m, s, k, terms, damping=cfg.pinv_damping) + self.u_hold)
        return np.clip(u, -cfg.torque_limit, cfg.torque_limit)


def run_servo(cfg: RunConfig, m: RobotModel | None = None, setup=None) -> TrajectoryLog:
    """Run one closed-loop experiment; ``setup`` may pass a precomputed solve_setup result."""
    t_wall = time.perf_counter()
    m, target, _q_star, q0 = setup if setup is not None else solve_setup(cfg, m)
    scene = build_scene(cfg, target.g_star)
    rng = np.random.default_rng(cfg.seed)
    servo = Servo(cfg, m, target, scene, rng)
    k = cfg.gains
    s = PhaseState.at_rest(m, q0)
    d0 = geodesic_distance(s.g, target.g_star)
    limit = cfg.divergence_factor * max(d0, cfg.epsilon_converge)
    out = TrajectoryLog(m.n, target_cloud=servo.target_cloud)
    servo.cloud = servo.render(s.g)     # the start view must see the plane
    servo.refresh_transport(s.g)

    step = 0
    while True:
        try:
            terms = task_terms(m, s)
        except SingularityError as exc:
            raise SingularityError(exc.sigma_min, step) from None
        d = geodesic_distance(s.g, target.g_star)
        done = d <= cfg.epsilon_converge or step >= cfg.max_steps
        if d > limit:
            raise DivergenceError(step, d, limit)
        if not done and step % cfg.control_period == 0:
            control_index = step // cfg.control_period
            servo.progress = max(servo.progress, min(1.0, 1.0 - d / d0))
            if control_index > 0 and control_index % cfg.ot_period == 0:
                servo.refresh_transport(s.g)
            servo.u_hold = servo.steering(s, terms) if cfg.use_udc and cfg.controller else np.zeros(m.n)
        u = np.zeros(m.n) if done else servo.policy(s, terms)
        if done or step % cfg.log_every == 0:
            out.rows.append(_record(m, s, terms, target, k, step, cfg.dt, d, u, servo.wasserstein))
        if done:
            out.converged = d <= cfg.epsilon_converge
            break
        try:
            s = integrate_step(m, s, servo.policy, cfg.dt)
        except SingularityError as exc:
            raise SingularityError(exc.sigma_min, step) from None
        step += 1

    out.steps = step
    out.final_state = s
    servo.refresh_transport(s.g)
    out.final_cloud = servo.cloud
    out.final_wasserstein = servo.wasserstein
    out.wall_time = time.perf_counter() - t_wall
    log.info("run finished: converged=%s steps=%d d=%.3g wall=%.1fs", out.converged, step, d, out.wall_time)
    return out


def _record(m, s, terms, target, k, step, dt, d, u, wasserstein):
    dp = position_distance(s.g.p, target.g_star.p)
    dR = rotation_distance(s.g.R, target.g_star.R)
    wrench = terms.B @ u
    H = hamiltonian(m, s)
    Hd = desired_hamiltonian(m, s, target, k, terms)
    rate = lyapunov_rate(m, s, target, k, terms)
    resid = check_matching(m, s, target, k, terms)
    ke = 0.5 * float(s.momentum @ terms.xi)
    return [step, step * dt, d, dp, dR, *wrench, *u, H, Hd, rate, wasserstein, resid, ke]


def write_log(traj: TrajectoryLog, out_dir) -> Path:
    """trajectory.csv plus the final and target clouds; returns the CSV path."""
    if not traj.rows:
        raise ValueError("empty trajectory log")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "trajectory.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(traj.columns)
        for row in traj.rows:
            w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])
    if traj.final_cloud is not None:
        write_cloud(traj.final_cloud, out / "final_cloud.txt")
    if traj.target_cloud is not None:
        write_cloud(traj.target_cloud, out / "target_cloud.txt")
    return path
