"""Serial manipulator model: product-of-exponentials kinematics and mass matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import _kernels as K
from .lie import BranchAmbiguityError, Pose, Twist, log_pose

GRAVITY_FD_STEP = 1e-6
PINV_CUTOFF = 1e-10
SINGULAR_TOL = 1e-6


class SingularityError(RuntimeError):
    """The body Jacobian lost rank; carries the smallest singular value."""

    def __init__(self, sigma_min: float, step: int | None = None):
        self.sigma_min = float(sigma_min)
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"body Jacobian is rank deficient{where} (sigma_min={self.sigma_min:.3e})")


@dataclass(frozen=True, eq=False)
class RobotModel:
    joint_twists: tuple[Twist, ...]
    g_zero: Pose
    link_masses: np.ndarray
    link_coms: np.ndarray
    link_inertias: np.ndarray
    joint_points: np.ndarray = None
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    name: str = "robot"

    def __post_init__(self):
        n = len(self.joint_twists)
        if n < 1:
            raise ValueError("a robot needs at least one joint")
        for i, t in enumerate(self.joint_twists):
            wn, vn = np.linalg.norm(t.w), np.linalg.norm(t.v)
            revolute = abs(wn - 1.0) < 1e-9
            prismatic = wn == 0.0 and abs(vn - 1.0) < 1e-9
            if not (revolute or prismatic):
                raise ValueError(f"joint {i} twist is neither a unit revolute nor a unit prismatic twist")
        masses = np.asarray(self.link_masses, dtype=float).reshape(n)
        coms = np.asarray(self.link_coms, dtype=float).reshape(n, 3)
        inertias = np.asarray(self.link_inertias, dtype=float).reshape(n, 3, 3)
        points = np.zeros((n, 3)) if self.joint_points is None else np.asarray(self.joint_points, float).reshape(n, 3)
        if np.any(masses <= 0):
            raise ValueError("link masses must be positive")
        for i, I in enumerate(inertias):
            if np.max(np.abs(I - I.T)) > 1e-12 or np.min(np.linalg.eigvalsh(I)) <= 0:
                raise ValueError(f"link {i} inertia must be symmetric positive definite")
        object.__setattr__(self, "link_masses", masses)
        object.__setattr__(self, "link_coms", coms)
        object.__setattr__(self, "link_inertias", inertias)
        object.__setattr__(self, "joint_points", points)
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float).reshape(3))
        # contiguous kernel arrays
        twists = np.array([t.vector for t in self.joint_twists])
        frames = np.zeros((n, 4, 4))
        spatial = np.zeros((n, 6, 6))
        for i in range(n):
            frames[i] = np.eye(4)
            frames[i, :3, 3] = points[i] + coms[i]
            spatial[i, :3, :3] = masses[i] * np.eye(3)
            spatial[i, 3:, 3:] = inertias[i]
        object.__setattr__(self, "_twists", twists)
        object.__setattr__(self, "_g_zero", self.g_zero.matrix)
        object.__setattr__(self, "_frames", frames)
        object.__setattr__(self, "_spatial", spatial)

    @property
    def n(self) -> int:
        return len(self.joint_twists)

    def kernel_args(self):
        return self._twists, self._g_zero, self._frames, self._spatial, self.link_masses, self.gravity

    def with_gravity(self, gravity) -> RobotModel:
        return RobotModel(self.joint_twists, self.g_zero, self.link_masses, self.link_coms,
                          self.link_inertias, self.joint_points, np.asarray(gravity, float), self.name)

    def check_q(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n,):
            raise ValueError(f"expected {self.n} joint values, got shape {q.shape}")
        return q


@dataclass(frozen=True, eq=False)
class JointState:
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).reshape(-1))
        object.__setattr__(self, "qdot", np.asarray(self.qdot, dtype=float).reshape(-1))
        if self.q.shape != self.qdot.shape:
            raise ValueError("q and qdot must have the same dimension")


def load_robot(path) -> RobotModel:
    """Read a robot description (YAML).

    Schema::

        name: str
        gravity: [gx, gy, gz]          # optional, default [0, 0, -9.81]
        g_zero: 4x4 nested list        # end-effector frame at q = 0
        joints:
          - type: revolute | prismatic # optional, default revolute
            axis: [x, y, z]            # unit rotation axis (or slide direction)
            point: [x, y, z]           # point on the axis; also the link frame origin
            mass: float
            com: [x, y, z]             # relative to the link frame
            inertia_diag: [ixx, iyy, izz]
    """
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return robot_from_dict(data)


def robot_from_dict(data: dict) -> RobotModel:
    twists, masses, coms, inertias, points = [], [], [], [], []
    for j in data["joints"]:
        axis = np.asarray(j["axis"], dtype=float)
        point = np.asarray(j.get("point", [0.0, 0.0, 0.0]), dtype=float)
        if j.get("type", "revolute") == "prismatic":
            twists.append(Twist(axis, np.zeros(3)))
        else:
            twists.append(Twist(-np.cross(axis, point), axis))
        points.append(point)
        masses.append(float(j["mass"]))
        coms.append(j["com"])
        inertias.append(np.diag(np.asarray(j["inertia_diag"], dtype=float)))
    return RobotModel(
        joint_twists=tuple(twists),
        g_zero=Pose.from_matrix(np.asarray(data["g_zero"], dtype=float)),
        link_masses=np.array(masses),
        link_coms=np.array(coms, dtype=float),
        link_inertias=np.array(inertias),
        joint_points=np.array(points),
        gravity=np.asarray(data.get("gravity", [0.0, 0.0, -9.81]), dtype=float),
        name=str(data.get("name", "robot")),
    )


def reference_robot_path() -> Path:
    return Path(__file__).parent / "data" / "reference_arm.yaml"


def reference_robot() -> RobotModel:
    return load_robot(reference_robot_path())


def forward_kinematics(m: RobotModel, q) -> Pose:
    T = K.forward_kinematics(m._twists, m._g_zero, m.check_q(q))
    return Pose(T[:3, :3], T[:3, 3])


def link_poses(m: RobotModel, q) -> list[Pose]:
    """Center-of-mass frames of every link."""
    P = K.chain_prefix(m._twists, m.check_q(q))
    out = []
    for i in range(m.n):
        T = P[i + 1] @ m._frames[i]
        out.append(Pose(T[:3, :3], T[:3, 3]))
    return out


def body_jacobian(m: RobotModel, q) -> np.ndarray:
    return K.body_jacobian(m._twists, m._g_zero, m.check_q(q))


def link_jacobians(m: RobotModel, q) -> np.ndarray:
    return K.link_jacobians(m._twists, m._frames, m.check_q(q))


def pseudo_inverse(J, damping: float = 0.0) -> np.ndarray:
    """Moore-Penrose pseudo-inverse, or damped least squares when damping > 0."""
    J = np.asarray(J, dtype=float)
    if damping > 0.0:
        rows = J.shape[0]
        return J.T @ np.linalg.inv(J @ J.T + damping**2 * np.eye(rows))
    U, s, Vt = np.linalg.svd(J, full_matrices=False)
    s_inv = np.zeros_like(s)
    keep = s > PINV_CUTOFF
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T


def sigma_min(J) -> float:
    """Sixth singular value; zero when J cannot have rank 6."""
    s = np.linalg.svd(np.asarray(J, dtype=float), compute_uv=False)
    return float(s[5]) if len(s) >= 6 else 0.0


def require_full_rank(J, tol: float = SINGULAR_TOL) -> None:
    smin = sigma_min(J)
    if smin < tol:
        raise SingularityError(smin)


def mass_matrix_joint(m: RobotModel, q) -> np.ndarray:
    return K.mass_matrix(m._twists, m._frames, m._spatial, m.check_q(q))


def mass_matrix_task(m: RobotModel, q) -> np.ndarray:
    """J^+T M J^+ ; raises SingularityError when the body Jacobian loses rank."""
    J = body_jacobian(m, q)
    require_full_rank(J)
    Jp = pseudo_inverse(J)
    Mt = Jp.T @ mass_matrix_joint(m, q) @ Jp
    return 0.5 * (Mt + Mt.T)


def gravity_potential(m: RobotModel, q) -> float:
    return float(K.gravity_potential(m._twists, m._frames, m.link_masses, m.gravity, m.check_q(q)))


def gravity_gradient_joint(m: RobotModel, q, step: float = GRAVITY_FD_STEP) -> np.ndarray:
    return K.gravity_gradient(m._twists, m._frames, m.link_masses, m.gravity, m.check_q(q), step)


def gravity_gradient_task(m: RobotModel, q) -> np.ndarray:
    J = body_jacobian(m, q)
    require_full_rank(J)
    return pseudo_inverse(J).T @ gravity_gradient_joint(m, q)


def inverse_kinematics(m: RobotModel, target: Pose, q0, tol: float = 1e-12, max_iter: int = 200,
                       damping: float = 1e-4) -> np.ndarray:
    """Damped Gauss-Newton on the body-frame pose error.

    Raises RuntimeError when it fails to converge from ``q0``.
    """
    q = np.array(q0, dtype=float)
    for _ in range(max_iter):
        try:
            err = pose_residual(m, q, target)
        except BranchAmbiguityError:
            # half-turn error: nudge off the cut locus and keep going
            q = q + 1e-3
            continue
        if np.linalg.norm(err) < tol:
            return q
        J = body_jacobian(m, q)
        q = q + pseudo_inverse(J, damping) @ err
    err = pose_residual(m, q, target)
    if np.linalg.norm(err) < 1e3 * tol:
        return q
    raise RuntimeError(f"inverse kinematics did not converge (residual {np.linalg.norm(err):.3e})")


def pose_residual(m: RobotModel, q, target: Pose) -> np.ndarray:
    """Body twist (times magnitude) taking forward_kinematics(q) to ``target``."""
    g = forward_kinematics(m, q)
    tw, mag = log_pose(g.inverse() @ target)
    return tw.vector * mag
