"""Task-space port-Hamiltonian model of a manipulator on SE(3).

The state is the end-effector pose ``g`` together with the body momentum
``(pv, pw)`` conjugate to the body twist.  Joint positions ``q`` ride along
as bookkeeping for the configuration-dependent inertia and actuation.

Flattened coordinates stack the position and the three *rows* of R,
followed by the momentum: ``x = [p, r1, r2, r3, pv, pw]`` (18 entries).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Union

import numpy as np

from . import _kernels as K
from .lie import Pose, Twist, exp_twist, log_pose, skew
from .robot import (GRAVITY_FD_STEP, SINGULAR_TOL, RobotModel, SingularityError, body_jacobian,
                    forward_kinematics, gravity_potential, mass_matrix_joint, pseudo_inverse,
                    require_full_rank)

DRIFT_DAMPING = 1e-6


@dataclass(frozen=True, eq=False)
class PhaseState:
    g: Pose
    pv: np.ndarray
    pw: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        for name, size in (("pv", 3), ("pw", 3)):
            arr = np.array(getattr(self, name), dtype=float).reshape(size)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        q = np.array(self.q, dtype=float).reshape(-1)
        q.flags.writeable = False
        object.__setattr__(self, "q", q)

    @property
    def momentum(self) -> np.ndarray:
        return np.concatenate([self.pv, self.pw])

    def with_momentum(self, P) -> PhaseState:
        P = np.asarray(P, dtype=float)
        return PhaseState(self.g, P[:3], P[3:], self.q)

    def flatten(self) -> np.ndarray:
        return np.concatenate([flatten_pose(self.g), self.pv, self.pw])

    @classmethod
    def at_rest(cls, m: RobotModel, q) -> PhaseState:
        q = m.check_q(q)
        return cls(forward_kinematics(m, q), np.zeros(3), np.zeros(3), q)

    @classmethod
    def from_joint(cls, m: RobotModel, q, qdot) -> PhaseState:
        pv, pw = momentum_from_joint(m, q, qdot)
        return cls(forward_kinematics(m, q), pv, pw, q)


@dataclass(frozen=True, eq=False)
class Interconnection:
    gx: np.ndarray
    px: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        """The assembled 18x18 skew-symmetric structure matrix."""
        Jm = np.zeros((18, 18))
        Jm[:12, 12:] = self.gx
        Jm[12:, :12] = -self.gx.T
        Jm[12:, 12:] = self.px
        return Jm


class TaskTerms(NamedTuple):
    """Per-state quantities shared by the dynamics and the controller."""

    J: np.ndarray          # end-effector body Jacobian
    M: np.ndarray          # joint-space mass matrix
    qdot: np.ndarray
    xi: np.ndarray         # body twist, dH/dP
    grad_kinetic: np.ndarray
    grad_gravity: np.ndarray
    sigma_min: float

    @property
    def grad_g(self) -> np.ndarray:
        """Left-trivialized configuration gradient of H."""
        return self.grad_kinetic + self.grad_gravity

    @property
    def B(self) -> np.ndarray:
        """Actuation matrix: joint torques to body wrench, the transposed pseudo-inverse of J.

        The Jacobian is square and full rank here, so the pseudo-inverse is the inverse.
        """
        return np.linalg.inv(self.J).T


def flatten_pose(g: Pose) -> np.ndarray:
    return np.concatenate([g.p, g.R.ravel()])


def unflatten_pose(x) -> tuple[np.ndarray, np.ndarray]:
    """Return (R, p) from the first 12 flattened entries; R is not projected."""
    x = np.asarray(x, dtype=float)
    return x[3:12].reshape(3, 3), x[:3]


def _require_square(m: RobotModel):
    if m.n != 6:
        raise ValueError(f"task-space dynamics need a square body Jacobian (n = 6), robot has n = {m.n}")


def task_terms(m: RobotModel, s: PhaseState, tol: float = SINGULAR_TOL) -> TaskTerms:
    _require_square(m)
    P = np.ascontiguousarray(s.momentum)
    try:
        out = K.task_terms(m._twists, m._g_zero, m._frames, m._spatial, m.link_masses, m.gravity,
                           np.ascontiguousarray(s.q), P, GRAVITY_FD_STEP)
    except np.linalg.LinAlgError:
        raise SingularityError(0.0) from None
    terms = TaskTerms(*out[:6], float(out[6]))
    if terms.sigma_min < tol:
        raise SingularityError(terms.sigma_min)
    return terms


def task_velocity(m: RobotModel, s: PhaseState) -> np.ndarray:
    """Body twist xi = M~^-1 P."""
    return task_terms(m, s).xi


def kinetic_energy(m: RobotModel, s: PhaseState) -> float:
    return 0.5 * float(s.momentum @ task_velocity(m, s))


def hamiltonian(m: RobotModel, s: PhaseState) -> float:
    """Kinetic plus gravitational energy in joules."""
    return kinetic_energy(m, s) + gravity_potential(m, s.q)


def momentum_from_joint(m: RobotModel, q, qdot) -> tuple[np.ndarray, np.ndarray]:
    """Body momentum M~ J qdot; equivalently J^-T M qdot for a square Jacobian."""
    q = m.check_q(q)
    qdot = np.asarray(qdot, dtype=float).reshape(m.n)
    J = body_jacobian(m, q)
    require_full_rank(J)
    P = pseudo_inverse(J).T @ (mass_matrix_joint(m, q) @ qdot)
    return P[:3], P[3:]


def actuation_matrix(m: RobotModel, q) -> np.ndarray:
    """B(q) = J^+T, mapping joint torques to the body wrench."""
    J = body_jacobian(m, q)
    require_full_rank(J)
    return pseudo_inverse(J).T


def interconnection(s: PhaseState) -> Interconnection:
    R = s.g.R
    gx = np.zeros((12, 6))
    gx[:3, :3] = R
    for i in range(3):
        gx[3 + 3 * i:6 + 3 * i, 3:] = skew(R[i])
    px = np.zeros((6, 6))
    Pv, Pw = skew(s.pv), skew(s.pw)
    px[:3, 3:] = Pv
    px[3:, :3] = Pv
    px[3:, 3:] = Pw
    return Interconnection(gx, px)


def hamiltonian_gradient(m: RobotModel, s: PhaseState, terms: TaskTerms | None = None) -> np.ndarray:
    """Gradient of H in flattened coordinates (18 entries).

    The configuration part is the embedding of the left-trivialized gradient
    (gv, gw): dH/dp = R gv and dH/dr_i = r_i x gw / 2.
    """
    terms = task_terms(m, s) if terms is None else terms
    grad = terms.grad_g
    R = s.g.R
    out = np.empty(18)
    out[:3] = R @ grad[:3]
    for i in range(3):
        out[3 + 3 * i:6 + 3 * i] = 0.5 * np.cross(R[i], grad[3:])
    out[12:] = terms.xi
    return out


def state_derivative(m: RobotModel, s: PhaseState, u, terms: TaskTerms | None = None) -> np.ndarray:
    """Time derivative of the flattened state under joint torques ``u``."""
    terms = task_terms(m, s) if terms is None else terms
    u = np.asarray(u, dtype=float).reshape(m.n)
    grad = hamiltonian_gradient(m, s, terms)
    dH_dp, dH_dr = grad[:3], grad[3:12].reshape(3, 3)
    v, w = terms.xi[:3], terms.xi[3:]
    R = s.g.R
    wrench = terms.B @ u
    out = np.empty(18)
    out[:3] = R @ v
    for i in range(3):
        out[3 + 3 * i:6 + 3 * i] = np.cross(R[i], w)
    out[12:15] = np.cross(s.pv, w) - R.T @ dH_dp + wrench[:3]
    out[15:] = np.cross(s.pw, w) + np.cross(s.pv, v) + sum(np.cross(R[i], dH_dr[i]) for i in range(3)) + wrench[3:]
    return out


def state_derivative_dense(m: RobotModel, s: PhaseState, u) -> np.ndarray:
    """Reference evaluation through the assembled 18x18 matrix."""
    terms = task_terms(m, s)
    u = np.asarray(u, dtype=float).reshape(m.n)
    B18 = np.zeros((18, m.n))
    B18[12:] = terms.B
    return interconnection(s).matrix @ hamiltonian_gradient(m, s, terms) + B18 @ u


def momentum_rate(s: PhaseState, terms: TaskTerms, u) -> np.ndarray:
    """Body-momentum rate ad*_xi P - grad_g H + B u."""
    return (K.coadjoint_drift(np.ascontiguousarray(s.momentum), terms.xi) - terms.grad_g
            + np.linalg.solve(terms.J.T, np.asarray(u, dtype=float)))


Policy = Callable[[PhaseState, TaskTerms], np.ndarray]


def integrate_step(m: RobotModel, s: PhaseState, u: Union[np.ndarray, Policy], dt: float,
                   correct_drift: bool = True, tol: float = SINGULAR_TOL) -> PhaseState:
    """Advance one step of length ``dt``.

    Explicit midpoint on the momentum and joint positions; the pose moves by
    the group retraction g exp(xi dt), so R never leaves SO(3).  ``u`` is
    either a fixed torque vector (zero-order hold) or a callable
    ``u(state, terms)`` evaluated at both stages.  With ``correct_drift`` the
    joints take one damped Gauss-Newton step toward the integrated pose.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    policy = u if callable(u) else (lambda _s, _t, _u=np.asarray(u, dtype=float): _u)
    t1 = task_terms(m, s, tol)
    pdot1 = momentum_rate(s, t1, policy(s, t1))
    half = PhaseState(s.g @ _retract(t1.xi, 0.5 * dt), *_split(s.momentum + 0.5 * dt * pdot1),
                      s.q + 0.5 * dt * t1.qdot)
    t2 = task_terms(m, half, tol)
    pdot2 = momentum_rate(half, t2, policy(half, t2))
    g_new = s.g @ _retract(t2.xi, dt)
    q_new = s.q + dt * t2.qdot
    if correct_drift:
        q_new = _pull_joints(m, q_new, g_new)
    return PhaseState(g_new, *_split(s.momentum + dt * pdot2), q_new)


def _retract(xi, dt) -> Pose:
    return exp_twist(Twist.from_vector(xi), dt)


def _split(P):
    return P[:3], P[3:]


def _pull_joints(m: RobotModel, q, g: Pose) -> np.ndarray:
    T = K.forward_kinematics(m._twists, m._g_zero, q)
    tw, mag = log_pose(Pose(T[:3, :3], T[:3, 3]).inverse() @ g)
    if mag == 0.0:
        return q
    J = K.body_jacobian(m._twists, m._g_zero, q)
    return q + pseudo_inverse(J, DRIFT_DAMPING) @ (tw.vector * mag)


def joint_drift(m: RobotModel, s: PhaseState) -> float:
    """Frobenius distance between forward_kinematics(q) and g."""
    return float(np.linalg.norm(forward_kinematics(m, s.q).matrix - s.g.matrix))
