"""Energy-shaping and damping-injection control on SE(3).

The closed loop shapes the Hamiltonian into

    H_d = 1/2 (P - P*)^T M~^-1 (P - P*) + 1/2 (p - p*)^T Kp (p - p*) + 1/2 tr(KR (I - R*^T R))

and injects damping so that H_d decreases along trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space

from .lie import Pose, skew, unskew
from .port_hamiltonian import (PhaseState, TaskTerms, hamiltonian_gradient, interconnection,
                               task_terms)
from .robot import RobotModel, pseudo_inverse


def _spd(name, A, size):
    A = np.array(A, dtype=float)
    if A.ndim == 0:
        A = A * np.eye(size)
    A = A.reshape(size, size)
    if np.max(np.abs(A - A.T)) > 1e-12:
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(A)) <= 0.0:
        raise ValueError(f"{name} must be positive definite")
    A.flags.writeable = False
    return A


@dataclass(frozen=True, eq=False)
class Gains:
    """Kp, KR (3x3) and Kd (6x6); scalars are expanded to multiples of I.

    The defaults suit the bundled desk arm: its end-effector rotational
    inertia is a few 1e-3 kg m^2, so rotation gets much softer stiffness and
    damping than translation to keep the closed loop overdamped and the
    fastest pole well inside the explicit-midpoint stability region at
    dt = 1e-3.
    """

    Kp: np.ndarray = field(default_factory=lambda: 20.0 * np.eye(3))
    KR: np.ndarray = field(default_factory=lambda: 0.5 * np.eye(3))
    Kd: np.ndarray = field(default_factory=lambda: np.diag([25.0, 25.0, 25.0, 0.5, 0.5, 0.5]))

    def __post_init__(self):
        object.__setattr__(self, "Kp", _spd("Kp", self.Kp, 3))
        object.__setattr__(self, "KR", _spd("KR", self.KR, 3))
        object.__setattr__(self, "Kd", _spd("Kd", self.Kd, 6))


@dataclass(frozen=True, eq=False)
class TargetState:
    g_star: Pose
    p_star: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        p = np.array(self.p_star, dtype=float).reshape(6)
        if np.any(p != 0.0):
            raise ValueError("only static targets (zero target momentum) are supported")
        p.flags.writeable = False
        object.__setattr__(self, "p_star", p)


def pose_error(g: Pose, target: TargetState, k: Gains) -> np.ndarray:
    """Geometric error [R^T Kp (p - p*); 1/2 (KR R*^T R - R^T R* KR^T)^vee]."""
    Rs, ps = target.g_star.R, target.g_star.p
    A = k.KR @ Rs.T @ g.R
    ev = g.R.T @ k.Kp @ (g.p - ps)
    ew = 0.5 * unskew(A - g.R.T @ Rs @ k.KR.T)
    return np.concatenate([ev, ew])


def potential_energy(g: Pose, target: TargetState, k: Gains) -> float:
    dp = g.p - target.g_star.p
    Rs = target.g_star.R
    # I - R*^T R written as R*^T (R* - R) so the term is exactly zero at R = R*
    return float(0.5 * dp @ k.Kp @ dp + 0.5 * np.trace(k.KR @ Rs.T @ (Rs - g.R)))


def desired_hamiltonian(m: RobotModel, s: PhaseState, target: TargetState, k: Gains,
                        terms: TaskTerms | None = None) -> float:
    terms = task_terms(m, s) if terms is None else terms
    dP = s.momentum - target.p_star
    kinetic = 0.5 * float(dP @ _task_velocity_of(terms, dP))
    return kinetic + potential_energy(s.g, target, k)


def _task_velocity_of(terms: TaskTerms, P) -> np.ndarray:
    # M~^-1 P = J M^-1 J^T P
    return terms.J @ np.linalg.solve(terms.M, terms.J.T @ P)


def actuation_pinv(terms: TaskTerms, damping: float = 0.0) -> np.ndarray:
    """B^+ for B = J^+T; damping > 0 gives the damped least-squares inverse.

    Without damping B^+ is exactly J^T for the square full-rank Jacobian.
    """
    if damping == 0.0:
        return terms.J.T.copy()
    return pseudo_inverse(terms.B, damping)


def u_energy_shaping(m: RobotModel, s: PhaseState, target: TargetState, k: Gains,
                     terms: TaskTerms | None = None, damping: float = 0.0) -> np.ndarray:
    """B^+ [grad_g G - P^x xi - e]: gravity compensation, gyroscopic cancellation, pose PD."""
    terms = task_terms(m, s) if terms is None else terms
    px = interconnection(s).px
    wrench = terms.grad_gravity - px @ terms.xi - pose_error(s.g, target, k)
    return actuation_pinv(terms, damping) @ wrench


def u_energy_shaping_structural(m: RobotModel, s: PhaseState, target: TargetState, k: Gains,
                                current_rows: bool = True) -> np.ndarray:
    """Energy shaping assembled from the 18-dimensional structure matrices.

    Evaluates B^+ [J_d grad H_d - J grad H] restricted to the momentum rows.
    The potential part of grad H_d is the plain Euclidean gradient in the
    flattened coordinates.  ``current_rows`` builds the rotation blocks of J_1
    from the current rows r_i; ``False`` uses the target rows r*_i instead.
    """
    terms = task_terms(m, s)
    grad_H = hamiltonian_gradient(m, s, terms)
    R, Rs = s.g.R, target.g_star.R
    # Euclidean gradient of the shaped potential in x = [p, r1, r2, r3]
    A = k.KR @ Rs.T
    grad_V = np.concatenate([k.Kp @ (s.g.p - target.g_star.p)] + [-0.5 * A[:, i] for i in range(3)])
    # kinetic part of H_d equals that of H for a static target
    grad_Hd = grad_H.copy()
    grad_Hd[:12] = grad_H[:12] - _embed_gravity(s, terms) + grad_V
    rows = R if current_rows else Rs
    J1 = np.zeros((12, 6))
    J1[:3, :3] = R
    for i in range(3):
        J1[3 + 3 * i:6 + 3 * i, 3:] = skew(rows[i])
    Jd = np.zeros((18, 18))
    Jd[:12, 12:] = J1
    Jd[12:, :12] = -J1.T
    wrench = (Jd @ grad_Hd - interconnection(s).matrix @ grad_H)[12:]
    return actuation_pinv(terms) @ wrench


def _embed_gravity(s: PhaseState, terms: TaskTerms) -> np.ndarray:
    R = s.g.R
    gg = terms.grad_gravity
    out = np.empty(12)
    out[:3] = R @ gg[:3]
    for i in range(3):
        out[3 + 3 * i:6 + 3 * i] = 0.5 * np.cross(R[i], gg[3:])
    return out


def u_damping(m: RobotModel, s: PhaseState, k: Gains, terms: TaskTerms | None = None,
              mode: str = "task", damping: float = 0.0) -> np.ndarray:
    """Damping injection.

    ``mode="task"`` applies Kd to the body twist: u = -B^+ Kd xi, so the
    injected power is exactly -xi^T Kd xi.  ``mode="joint"`` reads Kd as an
    n x n joint-space gain: u = -Kd B^T xi.
    """
    terms = task_terms(m, s) if terms is None else terms
    xi = terms.xi
    if mode == "task":
        return -actuation_pinv(terms, damping) @ (k.Kd @ xi)
    if mode == "joint":
        Bt_xi = terms.B.T @ xi
        if k.Kd.shape[0] != Bt_xi.shape[0]:
            raise ValueError(f"joint-space damping needs an {Bt_xi.shape[0]}x{Bt_xi.shape[0]} Kd")
        return -k.Kd @ Bt_xi
    raise ValueError(f"unknown damping mode {mode!r}")


def lyapunov_rate(m: RobotModel, s: PhaseState, target: TargetState, k: Gains,
                  terms: TaskTerms | None = None) -> float:
    """-(P - P*)^T M~^-1 Kd M~^-1 (P - P*), never positive."""
    terms = task_terms(m, s) if terms is None else terms
    xe = _task_velocity_of(terms, s.momentum - target.p_star)
    return -float(xe @ k.Kd @ xe)


def left_annihilator(B18) -> np.ndarray:
    """Orthonormal rows spanning the left null space of an 18 x n input matrix."""
    B18 = np.asarray(B18, dtype=float)
    k = int(np.flatnonzero(np.any(B18 != 0.0, axis=1))[0]) if np.any(B18) else B18.shape[0]
    # zero leading rows are annihilated by the identity; only the rest needs an SVD
    tail = null_space(B18[k:].T).T
    perp = np.zeros((k + tail.shape[0], B18.shape[0]))
    perp[:k, :k] = np.eye(k)
    perp[k:, k:] = tail
    return perp


def check_matching(m: RobotModel, s: PhaseState, target: TargetState, k: Gains,
                   terms: TaskTerms | None = None) -> float:
    """Norm of the matching-condition residual projected by the left annihilator of [0; B].

    The closed-loop structure uses J_1 with the target rows r*_i and
    R_d = diag(0, Kd).  Diagnostic only.
    """
    terms = task_terms(m, s) if terms is None else terms
    B18 = np.zeros((18, m.n))
    B18[12:] = terms.B
    perp = left_annihilator(B18)
    if perp.size == 0:
        return 0.0
    grad_H = hamiltonian_gradient(m, s, terms)
    grad_Hd = grad_H.copy()
    left = terms.grad_kinetic + pose_error(s.g, target, k)
    R = s.g.R
    grad_Hd[:3] = R @ left[:3]
    for i in range(3):
        grad_Hd[3 + 3 * i:6 + 3 * i] = 0.5 * np.cross(R[i], left[3:])
    grad_Hd[12:] = _task_velocity_of(terms, s.momentum - target.p_star)
    Rs = target.g_star.R
    J1 = np.zeros((12, 6))
    J1[:3, :3] = R
    for i in range(3):
        J1[3 + 3 * i:6 + 3 * i, 3:] = skew(Rs[i])
    Jd = np.zeros((18, 18))
    Jd[:12, 12:] = J1
    Jd[12:, :12] = -J1.T
    Rd = np.zeros((18, 18))
    Rd[12:, 12:] = k.Kd
    residual = interconnection(s).matrix @ grad_H - (Jd - Rd) @ grad_Hd
    return float(np.linalg.norm(perp @ residual))
