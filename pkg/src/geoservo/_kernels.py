"""Array-level kernels for rigid-body kinematics and manipulator dynamics.

Everything here takes and returns plain float64 arrays so the same source
compiles under numba or runs as ordinary numpy (see ``_accel``).

Twist vectors are ordered ``[v, w]`` (linear first, angular second).
Model arrays:
    twists      (n, 6)    joint unit twists in the base frame at q = 0
    g_zero      (4, 4)    end-effector frame at q = 0
    link_frames (n, 4, 4) link center-of-mass frames at q = 0
    inertias    (n, 6, 6) spatial inertia diag(m I3, I_link) per link
    masses      (n,)
    gravity     (3,)
"""

import math

import numpy as np

from ._accel import njit

SMALL_ANGLE = 1e-12


@njit
def skew(w):
    out = np.zeros((3, 3))
    out[0, 1] = -w[2]
    out[0, 2] = w[1]
    out[1, 0] = w[2]
    out[1, 2] = -w[0]
    out[2, 0] = -w[1]
    out[2, 1] = w[0]
    return out


@njit
def cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit
def exp_twist(xi, q):
    """Closed-form exp(hat(xi) * q) as a 4x4 homogeneous matrix."""
    v = xi[:3] * q
    w = xi[3:] * q
    theta = math.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    T = np.eye(4)
    if theta < SMALL_ANGLE:
        T[:3, 3] = v
        return T
    W = skew(w)
    W2 = W @ W
    s = math.sin(theta)
    c = math.cos(theta)
    a = s / theta
    b = (1.0 - c) / (theta * theta)
    d = (theta - s) / (theta * theta * theta)
    T[:3, :3] = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + d * W2
    T[:3, 3] = V @ v
    return T


@njit
def inv_se3(T):
    out = np.eye(4)
    Rt = T[:3, :3].T.copy()
    out[:3, :3] = Rt
    out[:3, 3] = -(Rt @ T[:3, 3])
    return out


@njit
def adjoint(T):
    R = T[:3, :3].copy()
    p = T[:3, 3].copy()
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[:3, 3:] = skew(p) @ R
    return A


@njit
def adjoint_inv(T):
    Rt = T[:3, :3].T.copy()
    p = T[:3, 3].copy()
    A = np.zeros((6, 6))
    A[:3, :3] = Rt
    A[3:, 3:] = Rt
    A[:3, 3:] = -(Rt @ skew(p))
    return A


@njit
def ad(x):
    A = np.zeros((6, 6))
    W = skew(x[3:])
    A[:3, :3] = W
    A[3:, 3:] = W
    A[:3, 3:] = skew(x[:3])
    return A


@njit
def ad_apply(x, y):
    """ad(x) @ y without forming the matrix."""
    out = np.empty(6)
    out[:3] = cross(x[3:], y[:3]) + cross(x[:3], y[3:])
    out[3:] = cross(x[3:], y[3:])
    return out


@njit
def chain_prefix(twists, q):
    """Prefix products P[k] = exp(xi_1 q_1) ... exp(xi_k q_k), P[0] = I."""
    n = twists.shape[0]
    P = np.empty((n + 1, 4, 4))
    P[0] = np.eye(4)
    for k in range(n):
        P[k + 1] = P[k] @ exp_twist(twists[k], q[k])
    return P


@njit
def forward_kinematics(twists, g_zero, q):
    P = chain_prefix(twists, q)
    return P[twists.shape[0]] @ g_zero


@njit
def spatial_columns(twists, P):
    """Spatial Jacobian columns Ad_{P[k]} xi_{k+1}."""
    n = twists.shape[0]
    S = np.empty((6, n))
    for k in range(n):
        S[:, k] = adjoint(P[k]) @ twists[k]
    return S


@njit
def body_jacobian_frame(S, T, last):
    """Body Jacobian of frame T driven by joints 0..last (inclusive)."""
    J = adjoint_inv(T) @ S
    J[:, last + 1:] = 0.0
    return J


@njit
def body_jacobian(twists, g_zero, q):
    P = chain_prefix(twists, q)
    n = twists.shape[0]
    S = spatial_columns(twists, P)
    T = P[n] @ g_zero
    return body_jacobian_frame(S, T, n - 1)


@njit
def link_jacobians(twists, link_frames, q):
    n = twists.shape[0]
    P = chain_prefix(twists, q)
    S = spatial_columns(twists, P)
    Js = np.empty((n, 6, n))
    for i in range(n):
        Js[i] = body_jacobian_frame(S, P[i + 1] @ link_frames[i], i)
    return Js


@njit
def mass_matrix(twists, link_frames, inertias, q):
    n = twists.shape[0]
    Js = link_jacobians(twists, link_frames, q)
    M = np.zeros((n, n))
    for i in range(n):
        M += Js[i].T @ inertias[i] @ Js[i]
    return 0.5 * (M + M.T)


@njit
def gravity_potential(twists, link_frames, masses, gravity, q):
    P = chain_prefix(twists, q)
    total = 0.0
    for i in range(twists.shape[0]):
        T = P[i + 1] @ link_frames[i]
        c = T[:3, 3]
        total -= masses[i] * (gravity[0] * c[0] + gravity[1] * c[1] + gravity[2] * c[2])
    return total


@njit
def gravity_gradient(twists, link_frames, masses, gravity, q, step):
    """Central finite difference of the gravity potential in joint space."""
    n = q.shape[0]
    g = np.empty(n)
    qq = q.copy()
    for k in range(n):
        qq[k] = q[k] + step
        hi = gravity_potential(twists, link_frames, masses, gravity, qq)
        qq[k] = q[k] - step
        lo = gravity_potential(twists, link_frames, masses, gravity, qq)
        qq[k] = q[k]
        g[k] = (hi - lo) / (2.0 * step)
    return g


@njit
def kinetic_gradient(Jee, Js, inertias, P, qdot):
    """d/dq of 0.5 P^T J M^-1 J^T P at fixed task momentum P (square J).

    Uses dJ[:, j]/dq_k = ad(J[:, j]) J[:, k] for j < k on every body Jacobian.
    """
    n = qdot.shape[0]
    out = np.zeros(n)
    # end-effector term: P^T (dJ/dq_k qdot)
    V = np.zeros(6)
    for k in range(n):
        out[k] += P @ ad_apply(V, Jee[:, k])
        V += Jee[:, k] * qdot[k]
    # mass-matrix term: -0.5 qdot^T dM/dq_k qdot
    for i in range(n):
        Ji = Js[i]
        GV = inertias[i] @ (Ji @ qdot)
        V = np.zeros(6)
        for k in range(i + 1):
            out[k] -= ad_apply(V, Ji[:, k]) @ GV
            V += Ji[:, k] * qdot[k]
    return out


@njit
def task_terms(twists, g_zero, link_frames, inertias, masses, gravity, q, P, fd_step):
    """Everything the task-space dynamics needs at (q, P) for a square manipulator.

    Returns (J, M, qdot, xi, grad_kin, grad_grav, smin): end-effector body
    Jacobian, joint mass matrix, joint rate, body twist, the left-trivialized
    configuration gradients of the kinetic and gravitational energies, and
    the smallest singular value of J.
    """
    n = twists.shape[0]
    Pre = chain_prefix(twists, q)
    S = spatial_columns(twists, Pre)
    J = body_jacobian_frame(S, Pre[n] @ g_zero, n - 1)
    Js = np.empty((n, 6, n))
    M = np.zeros((n, n))
    for i in range(n):
        Js[i] = body_jacobian_frame(S, Pre[i + 1] @ link_frames[i], i)
        M += Js[i].T @ inertias[i] @ Js[i]
    M = 0.5 * (M + M.T)
    smin = np.linalg.svd(J)[1][n - 1]
    qdot = np.linalg.solve(M, J.T @ P)
    xi = J @ qdot
    Jt = J.T.copy()
    grad_kin = np.linalg.solve(Jt, kinetic_gradient(J, Js, inertias, P, qdot))
    grad_grav = np.linalg.solve(Jt, gravity_gradient(twists, link_frames, masses, gravity, q, fd_step))
    return J, M, qdot, xi, grad_kin, grad_grav, smin


@njit
def coadjoint_drift(P, xi):
    """ad*_xi P in body coordinates: [pv x w; pw x w + pv x v]."""
    out = np.empty(6)
    out[:3] = cross(P[:3], xi[3:])
    out[3:] = cross(P[3:], xi[3:]) + cross(P[:3], xi[:3])
    return out
