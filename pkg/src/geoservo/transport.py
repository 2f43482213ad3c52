"""Depth clouds as discrete measures, unbalanced optimal transport and the
transport-driven steering input.

Transport uses the Kullback-Leibler marginal relaxation

    min_pi <C, pi> + eps KL(pi | a x b) + tau KL(pi 1 | a) + tau KL(pi^T 1 | b)

solved by log-stabilized Sinkhorn scaling.  The reported cost drops the
entropic term: <C, pi> + tau KL(pi 1 | a) + tau KL(pi^T 1 | b).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import simpson
from scipy.linalg import expm
from scipy.optimize import linprog
from scipy.spatial.distance import cdist

from . import _ot_kernels as OT
from .lie import Pose, format_float, nearest_rotation
from .port_hamiltonian import interconnection, task_terms

MASS_TOL = 1e-9
UNMAPPED_MASS = 1e-12


class EmptyCloudError(ValueError):
    """A depth cloud with no atoms."""


class SinkhornDivergence(RuntimeError):
    """Sinkhorn scaling did not reach the requested tolerance."""

    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = float(residual)
        super().__init__(f"Sinkhorn did not converge in {iterations} iterations (last change {residual:.3e})")


@dataclass(frozen=True, eq=False)
class DepthCloud:
    """Depth atoms in the camera frame of ``support_pose`` with probability weights."""

    support_pose: Pose
    pixels: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    resolution: tuple[int, int] = (0, 0)
    max_range: float = np.inf

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        px = np.array(self.pixels, dtype=np.int64).reshape(-1, 2)
        w = np.array(self.weights, dtype=float).reshape(-1)
        if not (len(pts) == len(px) == len(w)):
            raise ValueError("pixels, points and weights must have the same length")
        if len(w) == 0:
            raise EmptyCloudError("depth cloud has no atoms")
        if np.any(w <= 0.0):
            raise ValueError("weights must be positive")
        if abs(w.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"weights must sum to 1 (got {w.sum():.12f})")
        z = pts[:, 2]
        if np.any(z <= 0.0) or np.any(z > self.max_range):
            raise ValueError("depths must lie in (0, max_range]")
        for arr in (pts, px, w):
            arr.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "resolution", tuple(int(r) for r in self.resolution))

    def __len__(self):
        return len(self.weights)

    @property
    def world_points(self) -> np.ndarray:
        return self.support_pose.act(self.points)


@dataclass(frozen=True, eq=False)
class TransportPlan:
    plan: np.ndarray
    cost: float
    marginals: tuple[np.ndarray, np.ndarray]
    tau: float
    eps: float
    potentials: tuple[np.ndarray, np.ndarray] = field(default=None, repr=False)
    iterations: int = 0


@dataclass(frozen=True, eq=False)
class GramianPair:
    """Gramians over [0, 1], [t, 1] and [0, t] of the frozen linearization."""

    Wc_full: np.ndarray
    Wc_togo: np.ndarray
    Wc_prior: np.ndarray


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-atom barycentric displacement in world coordinates.

    ``mapped`` is False where the unbalanced relaxation destroyed the mass.
    The supporting camera poses of both clouds travel along so the field can
    be read in either camera frame.
    """

    source: np.ndarray
    target: np.ndarray
    mass: np.ndarray
    mapped: np.ndarray
    source_pose: Pose | None = None
    target_pose: Pose | None = None

    @property
    def displacement(self) -> np.ndarray:
        d = self.target - self.source
        d[~self.mapped] = 0.0
        return d


# ---------------------------------------------------------------- costs


def ground_cost(a: DepthCloud, b: DepthCloud, p: float = 2.0) -> np.ndarray:
    """Matrix of ||x_i - y_j||^p between world-frame atoms."""
    if p < 1:
        raise ValueError("cost exponent p must be >= 1")
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloudError("cannot build a cost matrix for an empty cloud")
    D = cdist(a.world_points, b.world_points)
    return D ** p if p != 1 else D


# -------------------------------------------------------------- sinkhorn


def sinkhorn_unbalanced(mu, nu, cost, eps: float, tau: float, max_iter: int = 20000,
                        tol: float = 1e-9, init=None, eps_scaling: bool = True) -> TransportPlan:
    """Unbalanced entropic transport between two measures.

    ``mu`` and ``nu`` are DepthClouds or plain weight vectors.  ``init`` is
    an optional pair of dual potentials (f, g) for a warm start; f may be
    None, in which case it is rebuilt from g.  Without it the
    iteration starts with a geometric eps schedule from the cost scale down
    to ``eps`` when ``eps_scaling`` is set.
    """
    a = _weights(mu)
    b = _weights(nu)
    C = np.ascontiguousarray(cost, dtype=float)
    if C.shape != (len(a), len(b)):
        raise ValueError(f"cost shape {C.shape} does not match measures ({len(a)}, {len(b)})")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    if not (eps > 0 and tau > 0):
        raise ValueError("eps and tau must be positive")
    lam = tau / (tau + eps)
    loga, logb = np.log(a), np.log(b)
    used = 0
    if init is not None:
        f, g = init
        g = np.array(g, dtype=float)
        if len(g) != len(b):
            raise ValueError("warm-start potential g does not match the target measure")
        if f is None or len(f) != len(a):
            # only the target side carries over, e.g. when the source cloud was re-rendered
            f = OT.c_transform(C, logb, g, eps, lam)
        f = np.array(f, dtype=float)
    else:
        f = np.zeros(len(a))
        g = np.zeros(len(b))
        schedule = [eps]
        if eps_scaling:
            e = float(C.max())
            schedule = []
            while e > 2.0 * eps:
                schedule.append(e)
                e *= 0.5
            schedule.append(eps)
        for e in schedule[:-1]:
            le = tau / (tau + e)
            f = OT.c_transform(C, logb, g, e, le)
            g = OT.c_transform(np.ascontiguousarray(C.T), loga, f, e, le)
            f, g, it, _ = OT.sinkhorn_loop(C, a, b, e, tau, f, g, 50, tol)
            used += it
        f = OT.c_transform(C, logb, g, eps, lam)
        g = OT.c_transform(np.ascontiguousarray(C.T), loga, f, eps, lam)
    f, g, it, change = OT.sinkhorn_loop(C, a, b, eps, tau, f, g, max_iter, tol)
    used += it
    if not np.isfinite(change) or (it >= max_iter and change >= tol):
        raise SinkhornDivergence(used, change)
    P = OT.plan_from_potentials(C, a, b, f, g, eps)
    return _make_plan(P, C, a, b, eps, tau, (f, g), used)


def _weights(x) -> np.ndarray:
    w = x.weights if isinstance(x, DepthCloud) else np.asarray(x, dtype=float).reshape(-1)
    if len(w) == 0:
        raise EmptyCloudError("empty measure")
    if np.any(w <= 0):
        raise ValueError("measure weights must be positive")
    return np.ascontiguousarray(w, dtype=float)


def _make_plan(P, C, a, b, eps, tau, potentials, iterations) -> TransportPlan:
    rows, cols = P.sum(axis=1), P.sum(axis=0)
    cost = float(np.sum(P * C)) + tau * OT.generalized_kl(rows, a) + tau * OT.generalized_kl(cols, b)
    return TransportPlan(P, cost, (rows, cols), float(tau), float(eps), potentials, int(iterations))


def unbalanced_cost(plan: np.ndarray, cost: np.ndarray, a, b, tau: float) -> float:
    """<C, pi> + tau KL(pi 1 | a) + tau KL(pi^T 1 | b)."""
    a, b = _weights(a), _weights(b)
    P = np.asarray(plan, dtype=float)
    return float(np.sum(P * cost) + tau * OT.generalized_kl(P.sum(1), a) + tau * OT.generalized_kl(P.sum(0), b))


def exact_transport(a, b, cost) -> tuple[float, np.ndarray]:
    """Balanced optimal transport by linear programming (HiGHS).

    Returns (optimal cost, plan).  The total masses must agree.
    """
    a, b = _weights(a), _weights(b)
    C = np.asarray(cost, dtype=float)
    if abs(a.sum() - b.sum()) > 1e-9:
        raise ValueError("exact transport needs equal total masses")
    n, m = C.shape
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"linear program failed: {res.message}")
    return float(res.fun), res.x.reshape(n, m)


def wasserstein_distance(mu: DepthCloud, nu: DepthCloud, p: float = 2.0, eps: float = 1e-3,
                         tau: float = 1.0, **kwargs) -> float:
    """(unbalanced transport cost)^(1/p); ``eps`` is absolute here."""
    C = ground_cost(mu, nu, p)
    plan = sinkhorn_unbalanced(mu, nu, C, eps, tau, **kwargs)
    return max(plan.cost, 0.0) ** (1.0 / p)


def relative_eps(cost: np.ndarray, eps_rel: float) -> float:
    """Entropic regularization scaled by the median ground cost."""
    med = float(np.median(cost))
    return eps_rel * (med if med > 0 else 1.0)


# ----------------------------------------------------------- transport map


def transport_map(plan: TransportPlan | np.ndarray, source: DepthCloud, target: DepthCloud) -> DisplacementField:
    """Barycentric projection of the plan, in world coordinates."""
    P = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=float)
    X, Y = source.world_points, target.world_points
    mass = P.sum(axis=1)
    mapped = mass >= UNMAPPED_MASS
    T = X.copy()
    T[mapped] = (P[mapped] @ Y) / mass[mapped, None]
    return DisplacementField(X, T, mass, mapped, source.support_pose, target.support_pose)


def rigid_fit(X, Y, w) -> tuple[np.ndarray, np.ndarray]:
    """Weighted best rigid motion y ~ Q x + t (Kabsch).  Returns (Q, t)."""
    w = np.asarray(w, dtype=float)
    if w.sum() <= 0.0:
        return np.eye(3), np.zeros(3)
    w = w / w.sum()
    cx, cy = w @ X, w @ Y
    H = ((Y - cy) * w[:, None]).T @ (X - cx)
    Q = nearest_rotation(H)
    return Q, cy - Q @ cx


def estimate_target_pose(field: DisplacementField) -> Pose:
    """Camera pose that would see each mapped atom where the transport map sends it.

    Matched atoms are expressed in the source and target camera frames and
    registered by the mass-weighted mean shift plus the best-fit rotation;
    the fitted motion h maps source-camera coordinates to target-camera
    coordinates, so the estimate is source_pose h^-1.
    """
    gs, gt = field.source_pose, field.target_pose
    if gs is None or gt is None:
        raise ValueError("displacement field carries no camera poses")
    keep = field.mapped
    Xc = gs.inverse().act(field.source[keep])
    Yc = gt.inverse().act(field.target[keep])
    Q, t = rigid_fit(Xc, Yc, field.mass[keep])
    h = Pose(Q, t)
    return gs @ h.inverse()


def lifted_displacement(g: Pose, field: DisplacementField) -> np.ndarray:
    """State-space displacement (18 entries) from the pose ``g`` toward the estimated target.

    Position and rotation rows are the flattened difference; the momentum part is zero.
    """
    g_est = estimate_target_pose(field)
    dx = np.zeros(18)
    dx[:3] = g_est.p - g.p
    dx[3:12] = (g_est.R - g.R).ravel()
    return dx


# ---------------------------------------------------------------- gramian


def controllability_gramian(A, B, t0: float, t1: float, quadrature_steps: int = 16) -> np.ndarray:
    """Composite Simpson rule for int_{t0}^{t1} Psi(l) B B^T Psi(l)^T dl, Psi(l) = exp(A l)."""
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    if quadrature_steps < 2:
        raise ValueError("quadrature_steps must be at least 2")
    steps = quadrature_steps + (quadrature_steps % 2)
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    grid = np.linspace(t0, t1, steps + 1)
    h = grid[1] - grid[0]
    step = expm(A * h)
    Psi = expm(A * t0)
    vals = np.empty((steps + 1,) + (A.shape[0], A.shape[0]))
    BBt = B @ B.T
    for k in range(steps + 1):
        vals[k] = Psi @ BBt @ Psi.T
        Psi = step @ Psi
    W = simpson(vals, x=grid, axis=0)
    return 0.5 * (W + W.T)


def gramian_pair(A, B, t: float, quadrature_steps: int = 16) -> GramianPair:
    full = controllability_gramian(A, B, 0.0, 1.0, quadrature_steps)
    zero = np.zeros_like(full)
    togo = controllability_gramian(A, B, t, 1.0, quadrature_steps) if t < 1.0 else zero
    prior = controllability_gramian(A, B, 0.0, t, quadrature_steps) if t > 0.0 else zero
    return GramianPair(full, togo, prior)


def gramian_pinv(W, rcond: float = 1e-10) -> tuple[np.ndarray, int]:
    """Pseudo-inverse on the range of W and the numerical rank."""
    s = np.linalg.eigvalsh(W)
    cutoff = rcond * max(s.max(), 0.0)
    Wp = np.linalg.pinv(W, rcond=rcond, hermitian=True)
    return Wp, int(np.sum(s > cutoff))


@dataclass(frozen=True, eq=False)
class SteeringResult:
    torque: np.ndarray
    transport_state: np.ndarray    # T_t evaluated on the current state
    rank: int
    clamped: bool


def steering_input(A, B18, x, t: float, delta, grams: GramianPair, torque_limit: float = np.inf,
                   gain: float = 1.0, receding: bool = True) -> SteeringResult:
    """Steering input B^T Psi^T W_c(0,1)^+ delta.

    ``delta`` is the lifted displacement standing in for the transport
    mismatch.  With ``receding`` the mismatch is taken as freshly measured
    from the current state, so the plan restarts here and Psi = Psi(1) (the
    opening control of a unit-horizon plan).  Otherwise Psi = Psi(1 - t),
    the control a single plan started at t = 0 would apply at progress t;
    past mid-course that is the braking half of the plan and points away
    from the target.

    ``x`` is the flattened state used to evaluate the interpolant
    T_t = Psi(t) W(t,1) W^+ Psi(t) x + W(0,t) Psi(t)^T W^+ (x + delta).
    """
    A = np.asarray(A, dtype=float)
    Wp, rank = gramian_pinv(grams.Wc_full)
    Psi_u = expm(A * (1.0 if receding else 1.0 - t))
    u = gain * (np.asarray(B18).T @ Psi_u.T @ Wp @ np.asarray(delta, dtype=float))
    Psi = expm(A * t)
    x = np.asarray(x, dtype=float)
    Tt = Psi @ grams.Wc_togo @ Wp @ Psi @ x + grams.Wc_prior @ Psi.T @ Wp @ (x + delta)
    clamped = bool(np.any(np.abs(u) > torque_limit))
    return SteeringResult(np.clip(u, -torque_limit, torque_limit), Tt, rank, clamped)


def linearization(m, s, terms=None) -> tuple[np.ndarray, np.ndarray]:
    """A = the 18x18 interconnection at ``s`` and B18 = [0; B]."""
    terms = task_terms(m, s) if terms is None else terms
    B18 = np.zeros((18, m.n))
    B18[12:] = terms.B
    return interconnection(s).matrix, B18


def gramians_at(m, s, t: float, quadrature_steps: int = 16, terms=None) -> GramianPair:
    A, B18 = linearization(m, s, terms)
    return gramian_pair(A, B18, t, quadrature_steps)


def u_dc(m, s, t: float, field: DisplacementField, grams: GramianPair, torque_limit: float = np.inf,
         gain: float = 1.0, terms=None, receding: bool = True) -> SteeringResult:
    """Transport-driven steering torques at state ``s`` and progress ``t``.

    The displacement field is lifted to a pose increment (mean displacement
    plus best-fit rotation) and steered through the frozen linearization.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("progress t must lie in [0, 1]")
    A, B18 = linearization(m, s, terms)
    delta = lifted_displacement(s.g, field)
    return steering_input(A, B18, s.flatten(), t, delta, grams, torque_limit, gain, receding)


# ------------------------------------------------------------------ files


def write_cloud(cloud: DepthCloud, path) -> None:
    """Header ``n m`` plus the 16 support-pose floats, then ``x y X Y Z weight`` per atom."""
    n, m = cloud.resolution
    lines = [f"{n} {m} {cloud.support_pose.to_text()}"]
    for (u, v), (X, Y, Z), w in zip(cloud.pixels, cloud.points, cloud.weights):
        lines.append(f"{int(u)} {int(v)} {format_float(X)} {format_float(Y)} {format_float(Z)} {format_float(w)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud(path, max_range: float = np.inf) -> DepthCloud:
    lines = Path(path).read_text().strip().splitlines()
    head = lines[0].split()
    if len(head) != 18:
        raise ValueError("cloud header must hold the resolution and 16 pose floats")
    res = (int(head[0]), int(head[1]))
    pose = Pose.from_text(" ".join(head[2:]))
    rows = np.array([[float(t) for t in ln.split()] for ln in lines[1:]]).reshape(-1, 6)
    return DepthCloud(pose, rows[:, :2].astype(np.int64), rows[:, 2:5], rows[:, 5], res, max_range)


# ------------------------------------------------------------- oracle suite


@dataclass(frozen=True)
class OracleReport:
    relative_errors: np.ndarray      # per instance, tau = tau_balanced
    gaps: np.ndarray                 # instances x taus, |cost - LP optimum|
    taus: tuple
    identical_distance: float
    eps: float

    @property
    def worst(self) -> float:
        return float(self.relative_errors.max())

    @property
    def monotone(self) -> np.ndarray:
        """Per instance: gap non-increasing along ``taus``."""
        return np.all(np.diff(self.gaps, axis=1) <= 0.0, axis=1)


def random_instance(rng: np.random.Generator, max_atoms: int = 16):
    """Balanced pair of random point sets in the unit cube with squared-distance cost."""
    n, m = rng.integers(2, max_atoms + 1, size=2)
    X, Y = rng.random((n, 3)), rng.random((m, 3))
    a = rng.random(n) + 0.1
    b = rng.random(m) + 0.1
    return a / a.sum(), b / b.sum(), cdist(X, Y) ** 2


def compare_with_exact(n_instances: int = 50, seed: int = 0, eps: float = 1e-3,
                       taus=(1.0, 10.0, 100.0, 1e4), max_atoms: int = 16) -> OracleReport:
    """Unbalanced Sinkhorn against the linear-programming optimum on small balanced instances.

    The last entry of ``taus`` is the near-balanced setting whose relative
    error is reported; ``eps`` is absolute.
    """
    rng = np.random.default_rng(seed)
    rel, gaps = [], []
    for _ in range(n_instances):
        a, b, C = random_instance(rng, max_atoms)
        opt, _ = exact_transport(a, b, C)
        row = []
        for tau in taus:
            plan = sinkhorn_unbalanced(a, b, C, eps, tau, max_iter=100000, tol=1e-10)
            row.append(abs(plan.cost - opt))
        gaps.append(row)
        rel.append(row[-1] / opt)
    # identical clouds: zero-diagonal cost, near-balanced relaxation.  Well
    # separated atoms make the kernel nearly diagonal, and each atom then has
    # its own slowly contracting (f + c, g - c) mode that leaves the plan
    # unchanged, so a looser potential tolerance is used here.
    a, _, _ = random_instance(rng, max_atoms)
    X = rng.random((len(a), 3))
    same = sinkhorn_unbalanced(a, a, cdist(X, X) ** 2, eps, 1e3, max_iter=100000, tol=1e-6)
    return OracleReport(np.array(rel), np.array(gaps), tuple(taus), max(same.cost, 0.0) ** 0.5, eps)
