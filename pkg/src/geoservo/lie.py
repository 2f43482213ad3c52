"""SE(3) poses, twists and the left-invariant pose metric."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K

ORTHO_TOL = 1e-9
STRUCT_TOL = 1e-9
SMALL_ANGLE = 1e-12


class StructureError(ValueError):
    """A matrix does not have the structure required by se(3) or SE(3)."""


class BranchAmbiguityError(ValueError):
    """The logarithm is not unique (rotation angle of pi)."""


def skew(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def unskew(S) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]], dtype=float)


@dataclass(frozen=True)
class Twist:
    """Body velocity (v, w): linear in m/s, angular in rad/s."""

    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "v", np.array(self.v, dtype=float).reshape(3))
        object.__setattr__(self, "w", np.array(self.w, dtype=float).reshape(3))
        self.v.flags.writeable = False
        self.w.flags.writeable = False

    @classmethod
    def from_vector(cls, x) -> Twist:
        x = np.asarray(x, dtype=float).reshape(6)
        return cls(x[:3], x[3:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.w])

    def __eq__(self, other):
        if not isinstance(other, Twist):
            return NotImplemented
        return bool(np.array_equal(self.v, other.v) and np.array_equal(self.w, other.w))

    __hash__ = None


_I3 = np.eye(3)


@dataclass(frozen=True)
class Pose:
    """Rigid transform with rotation R (SO(3)) and position p in meters."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        p = np.array(self.p, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(p))):
            raise StructureError("pose contains non-finite entries")
        det = R[0, 0] * (R[1, 1] * R[2, 2] - R[1, 2] * R[2, 1]) - R[0, 1] * (R[1, 0] * R[2, 2] - R[1, 2] * R[2, 0]) \
            + R[0, 2] * (R[1, 0] * R[2, 1] - R[1, 1] * R[2, 0])
        if abs(det - 1.0) > ORTHO_TOL or np.sqrt(np.sum((R.T @ R - _I3) ** 2)) > ORTHO_TOL:
            raise StructureError("rotation block is not in SO(3)")
        R.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "p", p)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, m, project: bool = False) -> Pose:
        """Build from a 4x4 homogeneous matrix.

        With ``project=True`` the rotation block is replaced by its nearest
        rotation in the Frobenius norm (polar decomposition).
        """
        m = np.asarray(m, dtype=float).reshape(4, 4)
        if not project and not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise StructureError("bottom row must be [0 0 0 1]")
        R = m[:3, :3]
        if project:
            R = nearest_rotation(R)
        return cls(R, m[:3, 3])

    @classmethod
    def from_translation(cls, p) -> Pose:
        return cls(np.eye(3), p)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.p
        return T

    def inverse(self) -> Pose:
        return Pose(self.R.T, -self.R.T @ self.p)

    def __matmul__(self, other: Pose) -> Pose:
        if not isinstance(other, Pose):
            return NotImplemented
        return Pose(self.R @ other.R, self.R @ other.p + self.p)

    def act(self, points) -> np.ndarray:
        """Apply the transform to an (N, 3) array of points."""
        return np.asarray(points, dtype=float) @ self.R.T + self.p

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.R, other.R) and np.array_equal(self.p, other.p))

    __hash__ = None

    def to_text(self) -> str:
        """Row-major 4x4 homogeneous matrix, 16 floats."""
        return " ".join(format_float(x) for x in self.matrix.ravel())

    @classmethod
    def from_text(cls, text: str, project: bool = False) -> Pose:
        vals = [float(tok) for tok in text.split()]
        if len(vals) != 16:
            raise StructureError(f"expected 16 floats for a pose, got {len(vals)}")
        return cls.from_matrix(np.array(vals).reshape(4, 4), project=project)


def format_float(x: float) -> str:
    return repr(float(x))


@dataclass(frozen=True)
class MetricWeights:
    """Position and rotation weights of the left-invariant pose metric."""

    Gp: np.ndarray = field(default_factory=lambda: np.eye(3))
    GR: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        for name in ("Gp", "GR"):
            G = np.array(getattr(self, name), dtype=float).reshape(3, 3)
            if np.max(np.abs(G - G.T)) > 1e-12:
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(G)) <= 0.0:
                raise ValueError(f"{name} must be positive definite")
            G.flags.writeable = False
            object.__setattr__(self, name, G)


def nearest_rotation(A) -> np.ndarray:
    U, _, Vt = np.linalg.svd(np.asarray(A, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def hat(t: Twist) -> np.ndarray:
    m = np.zeros((4, 4))
    m[:3, :3] = skew(t.w)
    m[:3, 3] = t.v
    return m


def vee(m) -> Twist:
    m = np.asarray(m, dtype=float)
    if m.shape != (4, 4):
        raise StructureError(f"expected a 4x4 matrix, got shape {m.shape}")
    W = m[:3, :3]
    if np.max(np.abs(W + W.T)) > STRUCT_TOL or np.max(np.abs(m[3])) > STRUCT_TOL:
        raise StructureError("matrix is not in se(3)")
    return Twist(m[:3, 3], unskew(W))


def exp_twist(t: Twist, q: float = 1.0) -> Pose:
    """Exact exponential exp(hat(t) q); w need not be unit norm."""
    T = K.exp_twist(np.ascontiguousarray(t.vector), float(q))
    return Pose(T[:3, :3], T[:3, 3])


def log_pose(g: Pose) -> tuple[Twist, float]:
    """Inverse of :func:`exp_twist` returning a unit twist and its magnitude.

    For rotations the angular part has unit norm and the magnitude is the
    angle; for pure translations the linear part has unit norm.
    """
    tr = float(np.trace(g.R))
    if tr <= -1.0 + 1e-9:
        raise BranchAmbiguityError("rotation angle is pi; logarithm is not unique")
    theta = math.acos(min(1.0, (tr - 1.0) / 2.0))
    if theta < 1e-12:
        # first-order correction keeps the roundtrip exact to machine precision
        w_small = unskew(g.R - g.R.T) / 2.0
        dist = float(np.linalg.norm(g.p))
        if dist == 0.0 and not np.any(w_small):
            return Twist(), 0.0
        vec = np.concatenate([g.p, w_small])
        mag = float(np.linalg.norm(vec))
        return Twist.from_vector(vec / mag), mag
    w = unskew(g.R - g.R.T) / (2.0 * math.sin(theta))
    W = skew(w)
    # inverse of V(theta) = I + (1-cos)/theta W + (theta-sin)/theta W^2, unit w
    half = theta / 2.0
    Vinv = np.eye(3) / theta - 0.5 * W + (1.0 / theta - 0.5 / math.tan(half)) * (W @ W)
    v = Vinv @ g.p
    return Twist(v, w), theta


def adjoint(g: Pose) -> np.ndarray:
    return K.adjoint(g.matrix)


def ad_small(x: Twist) -> np.ndarray:
    return K.ad(np.ascontiguousarray(x.vector))


def bracket(x: Twist, y: Twist) -> Twist:
    X, Y = hat(x), hat(y)
    return vee(X @ Y - Y @ X)


def left_translate(g: Pose, x: Twist) -> np.ndarray:
    """Tangent vector g * hat(x) at g."""
    return g.matrix @ hat(x)


def rotation_distance(R0, R1, GR=None) -> float:
    GR = np.eye(3) if GR is None else GR
    c = (np.trace(np.asarray(R0).T @ np.asarray(R1)) - 1.0) / 2.0
    return float(np.linalg.norm(GR, "fro") * math.acos(min(1.0, max(-1.0, c))))


def position_distance(p0, p1, Gp=None) -> float:
    Gp = np.eye(3) if Gp is None else Gp
    return float(np.linalg.norm(Gp @ (np.asarray(p0) - np.asarray(p1))))


def geodesic_distance(g0: Pose, g1: Pose, w: MetricWeights | None = None) -> float:
    """sqrt(delta_R + delta_p) with the rotation angle weighted by ||G_R||_F."""
    w = MetricWeights() if w is None else w
    return math.sqrt(rotation_distance(g0.R, g1.R, w.GR) + position_distance(g0.p, g1.p, w.Gp))
