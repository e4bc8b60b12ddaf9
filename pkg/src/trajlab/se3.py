"""Rotation and rigid-frame algebra for coarse-grained trajectories.

Rotations are stored as unit quaternions (w, x, y, z); matrices are
materialized on demand. All operations accept trailing-batched arrays, act
on float64, and renormalize quaternions so the unit-norm invariant holds to
1e-12 after every constructing operation. Nothing here mutates shared
state, so everything is safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Rotation",
    "RigidFrame",
    "FrameSet",
    "Trajectory",
    "AlignmentResult",
    "quat_normalize",
    "quat_multiply",
    "quat_conjugate",
    "quat_to_matrix",
    "matrix_to_quat",
    "quat_apply",
    "exp_so3",
    "log_so3",
    "random_rotation",
    "rmsd",
    "kabsch_rotation",
    "kabsch_align",
]

_UNIT_TOL = 1e-12


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-300):
        raise ValueError("cannot normalize zero quaternion")
    return q / norm


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, (w, x, y, z) convention."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion -> 3x3 rotation matrix (batched)."""
    q = quat_normalize(q)
    w, x, y, z = (q[..., i] for i in range(4))
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix -> unit quaternion, Shepperd's branch selection."""
    m = np.asarray(m, dtype=np.float64)
    batch = m.shape[:-2]
    mm = m.reshape((-1, 3, 3))
    n = mm.shape[0]
    q = np.empty((n, 4), dtype=np.float64)
    # 4 branch discriminants; pick the numerically largest per item.
    t0 = 1.0 + mm[:, 0, 0] + mm[:, 1, 1] + mm[:, 2, 2]
    t1 = 1.0 + mm[:, 0, 0] - mm[:, 1, 1] - mm[:, 2, 2]
    t2 = 1.0 - mm[:, 0, 0] + mm[:, 1, 1] - mm[:, 2, 2]
    t3 = 1.0 - mm[:, 0, 0] - mm[:, 1, 1] + mm[:, 2, 2]
    choice = np.argmax(np.stack([t0, t1, t2, t3], axis=1), axis=1)
    for i in range(n):
        a = mm[i]
        c = choice[i]
        if c == 0:
            s = 2.0 * np.sqrt(t0[i])
            q[i] = (0.25 * s, (a[2, 1] - a[1, 2]) / s, (a[0, 2] - a[2, 0]) / s, (a[1, 0] - a[0, 1]) / s)
        elif c == 1:
            s = 2.0 * np.sqrt(t1[i])
            q[i] = ((a[2, 1] - a[1, 2]) / s, 0.25 * s, (a[0, 1] + a[1, 0]) / s, (a[0, 2] + a[2, 0]) / s)
        elif c == 2:
            s = 2.0 * np.sqrt(t2[i])
            q[i] = ((a[0, 2] - a[2, 0]) / s, (a[0, 1] + a[1, 0]) / s, 0.25 * s, (a[1, 2] + a[2, 1]) / s)
        else:
            s = 2.0 * np.sqrt(t3[i])
            q[i] = ((a[1, 0] - a[0, 1]) / s, (a[0, 2] + a[2, 0]) / s, (a[1, 2] + a[2, 1]) / s, 0.25 * s)
    return quat_normalize(q.reshape(batch + (4,)))


def quat_apply(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v by quaternions q (broadcasting on leading axes)."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    qv = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)


def exp_so3(v: np.ndarray) -> "Rotation":
    """Exponential map: axis-angle vector (radians) -> Rotation.

    Small angles use the second-order Taylor expansion of sin(t/2)/t to stay
    exact through angle -> 0.
    """
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    w = np.cos(half)
    q = np.concatenate([w, k * v], axis=-1)
    return Rotation(quat_normalize(q))


def log_so3(r: "Rotation") -> np.ndarray:
    """Logarithm map: Rotation -> axis-angle vector with angle in [0, pi].

    Near angle pi the axis is recovered from the symmetric part of the
    rotation matrix (the sin-based formula degenerates there); the branch is
    discontinuous exactly at pi, which samplers never cross.
    """
    q = r.quat
    q = np.where(q[..., :1] < 0.0, -q, q)  # w >= 0 picks angle in [0, pi]
    w = np.clip(q[..., 0], -1.0, 1.0)
    vec = q[..., 1:]
    sin_half = np.linalg.norm(vec, axis=-1)
    angle = 2.0 * np.arctan2(sin_half, w)
    out = np.zeros_like(vec)

    generic = sin_half > 1e-12
    near_pi = angle > np.pi - 1e-6
    use_sin = generic & ~near_pi
    scale = np.where(use_sin, angle / np.where(use_sin, sin_half, 1.0), 0.0)
    out = vec * scale[..., None]

    if np.any(near_pi):
        # Axis from the symmetric part: M + I ~ 2 axis axis^T at angle pi.
        m = quat_to_matrix(q)
        a2 = np.clip((np.stack([m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]], axis=-1) + 1.0) / 2.0, 0.0, 1.0)
        axis = np.sqrt(a2)
        # Off-diagonal signs fix the axis orientation up to global sign.
        sx = np.ones_like(axis[..., 0])
        sy = np.sign(np.where(m[..., 0, 1] != 0, m[..., 0, 1], 1.0))
        sz = np.sign(np.where(m[..., 0, 2] != 0, m[..., 0, 2], 1.0))
        axis = axis * np.stack([sx, sy, sz], axis=-1)
        norm = np.linalg.norm(axis, axis=-1, keepdims=True)
        axis = axis / np.where(norm > 0, norm, 1.0)
        out = np.where(near_pi[..., None], axis * angle[..., None], out)
    return out


def random_rotation(rng: np.random.Generator, shape: tuple[int, ...] = ()) -> "Rotation":
    """Haar-uniform rotations from normalized 4D Gaussians."""
    q = rng.standard_normal(shape + (4,))
    return Rotation(quat_normalize(q))


@dataclass(frozen=True)
class Rotation:
    """Unit-quaternion rotation; `quat` may carry leading batch axes."""

    quat: np.ndarray

    def __post_init__(self):
        q = quat_normalize(self.quat)
        object.__setattr__(self, "quat", q)

    @staticmethod
    def identity(shape: tuple[int, ...] = ()) -> "Rotation":
        q = np.zeros(shape + (4,), dtype=np.float64)
        q[..., 0] = 1.0
        return Rotation(q)

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Rotation":
        return Rotation(matrix_to_quat(m))

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def compose(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_multiply(self.quat, other.quat))

    def inverse(self) -> "Rotation":
        return Rotation(quat_conjugate(self.quat))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return quat_apply(self.quat, v)

    def angle(self) -> np.ndarray:
        w = np.abs(np.clip(self.quat[..., 0], -1.0, 1.0))
        return 2.0 * np.arccos(w)

    def allclose(self, other: "Rotation", tol: float = 1e-12) -> bool:
        # Quaternions are a double cover: q and -q are the same rotation,
        # so the sign has to be resolved per batch item.
        diff = np.max(np.abs(self.quat - other.quat), axis=-1)
        summ = np.max(np.abs(self.quat + other.quat), axis=-1)
        return bool(np.all(np.minimum(diff, summ) <= tol))


@dataclass(frozen=True)
class RigidFrame:
    """SE(3) element: rotation plus translation in angstroms."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape[-1] != 3:
            raise ValueError("translation must have trailing dimension 3")
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity(shape: tuple[int, ...] = ()) -> "RigidFrame":
        return RigidFrame(Rotation.identity(shape), np.zeros(shape + (3,)))

    def inverse(self) -> "RigidFrame":
        rinv = self.rotation.inverse()
        return RigidFrame(rinv, -rinv.apply(self.translation))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.rotation.apply(v) + self.translation


def compose(a: RigidFrame, b: RigidFrame) -> RigidFrame:
    """SE(3) composition: (a o b)(x) = a(b(x))."""
    return RigidFrame(
        a.rotation.compose(b.rotation),
        a.rotation.apply(b.translation) + a.translation,
    )


class FrameSet:
    """One trajectory frame: N per-residue rigid frames (N >= 2)."""

    def __init__(self, quats: np.ndarray, translations: np.ndarray):
        quats = quat_normalize(np.asarray(quats, dtype=np.float64))
        translations = np.asarray(translations, dtype=np.float64)
        if quats.ndim != 2 or quats.shape[1] != 4:
            raise ValueError("quats must have shape (N, 4)")
        if translations.shape != (quats.shape[0], 3):
            raise ValueError("translations must have shape (N, 3)")
        if quats.shape[0] < 2:
            raise ValueError("a FrameSet needs at least 2 residues")
        self.quats = quats
        self.translations = translations

    @property
    def n_residues(self) -> int:
        return self.quats.shape[0]

    @property
    def rotations(self) -> Rotation:
        return Rotation(self.quats)

    def copy(self) -> "FrameSet":
        return FrameSet(self.quats.copy(), self.translations.copy())

    def transformed(self, g: RigidFrame) -> "FrameSet":
        """Apply one global rigid transform to every residue frame."""
        q = quat_multiply(g.rotation.quat, self.quats)
        t = g.rotation.apply(self.translations) + g.translation
        return FrameSet(q, t)

    @staticmethod
    def identity(n: int) -> "FrameSet":
        q = np.zeros((n, 4))
        q[:, 0] = 1.0
        return FrameSet(q, np.zeros((n, 3)))


@dataclass
class Trajectory:
    """Ordered frames plus physical stride metadata (ns).

    `strides` holds the L-1 per-step time deltas; uniform-stride
    trajectories carry the repeated value. All frames share N.
    """

    frame_sets: list[FrameSet]
    strides: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not self.frame_sets:
            raise ValueError("trajectory needs at least one frame")
        n = self.frame_sets[0].n_residues
        for fs in self.frame_sets:
            if fs.n_residues != n:
                raise ValueError("all frames must share the residue count")
        L = len(self.frame_sets)
        if self.strides is None:
            self.strides = np.zeros((max(L - 1, 0),), dtype=np.float64)
        else:
            s = np.atleast_1d(np.asarray(self.strides, dtype=np.float64))
            if s.size == 1:
                s = np.full((max(L - 1, 0),), float(s[0]))
            if s.shape != (max(L - 1, 0),):
                raise ValueError("strides must have length L-1 (or be a scalar)")
            if L > 1 and np.any(s <= 0):
                raise ValueError("strides must be positive")
            self.strides = s

    @property
    def n_frames(self) -> int:
        return len(self.frame_sets)

    @property
    def n_residues(self) -> int:
        return self.frame_sets[0].n_residues

    @property
    def uniform_stride(self) -> float | None:
        if self.strides.size == 0:
            return None
        if np.allclose(self.strides, self.strides[0]):
            return float(self.strides[0])
        return None

    def translations(self) -> np.ndarray:
        """Stacked (L, N, 3) translation array."""
        return np.stack([fs.translations for fs in self.frame_sets])

    def quaternions(self) -> np.ndarray:
        return np.stack([fs.quats for fs in self.frame_sets])

    def transformed(self, g: RigidFrame) -> "Trajectory":
        return Trajectory([fs.transformed(g) for fs in self.frame_sets], self.strides.copy())


def rmsd(a: FrameSet, b: FrameSet) -> float:
    """Root mean squared deviation of translations, in angstroms."""
    if a.n_residues != b.n_residues:
        raise ValueError("FrameSets differ in residue count")
    d = a.translations - b.translations
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))))


@dataclass
class AlignmentResult:
    trajectory: Trajectory
    transform: RigidFrame
    rmsd_after: float
    degenerate: bool


def kabsch_rotation(mobile: np.ndarray, reference: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Optimal rigid transform (R, t) mapping mobile points onto reference.

    Returns (R, t, degenerate); degenerate point sets (N < 3 or collinear)
    yield the identity with the flag set rather than an arbitrary rotation.
    """
    mobile = np.asarray(mobile, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if mobile.shape != reference.shape:
        raise ValueError("point sets must have identical shapes")
    n = mobile.shape[0]
    mu_m = mobile.mean(axis=0)
    mu_r = reference.mean(axis=0)
    h = (mobile - mu_m).T @ (reference - mu_r)
    u, s, vt = np.linalg.svd(h)
    degenerate = n < 3 or s[0] <= 0 or s[1] <= 1e-9 * s[0]
    if degenerate:
        return np.eye(3), np.zeros(3), True
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = mu_r - rot @ mu_m
    return rot, t, False


def kabsch_align(mobile: Trajectory, reference_frame: FrameSet) -> AlignmentResult:
    """Rigidly align a trajectory to a reference frame via its first frame.

    One transform is fit on frame-1 translations against the reference and
    applied to the whole trajectory; no per-frame re-alignment happens.
    """
    if mobile.n_residues != reference_frame.n_residues:
        raise ValueError("residue counts differ")
    rot, t, degenerate = kabsch_rotation(
        mobile.frame_sets[0].translations, reference_frame.translations
    )
    g = RigidFrame(Rotation.from_matrix(rot), t)
    aligned = mobile.transformed(g)
    return AlignmentResult(
        trajectory=aligned,
        transform=g,
        rmsd_after=rmsd(aligned.frame_sets[0], reference_frame),
        degenerate=degenerate,
    )
