"""Camera geometry: rigid transforms, pinhole projection, and pose solvers.

Conventions used throughout the package:

* world-to-camera mapping ``x_cam = R @ x_world + t``,
* pixel coordinates ``(u, v)`` with ``u`` along the image width,
* a point is visible when its camera depth exceeds ``1e-6`` and its pixel
  falls inside ``[0, width) x [0, height)``,
* quaternions are ``(w, x, y, z)`` with ``w >= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, MinimalSampleUnavailable, NoConsensus

DEPTH_EPS = 1e-6
_ROT_TOL = 1e-9


# ---------------------------------------------------------------------------
# basic types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world-to-camera transform ``x_cam = rotation @ x_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("pose entries must be finite")
        if not np.allclose(r @ r.T, np.eye(3), atol=_ROT_TOL):
            raise ValueError("rotation is not orthonormal within 1e-9")
        if np.linalg.det(r) < 0.0:
            raise ValueError("rotation has negative determinant")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, q, t) -> "Pose":
        return cls(rotation_from_quaternion(q), np.asarray(t, dtype=np.float64))

    def as_quaternion(self) -> np.ndarray:
        """Rotation as a unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
        return quaternion_from_rotation(self.rotation)

    def compose(self, other: "Pose") -> "Pose":
        """``self`` applied after ``other``: ``x -> self(other(x))``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform(self, points) -> np.ndarray:
        """Map world points (3,) or (n, 3) into the camera frame."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates, ``-R.T @ t``."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    """Pinhole camera without distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Correspondence2D3D:
    """A pixel observation paired with a world point."""

    point2d: np.ndarray
    point3d: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        p2 = np.asarray(self.point2d, dtype=np.float64).reshape(2)
        p3 = np.asarray(self.point3d, dtype=np.float64).reshape(3)
        w = float(self.weight)
        if w < 0.0:
            raise ValueError("correspondence weight must be non-negative")
        object.__setattr__(self, "point2d", p2)
        object.__setattr__(self, "point3d", p3)
        object.__setattr__(self, "weight", w)


def stack_correspondences(corrs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pack a correspondence sequence into (n,2), (n,3), (n,) arrays.

    Already-stacked input passes through: a (uv, xyz) or (uv, xyz, w) tuple
    of arrays avoids building one object per correspondence on hot paths.
    """
    if isinstance(corrs, tuple):
        uv = np.asarray(corrs[0], dtype=np.float64).reshape(-1, 2)
        xyz = np.asarray(corrs[1], dtype=np.float64).reshape(-1, 3)
        if len(corrs) > 2:
            w = np.asarray(corrs[2], dtype=np.float64).reshape(-1)
        else:
            w = np.ones(len(uv))
        return uv, xyz, w
    uv = np.array([c.point2d for c in corrs], dtype=np.float64).reshape(-1, 2)
    xyz = np.array([c.point3d for c in corrs], dtype=np.float64).reshape(-1, 3)
    w = np.array([c.weight for c in corrs], dtype=np.float64)
    return uv, xyz, w


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def rotation_from_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero quaternion")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quaternion_from_rotation(r) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` (Shepperd's method)."""
    r = np.asarray(r, dtype=np.float64).reshape(3, 3)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array([(r[2, 1] - r[1, 2]) / s,
                      0.25 * s,
                      (r[0, 1] + r[1, 0]) / s,
                      (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] >= r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array([(r[0, 2] - r[2, 0]) / s,
                      (r[0, 1] + r[1, 0]) / s,
                      0.25 * s,
                      (r[1, 2] + r[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array([(r[1, 0] - r[0, 1]) / s,
                      (r[0, 2] + r[2, 0]) / s,
                      (r[1, 2] + r[2, 1]) / s,
                      0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def rotation_angle(r) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    c = (np.trace(np.asarray(r, dtype=np.float64)) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def rotation_angle_between(ra, rb) -> float:
    """Geodesic angle between two rotations, radians."""
    return rotation_angle(np.asarray(ra).T @ np.asarray(rb))


def exp_so3(w) -> np.ndarray:
    """Rodrigues exponential of a rotation vector."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    k = _skew(w)
    if theta < 1e-12:
        return np.eye(3) + k + 0.5 * (k @ k)
    return (np.eye(3) + math.sin(theta) / theta * k
            + (1.0 - math.cos(theta)) / (theta * theta) * (k @ k))


def _skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project(pose: Pose, intrinsics: CameraIntrinsics, point):
    """Project one world point; returns ``(u, v)`` or ``None`` if invisible."""
    p = pose.rotation @ np.asarray(point, dtype=np.float64) + pose.translation
    if p[2] <= DEPTH_EPS:
        return None
    u = intrinsics.fx * p[0] / p[2] + intrinsics.cx
    v = intrinsics.fy * p[1] / p[2] + intrinsics.cy
    if not (0.0 <= u < intrinsics.width and 0.0 <= v < intrinsics.height):
        return None
    return (u, v)


def project_points(pose: Pose, intrinsics: CameraIntrinsics, points):
    """Vectorized projection. Returns ``(uv (n,2), visible (n,))``.

    Rows with ``visible == False`` hold unusable values.
    """
    p = pose.transform(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = p[:, 2]
    in_front = z > DEPTH_EPS
    zsafe = np.where(in_front, z, 1.0)
    uv = np.empty((len(p), 2))
    uv[:, 0] = intrinsics.fx * p[:, 0] / zsafe + intrinsics.cx
    uv[:, 1] = intrinsics.fy * p[:, 1] / zsafe + intrinsics.cy
    visible = (in_front
               & (uv[:, 0] >= 0.0) & (uv[:, 0] < intrinsics.width)
               & (uv[:, 1] >= 0.0) & (uv[:, 1] < intrinsics.height))
    return uv, visible


def unproject(intrinsics: CameraIntrinsics, uv, depth: float) -> np.ndarray:
    """Back-project a pixel at a given camera depth into the camera frame."""
    u, v = float(uv[0]), float(uv[1])
    z = float(depth)
    return np.array([(u - intrinsics.cx) / intrinsics.fx * z,
                     (v - intrinsics.cy) / intrinsics.fy * z,
                     z])


def reprojection_errors(pose: Pose, intrinsics: CameraIntrinsics,
                        uv: np.ndarray, xyz: np.ndarray) -> np.ndarray:
    """Per-correspondence pixel error. Points at or behind the camera get +inf."""
    p = pose.transform(xyz)
    z = p[:, 2]
    ok = z > DEPTH_EPS
    zsafe = np.where(ok, z, 1.0)
    du = intrinsics.fx * p[:, 0] / zsafe + intrinsics.cx - uv[:, 0]
    dv = intrinsics.fy * p[:, 1] / zsafe + intrinsics.cy - uv[:, 1]
    err = np.hypot(du, dv)
    err[~ok] = np.inf
    return err


# ---------------------------------------------------------------------------
# EPnP
# ---------------------------------------------------------------------------

def _control_points(xyz: np.ndarray) -> np.ndarray:
    """Four affinely independent control points: centroid plus the principal
    axes of the point cloud. Near-zero axes are floored so the barycentric
    system stays well conditioned for (near-)planar clouds."""
    centroid = xyz.mean(axis=0)
    centered = xyz - centroid
    cov = centered.T @ centered / len(xyz)
    eigval, eigvec = np.linalg.eigh(cov)          # ascending
    eigval = np.maximum(eigval, 0.0)
    scales = np.sqrt(eigval)
    floor = max(1e-3 * scales[2], 1e-9)
    scales = np.maximum(scales, floor)
    ctrl = np.empty((4, 3))
    ctrl[0] = centroid
    for i in range(3):
        ctrl[i + 1] = centroid + scales[2 - i] * eigvec[:, 2 - i]
    return ctrl


def _barycentric(xyz: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    """Coefficients a (n,4) with xyz = a @ ctrl and rows summing to one."""
    system = np.vstack([ctrl.T, np.ones((1, 4))])            # (4,4)
    rhs = np.vstack([xyz.T, np.ones((1, len(xyz)))])         # (4,n)
    return np.linalg.solve(system, rhs).T


def _build_m(uv: np.ndarray, alphas: np.ndarray,
             intrinsics: CameraIntrinsics) -> np.ndarray:
    n = len(uv)
    m = np.zeros((2 * n, 12))
    du = intrinsics.cx - uv[:, 0]
    dv = intrinsics.cy - uv[:, 1]
    m[0::2, 0::3] = alphas * intrinsics.fx
    m[0::2, 2::3] = alphas * du[:, None]
    m[1::2, 1::3] = alphas * intrinsics.fy
    m[1::2, 2::3] = alphas * dv[:, None]
    return m


_RHO_PAIRS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def _ctrl_distances_sq(ctrl: np.ndarray) -> np.ndarray:
    return np.array([np.dot(ctrl[a] - ctrl[b], ctrl[a] - ctrl[b])
                     for a, b in _RHO_PAIRS])


def _build_l(v: np.ndarray) -> np.ndarray:
    """L (6,10) so that L @ betas_sq = rho, betas_sq ordered
    [b11, b12, b13, b14, b22, b23, b24, b33, b34, b44]."""
    diffs = np.empty((4, 6, 3))
    for k in range(4):
        c = v[:, k].reshape(4, 3)
        for row, (a, b) in enumerate(_RHO_PAIRS):
            diffs[k, row] = c[a] - c[b]
    l = np.empty((6, 10))
    col = 0
    for i in range(4):
        for j in range(i, 4):
            dot = np.einsum("rd,rd->r", diffs[i], diffs[j])
            l[:, col] = dot if i == j else 2.0 * dot
            col += 1
    return l


_BETA_IDX = {(i, j): k for k, (i, j) in enumerate(
    [(i, j) for i in range(4) for j in range(i, 4)])}
_BETA_I = np.array([i for i in range(4) for _ in range(i, 4)])
_BETA_J = np.array([j for i in range(4) for j in range(i, 4)])


def _gauss_newton_betas(l: np.ndarray, rho: np.ndarray, betas: np.ndarray,
                        iters: int = 6) -> np.ndarray:
    betas = betas.copy()
    rows = np.arange(10)
    for _ in range(iters):
        residual = l @ (betas[_BETA_I] * betas[_BETA_J]) - rho
        # d(bsq)/d(beta) row by row; the i == j rows pick up beta twice,
        # matching the 2*beta diagonal derivative
        dbsq = np.zeros((10, 4))
        dbsq[rows, _BETA_I] += betas[_BETA_J]
        dbsq[rows, _BETA_J] += betas[_BETA_I]
        jac = l @ dbsq
        g = jac.T @ jac
        try:
            step = np.linalg.solve(g, -jac.T @ residual)
        except np.linalg.LinAlgError:
            try:
                step = np.linalg.lstsq(jac, -residual, rcond=None)[0]
            except np.linalg.LinAlgError:
                break
        if not np.all(np.isfinite(step)):
            break
        betas += step
        if step @ step < 1e-24 * max(1.0, betas @ betas):
            break
    return betas


def _pose_from_betas(v: np.ndarray, betas: np.ndarray, alphas: np.ndarray,
                     xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ctrl_cam = (v @ betas).reshape(4, 3)
    pts_cam = alphas @ ctrl_cam
    if pts_cam[:, 2].sum() < 0.0:
        pts_cam = -pts_cam
    return _absolute_orientation(xyz, pts_cam)


def _absolute_orientation(world: np.ndarray,
                          cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid R, t with cam ~= world @ R.T + t (Horn's method)."""
    wc = world.mean(axis=0)
    cc = cam.mean(axis=0)
    h = (world - wc).T @ (cam - cc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cc - r @ wc
    return r, t


def _epnp_solve(uv: np.ndarray, xyz: np.ndarray, intrinsics: CameraIntrinsics,
                early_px: float | None = None,
                gn_iters: int = 6) -> tuple[np.ndarray, np.ndarray, float]:
    """EPnP core. Returns (R, t, mean reprojection error on the input set).

    Tries the one-, two-, and three-dimensional null space cases with a
    Gauss-Newton polish on the betas and keeps the best candidate. With
    ``early_px`` set, returns as soon as a candidate beats that error.
    ``gn_iters`` trades polish accuracy for speed; hypothesis scoring inside
    RANSAC only needs a pose good enough to separate inliers.
    """
    n = len(uv)
    centered = xyz - xyz.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-12):
        raise DegenerateConfiguration("3D points are collinear or coincident")

    ctrl = _control_points(xyz)
    alphas = _barycentric(xyz, ctrl)
    m = _build_m(uv, alphas, intrinsics)
    mtm = m.T @ m
    _, eigvec = np.linalg.eigh(mtm)
    v = eigvec[:, :4]                      # four smallest, ascending
    rho = _ctrl_distances_sq(ctrl)
    l = _build_l(v)

    best: tuple[float, np.ndarray, np.ndarray] | None = None

    def consider(betas: np.ndarray):
        nonlocal best
        betas = _gauss_newton_betas(l, rho, betas, iters=gn_iters)
        r, t = _pose_from_betas(v, betas, alphas, xyz)
        p = xyz @ r.T + t
        z = p[:, 2]
        if np.any(z <= DEPTH_EPS):
            err = np.inf
        else:
            du = intrinsics.fx * p[:, 0] / z + intrinsics.cx - uv[:, 0]
            dv = intrinsics.fy * p[:, 1] / z + intrinsics.cy - uv[:, 1]
            err = float(np.hypot(du, dv).mean())
        if best is None or err < best[0]:
            best = (err, r, t)

    # case N = 1: scale beta from control point distances
    v1 = v[:, 0].reshape(4, 3)
    dc = np.array([np.dot(v1[a] - v1[b], v1[a] - v1[b]) for a, b in _RHO_PAIRS])
    dcdw = float(np.dot(np.sqrt(dc), np.sqrt(rho)))
    dcdc = float(dc.sum())
    beta1 = dcdw / dcdc if dcdc > 0 else 0.0
    consider(np.array([beta1, 0.0, 0.0, 0.0]))

    if best is not None and early_px is not None and best[0] < early_px:
        err, r, t = best
        return r, t, err

    # case N = 2: unknowns b11, b12, b22
    cols = [_BETA_IDX[(0, 0)], _BETA_IDX[(0, 1)], _BETA_IDX[(1, 1)]]
    sol = np.linalg.lstsq(l[:, cols], rho, rcond=None)[0]
    b1 = math.sqrt(abs(sol[0]))
    b2 = math.sqrt(abs(sol[2]))
    if sol[1] < 0:
        b2 = -b2
    consider(np.array([b1, b2, 0.0, 0.0]))

    if best is not None and early_px is not None and best[0] < early_px:
        err, r, t = best
        return r, t, err

    # case N = 3: unknowns b11, b12, b13, b22, b23, b33
    cols = [_BETA_IDX[k] for k in [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]]
    try:
        sol = np.linalg.lstsq(l[:, cols], rho, rcond=None)[0]
        b1 = math.sqrt(abs(sol[0]))
        b2 = math.sqrt(abs(sol[3]))
        b3 = math.sqrt(abs(sol[5]))
        if sol[1] < 0:
            b2 = -b2
        if sol[2] < 0:
            b3 = -b3
        consider(np.array([b1, b2, b3, 0.0]))
    except np.linalg.LinAlgError:
        pass

    assert best is not None
    err, r, t = best
    return r, t, err


def epnp(corrs, intrinsics: CameraIntrinsics) -> Pose:
    """Camera pose from 2D-3D correspondences via EPnP.

    Requires at least 4 correspondences whose 3D points are not all
    collinear. On noiseless input with genuine 3D extent the returned pose
    reprojects every correspondence to well under 1e-6 px. Near-planar
    clouds are conditioned by flooring the smallest control-point axis;
    exactly coplanar input stays solvable but outside that accuracy
    promise (this formulation has no dedicated planar case).
    """
    uv, xyz, _ = stack_correspondences(corrs)
    if len(uv) < 4:
        raise MinimalSampleUnavailable(
            f"EPnP needs at least 4 correspondences, got {len(uv)}")
    r, t, _ = _epnp_solve(uv, xyz, intrinsics)
    return Pose(r, t)


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RansacParams:
    max_iters: int = 2048
    inlier_px_threshold: float = 8.0
    confidence: float = 0.9999
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.inlier_px_threshold <= 0:
            raise ValueError("inlier_px_threshold must be positive")
        if not (0.0 < self.confidence < 1.0):
            raise ValueError("confidence must be in (0, 1)")


@dataclass(frozen=True, eq=False)
class RansacResult:
    pose: Pose
    inlier_mask: np.ndarray
    num_inliers: int


def _required_iters(inlier_ratio: float, sample_size: int,
                    confidence: float) -> int:
    w = min(max(inlier_ratio, 1e-9), 1.0 - 1e-12)
    p_good = w ** sample_size
    if p_good >= 1.0 - 1e-12:
        return 1
    return max(1, math.ceil(math.log(1.0 - confidence) / math.log(1.0 - p_good)))


_PAIR_A = np.array([a for a, _ in _RHO_PAIRS])
_PAIR_B = np.array([b for _, b in _RHO_PAIRS])


def _gn_betas_batch(l: np.ndarray, rho: np.ndarray, betas: np.ndarray,
                    iters: int) -> np.ndarray:
    """Gauss-Newton polish of ``betas`` (B,4) against L (B,6,10), rho (B,6).
    Ridged normal equations so a singular sample cannot poison the batch."""
    rows = np.arange(10)
    diag = np.arange(4)
    for _ in range(iters):
        residual = np.einsum("bij,bj->bi", l, betas[:, _BETA_I] * betas[:, _BETA_J]) - rho
        dbsq = np.zeros((len(betas), 10, 4))
        dbsq[:, rows, _BETA_I] += betas[:, _BETA_J]
        dbsq[:, rows, _BETA_J] += betas[:, _BETA_I]
        jac = l @ dbsq
        g = jac.transpose(0, 2, 1) @ jac
        g[:, diag, diag] += 1e-12 * np.trace(g, axis1=1, axis2=2)[:, None] + 1e-200
        rhs = -np.einsum("bij,bi->bj", jac, residual)
        step = np.linalg.solve(g, rhs[..., None])[..., 0]
        betas = betas + np.where(np.isfinite(step), step, 0.0)
    return betas


def _ridged_solve(a: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Least-squares solve of a (B,6,k) system against rho (B,6) via ridged
    normal equations, k = a.shape[2]."""
    k = a.shape[2]
    diag = np.arange(k)
    g = a.transpose(0, 2, 1) @ a
    g[:, diag, diag] += 1e-12 * np.trace(g, axis1=1, axis2=2)[:, None] + 1e-200
    rhs = np.einsum("bij,bi->bj", a, rho)
    return np.linalg.solve(g, rhs[..., None])[..., 0]


def _hypothesis_batch(uv_s: np.ndarray, xyz_s: np.ndarray,
                      intrinsics: CameraIntrinsics,
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """EPnP over a batch of minimal samples. uv_s (B,m,2), xyz_s (B,m,3).

    Returns candidate rotations (3,B,3,3), translations (3,B,3) for the one-,
    two-, and three-dimensional kernel cases, plus a validity mask (B,).
    Degenerate samples come back invalid with placeholder poses.
    """
    bsz, m = xyz_s.shape[:2]
    cent = xyz_s.mean(axis=1)
    ctr = xyz_s - cent[:, None]
    sv = np.linalg.svd(ctr, compute_uv=False)
    valid = sv[:, 1] > 1e-9 * np.maximum(sv[:, 0], 1e-12)

    cov = ctr.transpose(0, 2, 1) @ ctr / m
    eigval, eigvec = np.linalg.eigh(cov)
    scales = np.sqrt(np.maximum(eigval, 0.0))
    scales = np.maximum(scales, np.maximum(1e-3 * scales[:, 2:3], 1e-9))
    ctrl = np.empty((bsz, 4, 3))
    ctrl[:, 0] = cent
    for i in range(3):
        ctrl[:, i + 1] = cent + scales[:, 2 - i, None] * eigvec[:, :, 2 - i]

    system = np.concatenate([ctrl.transpose(0, 2, 1), np.ones((bsz, 1, 4))], axis=1)
    det = np.abs(np.linalg.det(system))
    bad = det < 1e-12
    if np.any(bad):
        system[bad] = np.eye(4)
        valid &= ~bad
    rhs = np.concatenate([xyz_s.transpose(0, 2, 1), np.ones((bsz, 1, m))], axis=1)
    alphas = np.linalg.solve(system, rhs).transpose(0, 2, 1)

    mm = np.zeros((bsz, 2 * m, 12))
    mm[:, 0::2, 0::3] = alphas * intrinsics.fx
    mm[:, 0::2, 2::3] = alphas * (intrinsics.cx - uv_s[..., 0])[..., None]
    mm[:, 1::2, 1::3] = alphas * intrinsics.fy
    mm[:, 1::2, 2::3] = alphas * (intrinsics.cy - uv_s[..., 1])[..., None]
    _, evec = np.linalg.eigh(mm.transpose(0, 2, 1) @ mm)
    v = evec[:, :, :4]

    dctrl = ctrl[:, _PAIR_A] - ctrl[:, _PAIR_B]
    rho = np.einsum("brd,brd->br", dctrl, dctrl)

    kern = v.transpose(0, 2, 1).reshape(bsz, 4, 4, 3)      # (B, case, ctrl, 3)
    kdiff = kern[:, :, _PAIR_A] - kern[:, :, _PAIR_B]      # (B, 4, 6, 3)
    dots = np.einsum("bird,bjrd->brij", kdiff, kdiff)      # (B, 6, 4, 4)
    l = dots[:, :, _BETA_I, _BETA_J] * np.where(_BETA_I == _BETA_J, 1.0, 2.0)

    betas_all = np.zeros((3, bsz, 4))
    dc = np.einsum("brd,brd->br", kdiff[:, 0], kdiff[:, 0])
    den = dc.sum(axis=1)
    num = (np.sqrt(dc) * np.sqrt(rho)).sum(axis=1)
    betas_all[0, :, 0] = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)

    c2 = [_BETA_IDX[(0, 0)], _BETA_IDX[(0, 1)], _BETA_IDX[(1, 1)]]
    sol = _ridged_solve(l[:, :, c2], rho)
    b1 = np.sqrt(np.abs(sol[:, 0]))
    b2 = np.where(sol[:, 1] < 0, -1.0, 1.0) * np.sqrt(np.abs(sol[:, 2]))
    betas_all[1, :, 0] = b1
    betas_all[1, :, 1] = b2

    c3 = [_BETA_IDX[k] for k in [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]]
    sol = _ridged_solve(l[:, :, c3], rho)
    betas_all[2, :, 0] = np.sqrt(np.abs(sol[:, 0]))
    betas_all[2, :, 1] = np.where(sol[:, 1] < 0, -1.0, 1.0) * np.sqrt(np.abs(sol[:, 3]))
    betas_all[2, :, 2] = np.where(sol[:, 2] < 0, -1.0, 1.0) * np.sqrt(np.abs(sol[:, 5]))

    rot_all = np.empty((3, bsz, 3, 3))
    t_all = np.empty((3, bsz, 3))
    wc = xyz_s.mean(axis=1)
    wctr = xyz_s - wc[:, None]
    for case in range(3):
        betas = _gn_betas_batch(l, rho, betas_all[case], iters=3)
        ctrl_cam = np.einsum("bik,bk->bi", v, betas).reshape(bsz, 4, 3)
        pts_cam = alphas @ ctrl_cam
        flip = pts_cam[..., 2].sum(axis=1) < 0.0
        pts_cam[flip] = -pts_cam[flip]
        cc = pts_cam.mean(axis=1)
        h = wctr.transpose(0, 2, 1) @ (pts_cam - cc[:, None])
        u, _, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(vt.transpose(0, 2, 1) @ u.transpose(0, 2, 1)))
        d = np.where(d == 0.0, 1.0, d)
        vts = vt.transpose(0, 2, 1).copy()
        vts[:, :, 2] *= d[:, None]
        r = vts @ u.transpose(0, 2, 1)
        rot_all[case] = r
        t_all[case] = cc - np.einsum("bij,bj->bi", r, wc)
    return rot_all, t_all, valid


def ransac_pnp(corrs, intrinsics: CameraIntrinsics,
               params: RansacParams | None = None) -> RansacResult:
    """Robust EPnP with adaptive iteration count.

    Draws minimal samples in blocks, solves them with a batched EPnP, scores
    hypotheses by the count of correspondences reprojecting within
    ``inlier_px_threshold``, then refits on the best consensus set.
    Deterministic for a fixed seed.
    """
    if params is None:
        params = RansacParams()
    uv, xyz, _ = stack_correspondences(corrs)
    n = len(uv)
    if n < 4:
        raise MinimalSampleUnavailable(
            f"RANSAC needs at least 4 correspondences, got {n}")
    rng = np.random.default_rng(params.seed)
    sample_size = 6 if n >= 6 else 4
    thr = params.inlier_px_threshold

    best_count = 0
    best_mask: np.ndarray | None = None
    best_rt: tuple[np.ndarray, np.ndarray] | None = None
    needed = params.max_iters

    it = 0
    grow = 16
    while it < min(needed, params.max_iters):
        # blocks track the adaptive bound, with a geometrically growing cap
        # so early blocks stay cheap and scoring memory stays bounded
        blk = min(needed - it, params.max_iters - it, grow)
        grow = min(4 * grow, 256)
        # random-key trick: the sample_size smallest keys per row are a
        # uniform draw without replacement
        keys = rng.random((blk, n))
        idxs = np.argpartition(keys, sample_size - 1, axis=1)[:, :sample_size]
        rot_all, t_all, valid = _hypothesis_batch(uv[idxs], xyz[idxs], intrinsics)

        # score all three kernel-case candidates of every sample at once
        rs = rot_all.reshape(-1, 3, 3)
        ts = t_all.reshape(-1, 3)
        p = np.einsum("cij,nj->cni", rs, xyz) + ts[:, None, :]
        z = p[..., 2]
        ok = z > DEPTH_EPS
        zsafe = np.where(ok, z, 1.0)
        du = intrinsics.fx * p[..., 0] / zsafe + intrinsics.cx - uv[:, 0]
        dv = intrinsics.fy * p[..., 1] / zsafe + intrinsics.cy - uv[:, 1]
        masks = ok & (du * du + dv * dv <= thr * thr)
        counts = masks.sum(axis=1).reshape(3, blk)
        counts[:, ~valid] = 0
        case = counts.argmax(axis=0)
        arange = np.arange(blk)
        blk_counts = counts[case, arange]

        stop = False
        for b in range(blk):
            it += 1
            count = int(blk_counts[b])
            if count > best_count:
                best_count = count
                best_mask = masks.reshape(3, blk, n)[case[b], b]
                best_rt = (rot_all[case[b], b], t_all[case[b], b])
                needed = _required_iters(count / n, sample_size,
                                         params.confidence)
                if count == n:
                    stop = True
            if it >= min(needed, params.max_iters) or stop:
                stop = True
                break
        if stop:
            break

    if best_mask is None or best_count < 4:
        raise NoConsensus(
            f"no consensus of at least 4 inliers within {params.max_iters} iterations")

    # refit on the consensus set, then re-evaluate membership (twice, so a
    # grown consensus feeds one more refit)
    mask = best_mask
    r, t = best_rt
    for _ in range(2):
        sel = np.flatnonzero(mask)
        if len(sel) < 4:
            break
        try:
            # a first-case fit already tight against the threshold is enough;
            # membership is re-evaluated either way
            r2, t2, _ = _epnp_solve(uv[sel], xyz[sel], intrinsics,
                                    early_px=0.25 * thr)
        except DegenerateConfiguration:
            break
        pose2 = Pose(r2, t2)
        errs = reprojection_errors(pose2, intrinsics, uv, xyz)
        mask2 = errs <= thr
        if int(mask2.sum()) >= int(mask.sum()):
            r, t, mask = r2, t2, mask2
        else:
            break

    pose = Pose(r, t)
    return RansacResult(pose=pose, inlier_mask=mask, num_inliers=int(mask.sum()))


# ---------------------------------------------------------------------------
# non-linear refinement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RefineParams:
    max_iters: int = 50
    huber_px: float = 5.0
    convergence_eps: float = 1e-10

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.huber_px <= 0:
            raise ValueError("huber_px must be positive")


def _robust_cost(err: np.ndarray, w: np.ndarray, delta: float) -> float:
    small = err <= delta
    cost = np.where(small, 0.5 * err * err, delta * (err - 0.5 * delta))
    return float(np.dot(w, cost))


def refine_pose(init: Pose, corrs, intrinsics: CameraIntrinsics,
                params: RefineParams | None = None) -> Pose:
    """Minimize the Huber-robustified reprojection error from ``init``.

    Gauss-Newton steps with Levenberg-style damping when a step would
    increase the cost. The returned pose never has a higher robust cost
    than ``init``; if the normal equations stay singular the initial pose
    is returned unchanged.
    """
    if params is None:
        params = RefineParams()
    uv, xyz, w = stack_correspondences(corrs)
    if len(uv) < 4:
        raise MinimalSampleUnavailable(
            f"refinement needs at least 4 correspondences, got {len(uv)}")
    delta = params.huber_px

    r = init.rotation.copy()
    t = init.translation.copy()

    def residuals(rm, tv):
        p = xyz @ rm.T + tv
        z = np.maximum(p[:, 2], DEPTH_EPS)
        ru = intrinsics.fx * p[:, 0] / z + intrinsics.cx - uv[:, 0]
        rv = intrinsics.fy * p[:, 1] / z + intrinsics.cy - uv[:, 1]
        return p, z, ru, rv

    p, z, ru, rv = residuals(r, t)
    err = np.hypot(ru, rv)
    cost = _robust_cost(err, w, delta)
    best_r, best_t, best_cost = r, t, cost

    lam = 0.0
    for _ in range(params.max_iters):
        # IRLS weights for the Huber loss
        irls = np.where(err <= delta, 1.0, delta / np.maximum(err, 1e-12)) * w

        fx_z = intrinsics.fx / z
        fy_z = intrinsics.fy / z
        x_z = p[:, 0] / z
        y_z = p[:, 1] / z

        # d(pixel)/d(cam point)
        j_cam = np.zeros((len(uv), 2, 3))
        j_cam[:, 0, 0] = fx_z
        j_cam[:, 0, 2] = -fx_z * x_z
        j_cam[:, 1, 1] = fy_z
        j_cam[:, 1, 2] = -fy_z * y_z

        # cam point p = exp(w)^ (R X) + t + dt  =>  dp/dw = -[R X]x, dp/dt = I
        rx = xyz @ r.T
        j = np.empty((len(uv), 2, 6))
        # -[rx]x columns
        sk = np.zeros((len(uv), 3, 3))
        sk[:, 0, 1] = rx[:, 2]
        sk[:, 0, 2] = -rx[:, 1]
        sk[:, 1, 0] = -rx[:, 2]
        sk[:, 1, 2] = rx[:, 0]
        sk[:, 2, 0] = rx[:, 1]
        sk[:, 2, 1] = -rx[:, 0]
        j[:, :, :3] = np.einsum("nij,njk->nik", j_cam, sk)
        j[:, :, 3:] = j_cam

        res = np.stack([ru, rv], axis=1)                      # (n,2)
        jw = j * irls[:, None, None]
        h = np.einsum("nik,nil->kl", jw, j)
        g = np.einsum("nik,ni->k", jw, res)

        stepped = False
        for _attempt in range(8):
            try:
                hd = h + lam * np.diag(np.maximum(np.diag(h), 1e-12))
                step = np.linalg.solve(hd, -g)
            except np.linalg.LinAlgError:
                lam = max(lam * 10.0, 1e-6)
                continue
            if not np.all(np.isfinite(step)):
                lam = max(lam * 10.0, 1e-6)
                continue
            r_new = exp_so3(step[:3]) @ r
            t_new = t + step[3:]
            p2, z2, ru2, rv2 = residuals(r_new, t_new)
            err2 = np.hypot(ru2, rv2)
            cost2 = _robust_cost(err2, w, delta)
            if cost2 <= cost:
                r, t = r_new, t_new
                p, z, ru, rv, err, cost = p2, z2, ru2, rv2, err2, cost2
                lam *= 0.3
                if lam < 1e-12:
                    lam = 0.0
                stepped = True
                if cost < best_cost:
                    best_r, best_t, best_cost = r, t, cost
                break
            lam = max(lam * 10.0, 1e-6)
        if not stepped:
            break
        if np.linalg.norm(step) < params.convergence_eps:
            break

    # re-orthonormalize against accumulated drift, keeping the cost guarantee
    uu, _, vv = np.linalg.svd(best_r)
    r_ortho = uu @ np.diag([1.0, 1.0, np.sign(np.linalg.det(uu @ vv))]) @ vv
    _, _, ru3, rv3 = residuals(r_ortho, best_t)
    if _robust_cost(np.hypot(ru3, rv3), w, delta) <= _robust_cost(
            np.hypot(*residuals(init.rotation, init.translation)[2:]), w, delta):
        return Pose(r_ortho, best_t)
    return init
