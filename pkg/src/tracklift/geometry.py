"""Camera poses, the 6-vector rotation parameterization, and projection.

Conventions used everywhere in the package:
  * a pose is (R, t) with R the world-from-camera orientation and t the
    camera center in world units;
  * a world point X maps to the camera frame as R^T (X - t), whose third
    component is the depth;
  * image coordinates are intrinsics-normalized.

All functions accept either plain numpy arrays or autodiff Tensors and
broadcast over leading axes, so the same formulas serve analysis code
and the differentiable training path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericalError


class GeometryError(NumericalError):
    pass


# -- backend dispatch ---------------------------------------------------

def _raw(x):
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x)


def _sqrt(x):
    return ad.sqrt(x) if isinstance(x, ad.Tensor) else np.sqrt(x)


def _sum_last(x, keepdims=False):
    if isinstance(x, ad.Tensor):
        return ad.tsum(x, axis=-1, keepdims=keepdims)
    return np.sum(x, axis=-1, keepdims=keepdims)


def _sum_axis(x, axis):
    if isinstance(x, ad.Tensor):
        return ad.tsum(x, axis=axis)
    return np.sum(x, axis=axis)


def _stack_last(parts):
    if any(isinstance(p, ad.Tensor) for p in parts):
        return ad.stack(parts, axis=-1)
    return np.stack(parts, axis=-1)


def _unsqueeze_last(x):
    if isinstance(x, ad.Tensor):
        return ad.reshape(x, x.shape + (1,))
    return x[..., None]


def _slice_last(x, lo, hi):
    idx = (slice(None),) * (x.ndim - 1) + (slice(lo, hi),)
    return x[idx]


def _cross(a, b):
    """Cross product over the last axis (length 3)."""
    a1, a2, a3 = (_slice_last(a, i, i + 1) for i in range(3))
    b1, b2, b3 = (_slice_last(b, i, i + 1) for i in range(3))
    parts = [a2 * b3 - a3 * b2, a3 * b1 - a1 * b3, a1 * b2 - a2 * b1]
    if isinstance(parts[0], ad.Tensor):
        return ad.concat(parts, axis=-1)
    return np.concatenate(parts, axis=-1)


# -- pose containers ----------------------------------------------------

@dataclass
class CameraPose:
    """World-from-camera rotation and camera center in world units."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.R.shape != (3, 3) or self.t.shape != (3,):
            raise GeometryError(f"pose shapes {self.R.shape}, {self.t.shape} invalid")

    def validate(self, tol: float = 1e-6) -> None:
        err = np.abs(self.R.T @ self.R - np.eye(3)).max()
        det = np.linalg.det(self.R)
        if err > tol or abs(det - 1.0) > tol:
            raise GeometryError(
                f"not a rotation: |R^T R - I| = {err:.2e}, det = {det:.6f}")


class CameraTrajectory:
    """A sequence of camera poses stored as stacked arrays."""

    def __init__(self, rotations: np.ndarray, centers: np.ndarray):
        rotations = np.asarray(rotations, dtype=np.float64)
        centers = np.asarray(centers, dtype=np.float64)
        if rotations.ndim != 3 or rotations.shape[1:] != (3, 3):
            raise GeometryError(f"rotations shape {rotations.shape} invalid")
        if centers.shape != (rotations.shape[0], 3):
            raise GeometryError(f"centers shape {centers.shape} invalid")
        self.rotations = rotations
        self.centers = centers

    def __len__(self) -> int:
        return self.rotations.shape[0]

    def __getitem__(self, i: int) -> CameraPose:
        return CameraPose(self.rotations[i], self.centers[i])

    def validate(self, tol: float = 1e-6) -> None:
        for i in range(len(self)):
            self[i].validate(tol)


def _unpack_pose(pose):
    if isinstance(pose, CameraPose):
        return pose.R, pose.t
    R, t = pose
    return R, t


# -- rotation parameterization -------------------------------------------

def rotation_from_6d(v):
    """Gram-Schmidt rotation from a 6-vector (two stacked 3-vectors).

    b1 = normalize(a1), b2 = normalize(a2 - (b1.a2) b1), b3 = b1 x b2;
    the rotation has columns [b1 b2 b3]. Differentiable when ``v`` is a
    Tensor. Raises for near-zero or near-parallel inputs.
    """
    raw = _raw(v)
    if raw.shape[-1] != 6:
        raise GeometryError(f"6-d rotation input has trailing dim {raw.shape[-1]}")
    ra1, ra2 = raw[..., :3], raw[..., 3:]
    n1 = np.linalg.norm(ra1, axis=-1)
    n2 = np.linalg.norm(ra2, axis=-1)
    if np.any(n1 <= 1e-8) or np.any(n2 <= 1e-8):
        raise GeometryError("degenerate 6-d rotation input: near-zero vector")
    rb1 = ra1 / n1[..., None]
    ortho = ra2 - np.sum(rb1 * ra2, axis=-1, keepdims=True) * rb1
    # sin(angle to the a1 line) = |ortho| / |a2|
    if np.any(np.linalg.norm(ortho, axis=-1) < 1e-6 * n2):
        raise GeometryError("degenerate 6-d rotation input: vectors near parallel")

    a1 = _slice_last(v, 0, 3)
    a2 = _slice_last(v, 3, 6)
    b1 = a1 / _sqrt(_sum_last(a1 * a1, keepdims=True))
    proj = _sum_last(b1 * a2, keepdims=True)
    u = a2 - proj * b1
    b2 = u / _sqrt(_sum_last(u * u, keepdims=True))
    b3 = _cross(b1, b2)
    return _stack_last([b1, b2, b3])


def _skew(a: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -a[2], a[1]],
                     [a[2], 0.0, -a[0]],
                     [-a[1], a[0], 0.0]])


def rotation_from_6d_jacobian(v: np.ndarray):
    """Rotation and its analytic derivative for a single 6-vector.

    Returns (R, J) with J[r, c, k] = dR[r, c] / dv[k]. Used by bundle
    adjustment; cross-checked against the autodiff engine in tests.
    """
    v = np.asarray(v, dtype=np.float64)
    R = rotation_from_6d(v)
    a1, a2 = v[:3], v[3:]
    eye = np.eye(3)

    r1 = np.linalg.norm(a1)
    b1 = a1 / r1
    db1_da1 = (eye - np.outer(b1, b1)) / r1

    s = b1 @ a2
    u = a2 - s * b1
    ru = np.linalg.norm(u)
    b2 = u / ru
    du_db1 = -(np.outer(b1, a2) + s * eye)
    du_da1 = du_db1 @ db1_da1
    du_da2 = eye - np.outer(b1, b1)
    db2_du = (eye - np.outer(b2, b2)) / ru
    db2_da1 = db2_du @ du_da1
    db2_da2 = db2_du @ du_da2

    db3_da1 = -_skew(b2) @ db1_da1 + _skew(b1) @ db2_da1
    db3_da2 = _skew(b1) @ db2_da2

    J = np.zeros((3, 3, 6))
    J[:, 0, :3] = db1_da1
    J[:, 1, :3] = db2_da1
    J[:, 1, 3:] = db2_da2
    J[:, 2, :3] = db3_da1
    J[:, 2, 3:] = db3_da2
    return R, J


def rotation_to_6d(R: np.ndarray) -> np.ndarray:
    """Exact right inverse of rotation_from_6d: the first two columns."""
    R = np.asarray(R)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


# -- projection ----------------------------------------------------------

def camera_point(X, pose):
    """World point into the camera frame: R^T (X - t).

    ``X`` broadcasts against the pose arrays over leading axes, e.g.
    X of shape (N, P, 3) with R of shape (N, 3, 3) and t of shape (N, 3)
    arranged as ((R[:, None], t[:, None])) by the caller, or plain
    single-point / single-pose arguments.
    """
    R, t = _unpack_pose(pose)
    w = X - t
    # c_a = sum_b w_b R[..., b, a]
    return _sum_axis(_unsqueeze_last(w) * R, axis=-2)


def project(X, pose):
    """Perspective projection to normalized image coordinates.

    Errors when any |depth| < 1e-8; training losses use
    ``project_guarded`` instead, which clamps.
    """
    c = camera_point(X, pose)
    depth = _raw(c)[..., 2]
    if np.any(np.abs(depth) < 1e-8):
        raise GeometryError("projection undefined: |depth| < 1e-8")
    return _slice_last(c, 0, 2) / _slice_last(c, 2, 3)


def project_guarded(X, pose, min_depth_mag: float = 1e-8):
    """Projection with the depth magnitude clamped away from zero.

    Keeps values and gradients finite for points crossing the camera
    plane; the sign of the depth is preserved so the negative-depth
    regularizer stays meaningful.
    """
    c = camera_point(X, pose)
    d = _slice_last(c, 2, 3)
    if isinstance(c, ad.Tensor):
        d = ad.clamp_magnitude(d, min_depth_mag)
    else:
        sign = np.where(d < 0, -1.0, 1.0)
        d = np.where(np.abs(d) < min_depth_mag, sign * min_depth_mag, d)
    return _slice_last(c, 0, 2) / d


def reprojection_error(X, pose, m):
    """Image-plane distance ||project(X, pose) - m||."""
    d = project(X, pose) - m
    return _sum_last(d * d) ** 0.5 if isinstance(d, np.ndarray) else _sqrt(_sum_last(d * d))


def look_at_rotation(center: np.ndarray, target: np.ndarray,
                     up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Rotation whose camera z-axis points from ``center`` at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - center
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise GeometryError("look-at target coincides with camera center")
    z = forward / n
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise GeometryError("look-at up vector parallel to viewing direction")
    x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=-1)
