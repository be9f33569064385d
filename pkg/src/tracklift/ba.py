"""Levenberg-Marquardt bundle adjustment over static points and poses.

The problem couples all camera poses (6-d rotation parameters plus
center) with the selected static world points, minimizing the summed
squared reprojection residuals of the gated observations. The gauge is
pinned by freezing pose 0 entirely and constraining camera 1 to move on
the sphere of its initial baseline length around camera 0 (a 2-d
tangent parameterization, re-centered every accepted step).

Normal equations are solved either by eliminating the 3x3 point blocks
through a Schur complement (default) or by assembling the full dense
system; the dense path is the correctness oracle for the Schur path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError
from .geometry import (CameraTrajectory, reprojection_error,
                       rotation_from_6d, rotation_from_6d_jacobian,
                       rotation_to_6d)
from .tracks import Intrinsics, PointTrackTensor

_MIN_TRIAL_DEPTH = 1e-6
_DIAG_FLOOR = 1e-10


@dataclass
class StaticSubset:
    """Points of the static base cloud whose motion level passed the gate."""

    indices: np.ndarray        # track indices (into the inferred tensor)
    points: np.ndarray         # (S, 3) positions from B1
    gamma_threshold: float


def select_static(outputs, threshold: float) -> StaticSubset:
    """Strictly-below-threshold selection on the motion levels.

    ``outputs`` is the detached inference namespace (``.gamma``,
    ``.bases``). An empty selection is allowed.
    """
    gamma = np.asarray(outputs.gamma, dtype=np.float64)
    indices = np.flatnonzero(gamma < threshold)
    points = np.asarray(outputs.bases[0], dtype=np.float64)[indices]
    return StaticSubset(indices, points, float(threshold))


def pixel_gate_to_normalized(pixel_gate: float, intr: Intrinsics) -> float:
    """Convert a pixel-space error gate into normalized units.

    Uses the larger focal length, which yields the stricter gate when
    the focal lengths differ.
    """
    return float(pixel_gate) / max(intr.fx, intr.fy)


@dataclass
class BAProblem:
    rotations: np.ndarray      # (N, 3, 3) initial
    centers: np.ndarray        # (N, 3) initial
    points: np.ndarray         # (S, 3) initial, static subset
    point_ids: np.ndarray      # (S,) original track indices
    obs_frame: np.ndarray      # (M,) frame index per residual
    obs_point: np.ndarray      # (M,) local point index per residual
    targets: np.ndarray        # (M, 2) observed normalized coordinates
    gate_normalized: float
    counts: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.rotations.shape[0]

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_residuals(self) -> int:
        return self.obs_frame.shape[0]


def build_ba_problem(subset: StaticSubset, outputs, tracks: PointTrackTensor,
                     pixel_gate: float, intr: Intrinsics) -> BAProblem:
    """Enumerate gated residuals: observed entries of selected tracks
    whose initial reprojection error is strictly below the gate."""
    gate = pixel_gate_to_normalized(pixel_gate, intr)
    traj = outputs.trajectory
    frames, locals_, targets = [], [], []
    candidates = 0
    for local_j, j in enumerate(subset.indices):
        X = subset.points[local_j]
        for i in range(tracks.n_frames):
            if not tracks.o[i, j]:
                continue
            candidates += 1
            err = float(reprojection_error(X, traj[i], tracks.xy[i, j]))
            if err < gate:
                frames.append(i)
                locals_.append(local_j)
                targets.append(tracks.xy[i, j])
    if not frames:
        raise DataError("bundle adjustment gate left zero residuals")
    return BAProblem(
        rotations=traj.rotations.copy(), centers=traj.centers.copy(),
        points=subset.points.copy(), point_ids=np.asarray(subset.indices),
        obs_frame=np.asarray(frames), obs_point=np.asarray(locals_),
        targets=np.asarray(targets, dtype=np.float64),
        gate_normalized=gate,
        counts={"selected_points": int(len(subset.indices)),
                "observed_candidates": candidates,
                "residuals": len(frames)})


@dataclass
class BAOptions:
    max_iters: int = 100
    lm_lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    tol: float = 1e-10
    solver: str = "schur"
    max_lambda: float = 1e12

    def __post_init__(self):
        if self.solver not in ("schur", "dense"):
            raise DataError(f"unknown solver {self.solver!r}")


@dataclass
class BAResult:
    trajectory: CameraTrajectory
    points: np.ndarray
    cost_trace: list[float]
    iterations: int
    final_lambda: float

    def mean_reprojection_error(self, problem: BAProblem) -> float:
        errs = []
        for m in range(problem.n_residuals):
            i = problem.obs_frame[m]
            errs.append(float(reprojection_error(
                self.points[problem.obs_point[m]], self.trajectory[i],
                problem.targets[m])))
        return float(np.mean(errs))


class _State:
    """Mutable optimization state with the gauge parameterization."""

    def __init__(self, problem: BAProblem):
        n = problem.n_frames
        if n < 2:
            raise DataError("bundle adjustment needs at least 2 poses")
        self.v = rotation_to_6d(problem.rotations).astype(np.float64)
        self.centers = problem.centers.astype(np.float64).copy()
        self.points = problem.points.astype(np.float64).copy()
        baseline = self.centers[1] - self.centers[0]
        self.baseline_length = float(np.linalg.norm(baseline))
        self.scale_gauge = self.baseline_length > 1e-12
        self.direction = (baseline / self.baseline_length
                          if self.scale_gauge else np.zeros(3))
        # per-camera free widths: pose 0 frozen; camera 1 trades its center
        # for a 2-d tangent direction when the scale gauge is active
        self.cam_width = [0] + [8 if self.scale_gauge else 9] + [9] * (n - 2)
        self.cam_offset = np.concatenate([[0], np.cumsum(self.cam_width)])
        self.n_cam_params = int(self.cam_offset[-1])

    def rotations(self) -> np.ndarray:
        return rotation_from_6d(self.v)

    def tangent_basis(self) -> np.ndarray:
        """Orthonormal (3, 2) basis of the plane orthogonal to the baseline."""
        d = self.direction
        helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(d, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(d, e1)
        return np.stack([e1, e2], axis=-1)

    def apply_step(self, delta: np.ndarray, tangent: np.ndarray) -> "_State":
        out = _State.__new__(_State)
        out.v = self.v.copy()
        out.centers = self.centers.copy()
        out.points = self.points.copy()
        out.baseline_length = self.baseline_length
        out.scale_gauge = self.scale_gauge
        out.direction = self.direction.copy()
        out.cam_width = self.cam_width
        out.cam_offset = self.cam_offset
        out.n_cam_params = self.n_cam_params

        for i in range(1, len(self.cam_width)):
            off = self.cam_offset[i]
            out.v[i] = self.v[i] + delta[off:off + 6]
            if i == 1 and self.scale_gauge:
                moved = self.direction + tangent @ delta[off + 6:off + 8]
                out.direction = moved / np.linalg.norm(moved)
                out.centers[1] = out.centers[0] + self.baseline_length * out.direction
            else:
                out.centers[i] = self.centers[i] + delta[off + 6:off + 9]
        n_pts = self.points.shape[0]
        out.points = self.points + delta[self.n_cam_params:].reshape(n_pts, 3)
        return out


def _residuals_and_cost(state: _State, problem: BAProblem):
    R = state.rotations()
    w = state.points[problem.obs_point] - state.centers[problem.obs_frame]
    c = np.einsum("mb,mba->ma", w, R[problem.obs_frame])
    depth = c[:, 2]
    if np.abs(depth).min() < _MIN_TRIAL_DEPTH:
        return None, np.inf
    r = c[:, :2] / depth[:, None] - problem.targets
    return r, float((r * r).sum())


def _linearize(state: _State, problem: BAProblem):
    """Per-residual Jacobian blocks: A (2 x cam_width) and B (2 x 3)."""
    n = problem.n_frames
    tangent = state.tangent_basis() if state.scale_gauge else None
    r_all, cost = _residuals_and_cost(state, problem)
    if r_all is None:
        raise NumericalError("linearization point has a residual at zero depth")
    A_blocks = [None] * problem.n_residuals
    B_blocks = [None] * problem.n_residuals
    for i in range(n):
        sel = np.flatnonzero(problem.obs_frame == i)
        if sel.size == 0:
            continue
        R, dR = rotation_from_6d_jacobian(state.v[i])
        pts = state.points[problem.obs_point[sel]]
        w = pts - state.centers[i]
        c = w @ R
        z = c[:, 2]
        m = sel.size
        dpdc = np.zeros((m, 2, 3))
        dpdc[:, 0, 0] = 1.0 / z
        dpdc[:, 1, 1] = 1.0 / z
        dpdc[:, 0, 2] = -c[:, 0] / z ** 2
        dpdc[:, 1, 2] = -c[:, 1] / z ** 2
        B = np.einsum("mij,kj->mik", dpdc, R)           # d residual / d X
        dcdv = np.einsum("mb,bak->mak", w, dR)           # (m, 3, 6)
        Jv = np.einsum("mij,mjk->mik", dpdc, dcdv)       # (m, 2, 6)
        Jt = -B
        width = state.cam_width[i]
        for row, obs in enumerate(sel):
            if width == 0:
                A = np.zeros((2, 0))
            elif i == 1 and state.scale_gauge:
                A = np.concatenate(
                    [Jv[row], Jt[row] @ (state.baseline_length * tangent)], axis=1)
            else:
                A = np.concatenate([Jv[row], Jt[row]], axis=1)
            A_blocks[obs] = A
            B_blocks[obs] = B[row]
    return r_all, cost, A_blocks, B_blocks, tangent


def _solve_dense(state, problem, r, A_blocks, B_blocks, lam):
    n_par = state.n_cam_params + 3 * problem.n_points
    J = np.zeros((2 * problem.n_residuals, n_par))
    for m in range(problem.n_residuals):
        i = problem.obs_frame[m]
        off = state.cam_offset[i]
        J[2 * m:2 * m + 2, off:off + state.cam_width[i]] = A_blocks[m]
        p_off = state.n_cam_params + 3 * problem.obs_point[m]
        J[2 * m:2 * m + 2, p_off:p_off + 3] = B_blocks[m]
    H = J.T @ J
    g = J.T @ r.ravel()
    damped = H + lam * np.diag(np.maximum(np.diag(H), _DIAG_FLOOR))
    return np.linalg.solve(damped, -g)


def _solve_schur(state, problem, r, A_blocks, B_blocks, lam):
    n_cam = state.n_cam_params
    n_pts = problem.n_points
    U = np.zeros((n_cam, n_cam))
    V = np.zeros((n_pts, 3, 3))
    W = np.zeros((n_cam, 3 * n_pts))
    g_c = np.zeros(n_cam)
    g_p = np.zeros((n_pts, 3))
    for m in range(problem.n_residuals):
        i = problem.obs_frame[m]
        j = problem.obs_point[m]
        A, B = A_blocks[m], B_blocks[m]
        off, width = state.cam_offset[i], state.cam_width[i]
        if width:
            U[off:off + width, off:off + width] += A.T @ A
            W[off:off + width, 3 * j:3 * j + 3] += A.T @ B
            g_c[off:off + width] += A.T @ r[m]
        V[j] += B.T @ B
        g_p[j] += B.T @ r[m]

    U_d = U + lam * np.diag(np.maximum(np.diag(U), _DIAG_FLOOR))
    S = U_d.copy()
    rhs = -g_c
    V_inv = np.zeros_like(V)
    for j in range(n_pts):
        V_dj = V[j] + lam * np.diag(np.maximum(np.diag(V[j]), _DIAG_FLOOR))
        V_inv[j] = np.linalg.inv(V_dj)
        Wj = W[:, 3 * j:3 * j + 3]
        S -= Wj @ V_inv[j] @ Wj.T
        rhs += Wj @ V_inv[j] @ g_p[j]
    delta_c = np.linalg.solve(S, rhs)
    delta_p = np.zeros((n_pts, 3))
    for j in range(n_pts):
        Wj = W[:, 3 * j:3 * j + 3]
        delta_p[j] = V_inv[j] @ (-g_p[j] - Wj.T @ delta_c)
    return np.concatenate([delta_c, delta_p.ravel()])


def lm_solve_step(state, problem, r, A_blocks, B_blocks, lam, solver: str):
    if solver == "dense":
        return _solve_dense(state, problem, r, A_blocks, B_blocks, lam)
    return _solve_schur(state, problem, r, A_blocks, B_blocks, lam)


def bundle_adjust(problem: BAProblem, opts: BAOptions | None = None) -> BAResult:
    """Damped Gauss-Newton refinement; accepted steps strictly decrease
    the cost, and the returned trace is [initial cost, accepted costs...]."""
    opts = opts or BAOptions()
    state = _State(problem)
    _, cost = _residuals_and_cost(state, problem)
    if not np.isfinite(cost):
        raise NumericalError("initial bundle-adjustment state has non-positive depths")
    trace = [cost]
    lam = opts.lm_lambda0
    iterations = 0

    for iterations in range(1, opts.max_iters + 1):
        if cost < 1e-24:
            break
        r, cost, A_blocks, B_blocks, tangent = _linearize(state, problem)
        accepted = False
        while lam <= opts.max_lambda:
            try:
                delta = lm_solve_step(state, problem, r, A_blocks, B_blocks,
                                      lam, opts.solver)
            except np.linalg.LinAlgError as e:
                if lam * opts.lambda_up > opts.max_lambda:
                    raise NumericalError(
                        f"singular normal equations at lambda {lam:.1e}; "
                        f"cost trace {trace}") from e
                lam *= opts.lambda_up
                continue
            candidate = state.apply_step(delta, tangent)
            _, new_cost = _residuals_and_cost(candidate, problem)
            if new_cost < cost:
                state = candidate
                relative_drop = (cost - new_cost) / max(cost, 1e-300)
                cost = new_cost
                trace.append(cost)
                lam = max(lam * opts.lambda_down, 1e-15)
                accepted = True
                if relative_drop < opts.tol:
                    return _finish(state, problem, trace, iterations, lam)
                break
            lam *= opts.lambda_up
        if not accepted:
            break
    return _finish(state, problem, trace, iterations, lam)


def _finish(state, problem, trace, iterations, lam) -> BAResult:
    rotations = state.rotations()
    rotations[0] = problem.rotations[0]  # frozen pose stays bitwise intact
    return BAResult(CameraTrajectory(rotations, state.centers), state.points,
                    trace, iterations, lam)
