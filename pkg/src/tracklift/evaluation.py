"""Trajectory and structure metrics.

Camera accuracy: a closed-form least-squares similarity transform
(scale, rotation, translation) aligns the estimated camera centers to
ground truth, then ATE is the RMS residual distance and RPE compares
per-gap relative motions (translation in ground-truth units after the
global scale alignment, rotation as mean geodesic angle in degrees).

Structure accuracy: per-track depths are compared after median-ratio
scale alignment with the standard monocular error set (AbsRel plus the
three delta-threshold accuracies), reported for the dynamic subset and
for all points.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import CameraTrajectory

DELTA_THRESHOLD = 1.25


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def align_similarity(est: np.ndarray, gt: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity aligning est onto gt (SVD closed form,
    with the reflection correction)."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise DataError(f"point sets must both be (N, 3), got {est.shape}, {gt.shape}")
    n = est.shape[0]
    if n < 3:
        raise DataError("similarity alignment needs at least 3 points")
    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    ce = est - mu_e
    cg = gt - mu_g
    cov = cg.T @ ce / n
    var_e = (ce * ce).sum() / n
    U, D, Vt = np.linalg.svd(cov)
    if np.linalg.matrix_rank(cov, tol=1e-12 * max(1.0, D[0])) < 2:
        raise DataError("rank-deficient covariance; points nearly collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if var_e < 1e-30:
        raise DataError("estimated points are degenerate (zero spread)")
    scale = float(np.trace(np.diag(D) @ S) / var_e)
    if scale <= 0:
        raise DataError("non-positive alignment scale")
    t = mu_g - scale * R @ mu_e
    return SimilarityTransform(scale, R, t)


def ate(est: CameraTrajectory, gt: CameraTrajectory) -> float:
    """RMS camera-center distance after similarity alignment, in gt units."""
    if len(est) != len(gt):
        raise DataError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    sim = align_similarity(est.centers, gt.centers)
    resid = sim.apply(est.centers) - gt.centers
    return float(np.sqrt((resid ** 2).sum(axis=1).mean()))


def _relative_motion(traj: CameraTrajectory, i: int, delta: int):
    """Motion of camera i+delta expressed in camera i's frame."""
    R_i, t_i = traj.rotations[i], traj.centers[i]
    R_j, t_j = traj.rotations[i + delta], traj.centers[i + delta]
    R_rel = R_i.T @ R_j
    t_rel = R_i.T @ (t_j - t_i)
    return R_rel, t_rel


def rpe(est: CameraTrajectory, gt: CameraTrajectory, delta: int = 1):
    """Relative pose errors over frame gaps of ``delta``.

    Returns (translation error in gt units, rotation error in degrees),
    both averaged over all gaps. The estimated relative translations are
    scaled by the global similarity-alignment scale first.
    """
    if len(est) != len(gt):
        raise DataError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(gt) < delta + 1:
        raise DataError(f"need at least {delta + 1} poses for gap {delta}")
    scale = align_similarity(est.centers, gt.centers).scale
    trans_errs, rot_errs = [], []
    for i in range(len(gt) - delta):
        R_e, t_e = _relative_motion(est, i, delta)
        R_g, t_g = _relative_motion(gt, i, delta)
        trans_errs.append(np.linalg.norm(scale * t_e - t_g))
        cos_angle = (np.trace(R_e.T @ R_g) - 1.0) / 2.0
        rot_errs.append(np.degrees(np.arccos(np.clip(cos_angle, -1.0, 1.0))))
    return float(np.mean(trans_errs)), float(np.mean(rot_errs))


def depth_metrics(est_depths: np.ndarray, gt_depths: np.ndarray,
                  valid: np.ndarray, dynamic_mask: np.ndarray) -> dict:
    """AbsRel and delta accuracies after median-ratio scale alignment.

    ``est_depths``/``gt_depths`` are (N, P); ``valid`` marks usable
    samples (observed entries); ``dynamic_mask`` labels tracks. Entries
    with non-positive ground truth are excluded. Returns nested dict
    {metric: {"dynamic": x, "all": y}}.
    """
    est = np.asarray(est_depths, dtype=np.float64)
    gt = np.asarray(gt_depths, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool) & (gt > 0)
    if not valid.any():
        raise DataError("no valid depth samples")
    positive_est = valid & (est > 0)
    if not positive_est.any():
        raise DataError("no positive estimated depths to set the scale")
    scale = float(np.median(gt[positive_est] / est[positive_est]))

    dyn_grid = np.broadcast_to(np.asarray(dynamic_mask, dtype=bool), est.shape)
    out = {"abs_rel": {}, "delta_1": {}, "delta_2": {}, "delta_3": {}}
    for group, mask in (("dynamic", valid & dyn_grid), ("all", valid)):
        if not mask.any():
            for metric in out:
                out[metric][group] = float("nan")
            continue
        e = est[mask] * scale
        g = gt[mask]
        out["abs_rel"][group] = float(np.mean(np.abs(e - g) / g))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.maximum(e / g, g / e)
        ratio = np.where(e <= 0, np.inf, ratio)
        for k in (1, 2, 3):
            out[f"delta_{k}"][group] = float(np.mean(ratio < DELTA_THRESHOLD ** k))
    return out


@dataclass
class MetricReport:
    ate: float
    rpe_trans: float
    rpe_rot_deg: float
    abs_rel: dict
    delta_1: dict
    delta_2: dict
    delta_3: dict

    def to_dict(self) -> dict:
        return {"ate": self.ate, "rpe_trans": self.rpe_trans,
                "rpe_rot_deg": self.rpe_rot_deg, "abs_rel": self.abs_rel,
                "delta_1.25": self.delta_1, "delta_1.25^2": self.delta_2,
                "delta_1.25^3": self.delta_3}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_parts(cls, ate_value, rpe_pair, depths: dict) -> "MetricReport":
        return cls(ate_value, rpe_pair[0], rpe_pair[1], depths["abs_rel"],
                   depths["delta_1"], depths["delta_2"], depths["delta_3"])


def evaluate_sequence(est_traj: CameraTrajectory, gt_traj: CameraTrajectory,
                      est_depths, gt_depths, valid, dynamic_mask) -> MetricReport:
    """Full metric set for one sequence."""
    depths = depth_metrics(est_depths, gt_depths, valid, dynamic_mask)
    return MetricReport.from_parts(ate(est_traj, gt_traj),
                                   rpe(est_traj, gt_traj), depths)
