"""Self-supervised training objectives.

Four weighted terms: the reprojection consistency of the assembled
clouds, a robust (Cauchy) reprojection loss of the static base cloud
that constrains the cameras, a hinge on negative depths, and an L1
sparsity penalty on the deviation bases. A separate quadratic pretrain
loss parks all cameras behind the origin before main training.

Gradient-detachment rules:
  * the reprojection loss sees the base cloud B1 and all poses through
    stop-gradients (only deviations and coefficients learn from it);
  * the sparsity loss sees the motion levels through a stop-gradient;
  * everything is live in the static and negative-depth losses.

Observation gating: entries with o = 0 contribute exactly zero to every
loss value and gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, NumericalError
from .geometry import camera_point, project_guarded
from .network import POSE_CENTER_INIT, NetworkOutputs
from .tracks import PointTrackTensor

PRETRAIN_CENTER_TARGET = POSE_CENTER_INIT


@dataclass
class LossWeights:
    reproject: float = 50.0
    static: float = 1.0
    negative: float = 1.0
    sparse: float = 0.001

    def __post_init__(self):
        if min(self.reproject, self.static, self.negative, self.sparse) < 0:
            raise DataError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    total: float
    reproject: float
    static: float
    negative: float
    sparse: float

    def to_dict(self) -> dict:
        return {"total": self.total, "reproject": self.reproject,
                "static": self.static, "negative": self.negative,
                "sparse": self.sparse}


def _per_frame_pose(rotations: Tensor, centers: Tensor):
    n = rotations.shape[0]
    return (ad.reshape(rotations, (n, 1, 3, 3)), ad.reshape(centers, (n, 1, 3)))


def _observation_mask(tracks: PointTrackTensor, dtype) -> tuple[Tensor, float]:
    count = float(tracks.o.sum())
    if count == 0:
        raise DataError("no observed entries")
    return Tensor(tracks.o.astype(dtype)), count


def _masked_reprojection_residuals(points: Tensor, rotations: Tensor,
                                   centers: Tensor, tracks: PointTrackTensor) -> Tensor:
    """Per-entry reprojection error (N, P) with guarded perspective division."""
    proj = project_guarded(points, _per_frame_pose(rotations, centers))
    diff = proj - Tensor(tracks.xy.astype(proj.data.dtype))
    return ad.sqrt(ad.tsum(diff * diff, axis=-1))


def reprojection_loss(outputs: NetworkOutputs, tracks: PointTrackTensor) -> Tensor:
    """Mean observed reprojection error of the assembled clouds.

    B1 and the poses are wrapped in stop-gradients here: this term
    shapes the deviations and coefficients only.
    """
    k = outputs.bases.shape[0]
    n = outputs.coeffs.shape[0]
    b1 = ad.stop_gradient(outputs.bases[0:1])
    deviations = outputs.bases[1:]
    weighted = ad.reshape(outputs.coeffs, (n, k - 1, 1, 1)) * \
        ad.reshape(deviations, (1,) + deviations.shape)
    clouds = ad.tsum(weighted, axis=1) + b1
    err = _masked_reprojection_residuals(
        clouds, ad.stop_gradient(outputs.rotations),
        ad.stop_gradient(outputs.centers), tracks)
    mask, count = _observation_mask(tracks, err.data.dtype)
    return ad.tsum(mask * err) / count


def cauchy_nll(r, gamma, gamma_floor: float = 1e-4):
    """Negative log-likelihood of a zero-mean Cauchy residual:
    log(gamma + r^2 / gamma). Accepts floats, arrays, or tensors."""
    raw = gamma.data if isinstance(gamma, Tensor) else np.asarray(gamma)
    if np.any(raw < gamma_floor):
        raise NumericalError(f"gamma below floor {gamma_floor}")
    if isinstance(r, Tensor) or isinstance(gamma, Tensor):
        return ad.log(gamma + r * r / gamma)
    return np.log(raw + np.asarray(r) ** 2 / raw)


def static_loss(outputs: NetworkOutputs, tracks: PointTrackTensor,
                use_gamma: bool = True, gamma_floor: float = 1e-4) -> Tensor:
    """Mean Cauchy NLL of projecting the static base cloud everywhere.

    This is the loss that constrains the cameras: gradients flow to B1,
    the motion levels, and all poses. With ``use_gamma`` off (ablation)
    it degrades to the plain mean reprojection error of B1.
    """
    p = outputs.bases.shape[1]
    b1 = ad.reshape(outputs.bases[0], (1, p, 3))
    err = _masked_reprojection_residuals(b1, outputs.rotations, outputs.centers,
                                         tracks)
    mask, count = _observation_mask(tracks, err.data.dtype)
    if not use_gamma:
        return ad.tsum(mask * err) / count
    gamma_row = ad.reshape(outputs.gamma, (1, p))
    nll = cauchy_nll(err, gamma_row, gamma_floor)
    return ad.tsum(mask * nll) / count


def negative_depth_loss(clouds: Tensor, rotations: Tensor, centers: Tensor,
                        tracks: PointTrackTensor) -> Tensor:
    """Unnormalized hinge keeping observed points in front of the camera."""
    cam = camera_point(clouds, _per_frame_pose(rotations, centers))
    depth = cam[:, :, 2]
    mask, _ = _observation_mask(tracks, depth.data.dtype)
    return -ad.tsum(mask * ad.minimum(depth, 0.0))


def sparsity_loss(bases: Tensor, gamma: Tensor) -> Tensor:
    """Motion-level-weighted L1 of the deviation bases.

    gamma enters through a stop-gradient: this loss never reshapes the
    motion levels themselves.
    """
    k, p, _ = bases.shape
    if k < 2:
        raise DataError("sparsity loss needs at least one deviation basis")
    deviations = ad.absval(bases[1:])
    l1 = ad.tsum(deviations, axis=-1)  # (K-1, P)
    inv_gamma = 1.0 / (3.0 * ad.reshape(ad.stop_gradient(gamma), (1, p)))
    return ad.tsum(l1 * inv_gamma) / float(p * (k - 1))


def total_loss(outputs: NetworkOutputs, clouds: Tensor, tracks: PointTrackTensor,
               weights: LossWeights, use_gamma: bool = True,
               gamma_floor: float = 1e-4):
    """Weighted sum of the four objectives.

    Returns the differentiable total plus a float breakdown satisfying
    total == sum of weighted components.
    """
    rep = reprojection_loss(outputs, tracks)
    stat = static_loss(outputs, tracks, use_gamma=use_gamma, gamma_floor=gamma_floor)
    neg = negative_depth_loss(clouds, outputs.rotations, outputs.centers, tracks)
    spa = sparsity_loss(outputs.bases, outputs.gamma)
    total = (weights.reproject * rep + weights.static * stat
             + weights.negative * neg + weights.sparse * spa)
    breakdown = LossBreakdown(total.item(), rep.item(), stat.item(), neg.item(),
                              spa.item())
    return total, breakdown


def pretrain_loss(rotations: Tensor, centers: Tensor) -> Tensor:
    """Quadratic pull of every pose to the identity orientation at
    (0, 0, -15): mean over frames of ||t - target||^2 / 100 + ||R - I||_F^2."""
    n = rotations.shape[0]
    dtype = rotations.data.dtype
    dt = centers - Tensor(PRETRAIN_CENTER_TARGET.astype(dtype).reshape(1, 3))
    t_term = ad.tsum(dt * dt, axis=-1) * 0.01
    dr = rotations - Tensor(np.eye(3, dtype=dtype).reshape(1, 3, 3))
    r_term = ad.tsum(ad.reshape(dr * dr, (n, 9)), axis=-1)
    return ad.tmean(t_term + r_term)
