"""Feed-forward inference on a full track tensor.

Tracks observed in too few frames are dropped (the same rule training
uses); the survivors go through one network forward pass. The result
carries detached numpy outputs plus the index remapping back into the
caller's tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .errors import DataError
from .network import NetworkConfig, forward
from .tracks import MIN_OBSERVATIONS, PointTrackTensor


@dataclass
class InferenceResult:
    outputs: SimpleNamespace     # bases, coeffs, gamma, trajectory (numpy)
    clouds: np.ndarray           # (N, P_kept, 3)
    kept_tracks: np.ndarray      # original track index per kept column
    tracks: PointTrackTensor     # the filtered tensor the network saw

    def depths(self) -> np.ndarray:
        """Per-frame depth of every kept track point, (N, P_kept)."""
        from .geometry import camera_point
        traj = self.outputs.trajectory
        cam = camera_point(self.clouds,
                           (traj.rotations[:, None], traj.centers[:, None]))
        return cam[..., 2]


def filter_tracks(tracks: PointTrackTensor,
                  min_obs: int = MIN_OBSERVATIONS):
    """Keep tracks observed in strictly more than ``min_obs`` frames."""
    counts = tracks.observation_counts()
    keep = np.flatnonzero(counts > min_obs)
    if keep.size < 2:
        raise DataError(
            f"fewer than 2 tracks observed in more than {min_obs} frames")
    return tracks.subset(tracks=keep), keep


def infer(tracks: PointTrackTensor, params: dict,
          cfg: NetworkConfig) -> InferenceResult:
    if tracks.n_frames < 2:
        raise DataError("inference needs at least 2 frames")
    filtered, kept = filter_tracks(tracks)
    outputs, clouds = forward(filtered, params, cfg)
    return InferenceResult(outputs.numpy(),
                           np.array(clouds.data, dtype=np.float64),
                           kept, filtered)
