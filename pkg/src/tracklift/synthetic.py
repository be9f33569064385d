"""Synthetic low-rank dynamic scenes with exact ground truth.

Scenes follow the same structural model the network predicts: a static
base cloud plus coefficient-weighted deviation clouds, viewed by a
smooth camera path that looks at the origin from roughly 15 world units
away (matching the camera pretraining target). The emitted track tensor
is the exact projection of the ground-truth structure, optionally
corrupted by isotropic noise and simulated occlusion runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalError
from .geometry import CameraTrajectory, camera_point, look_at_rotation
from .tracks import Intrinsics, PointTrackTensor

_CAMERA_RADIUS = 15.0
_WORLD_BOX = np.array([[-4.0, 4.0], [-3.0, 3.0], [-4.0, 4.0]])
_MIN_DEPTH = 0.5
TRAJECTORY_KINDS = ("arc", "orbit", "line")


@dataclass
class SceneConfig:
    n_frames: int = 40
    n_tracks: int = 120
    k_bases: int = 3
    dynamic_fraction: float = 0.3
    noise_std: float = 0.0
    occlusion_rate: float = 0.0
    trajectory_kind: str = "arc"
    deviation_scale: float = 0.6
    coeff_scale: float = 0.8

    def __post_init__(self):
        if self.n_frames < 2:
            raise DataError("need at least 2 frames")
        if self.n_tracks < 4:
            raise DataError("need at least 4 tracks")
        if self.k_bases < 1:
            raise DataError("need at least 1 basis")
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise DataError("dynamic_fraction outside [0, 1]")
        if self.trajectory_kind not in TRAJECTORY_KINDS:
            raise DataError(f"unknown trajectory kind {self.trajectory_kind!r}")


@dataclass
class SyntheticScene:
    """Ground truth for one generated sequence."""

    poses: CameraTrajectory
    bases: np.ndarray          # (K, P, 3)
    coeffs: np.ndarray         # (N, K-1)
    dynamic_mask: np.ndarray   # (P,) bool, True for dynamic points
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(500.0, 500.0, 320.0, 240.0))

    def clouds(self) -> np.ndarray:
        """Per-frame point clouds (N, P, 3)."""
        return assemble_clouds_np(self.bases, self.coeffs)

    def depths(self) -> np.ndarray:
        """Depth of every point in every camera, (N, P)."""
        X = self.clouds()
        c = camera_point(X, (self.poses.rotations[:, None], self.poses.centers[:, None]))
        return c[..., 2]


def assemble_clouds_np(bases: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """X_i = B_1 + sum_k c_ik B_k over plain arrays."""
    if bases.shape[0] - 1 != coeffs.shape[1]:
        raise DataError(f"bases K={bases.shape[0]} vs coeffs K-1={coeffs.shape[1]}")
    clouds = np.broadcast_to(bases[0], (coeffs.shape[0],) + bases[0].shape).copy()
    if bases.shape[0] > 1:
        clouds += np.einsum("nk,kpc->npc", coeffs, bases[1:])
    return clouds


def _camera_path(kind: str, n: int):
    i = np.arange(n)
    if kind == "arc":
        az = np.linspace(-0.45, 0.45, n)
        height = 1.5 * np.sin(2.0 * az)
    elif kind == "orbit":
        az = 2.0 * np.pi * i / n
        height = 1.0 * np.sin(az)
    else:  # line
        az = np.zeros(n)
        height = np.zeros(n)
    centers = np.stack([
        _CAMERA_RADIUS * np.sin(az),
        height,
        -_CAMERA_RADIUS * np.cos(az),
    ], axis=-1)
    if kind == "line":
        centers[:, 0] = np.linspace(-4.0, 4.0, n)
    rotations = np.stack([look_at_rotation(c, np.zeros(3)) for c in centers])
    return CameraTrajectory(rotations, centers)


def _smooth_coefficients(rng, n: int, k: int, scale: float) -> np.ndarray:
    """Low-pass filtered noise over time, one column per deviation basis."""
    if k == 0:
        return np.zeros((n, 0))
    width = max(3, n // 6)
    kernel = np.hanning(width + 2)[1:-1]
    kernel /= kernel.sum()
    white = rng.normal(size=(n + width - 1, k))
    smooth = np.stack([np.convolve(white[:, j], kernel, mode="valid")
                       for j in range(k)], axis=-1)
    std = smooth.std(axis=0)
    std[std < 1e-9] = 1.0
    return scale * smooth / std


def _occlusion_mask(rng, n: int, rate: float) -> np.ndarray:
    """Temporally coherent occlusion: Bernoulli-started geometric runs."""
    visible = np.ones(n, dtype=np.uint8)
    if rate <= 0.0:
        return visible
    mean_run = 4.0
    start_prob = rate / ((1.0 - rate) * mean_run)
    i = 0
    while i < n:
        if rng.random() < start_prob:
            run = int(rng.geometric(1.0 / mean_run))
            visible[i:i + run] = 0
            i += run
        else:
            i += 1
    return visible


def generate_synthetic_scene(cfg: SceneConfig, seed: int):
    """Build one scene and its (possibly noisy, occluded) track tensor.

    Deterministic per (cfg, seed). Points whose assembled trajectory
    would dip behind any camera are resampled up to 100 times before
    the generator gives up.
    """
    rng = np.random.default_rng(seed)
    n, p, k = cfg.n_frames, cfg.n_tracks, cfg.k_bases
    poses = _camera_path(cfg.trajectory_kind, n)

    n_dynamic = int(round(p * cfg.dynamic_fraction))
    dynamic_idx = np.sort(rng.choice(p, size=n_dynamic, replace=False))
    dynamic_mask = np.zeros(p, dtype=bool)
    dynamic_mask[dynamic_idx] = True

    def sample_point_rows(count):
        base = rng.uniform(_WORLD_BOX[:, 0], _WORLD_BOX[:, 1], size=(count, 3))
        dev = rng.normal(0.0, cfg.deviation_scale, size=(k - 1, count, 3))
        return base, dev

    bases = np.zeros((k, p, 3))
    base, dev = sample_point_rows(p)
    bases[0] = base
    if k > 1:
        bases[1:] = dev
        bases[1:, ~dynamic_mask, :] = 0.0

    coeffs = _smooth_coefficients(rng, n, k - 1, cfg.coeff_scale)

    for attempt in range(101):
        clouds = assemble_clouds_np(bases, coeffs)
        cam = camera_point(clouds, (poses.rotations[:, None], poses.centers[:, None]))
        bad = np.flatnonzero((cam[..., 2] < _MIN_DEPTH).any(axis=0))
        if bad.size == 0:
            break
        if attempt == 100:
            raise NumericalError(
                f"{bad.size} points remained behind a camera after 100 resamples")
        base, dev = sample_point_rows(bad.size)
        bases[0, bad] = base
        if k > 1:
            bases[1:, bad, :] = dev
            static_bad = bad[~dynamic_mask[bad]]
            bases[1:, static_bad, :] = 0.0

    xy = cam[..., :2] / cam[..., 2:3]
    if cfg.noise_std > 0.0:
        xy = xy + rng.normal(0.0, cfg.noise_std, size=xy.shape)

    o = np.ones((n, p), dtype=np.uint8)
    if cfg.occlusion_rate > 0.0:
        for j in range(p):
            for _ in range(100):
                mask = _occlusion_mask(rng, n, cfg.occlusion_rate)
                if mask.any():
                    break
            else:
                mask = np.ones(n, dtype=np.uint8)
            o[:, j] = mask

    scene = SyntheticScene(poses, bases, coeffs, dynamic_mask)
    tracks = PointTrackTensor(np.where(o[:, :, None].astype(bool), xy, 0.0), o,
                              scene.intrinsics)
    return scene, tracks


# -- ground-truth sidecar ------------------------------------------------

SCENE_JSON_VERSION = 1


def write_scene_json(path, scene: SyntheticScene) -> None:
    doc = {
        "version": SCENE_JSON_VERSION,
        "poses": [{"R": scene.poses.rotations[i].tolist(),
                   "t": scene.poses.centers[i].tolist()}
                  for i in range(len(scene.poses))],
        "bases": scene.bases.tolist(),
        "coefficients": scene.coeffs.tolist(),
        "dynamic_mask": scene.dynamic_mask.astype(int).tolist(),
        "intrinsics": scene.intrinsics.to_dict(),
    }
    Path(path).write_text(json.dumps(doc))


def read_scene_json(path) -> SyntheticScene:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid scene JSON: {e}") from e
    if doc.get("version") != SCENE_JSON_VERSION:
        raise DataError(f"{path}: unsupported scene version {doc.get('version')}")
    rotations = np.array([p["R"] for p in doc["poses"]], dtype=np.float64)
    centers = np.array([p["t"] for p in doc["poses"]], dtype=np.float64)
    return SyntheticScene(
        CameraTrajectory(rotations, centers),
        np.array(doc["bases"], dtype=np.float64),
        np.array(doc["coefficients"], dtype=np.float64),
        np.array(doc["dynamic_mask"], dtype=bool),
        Intrinsics.from_dict(doc["intrinsics"]),
    )
