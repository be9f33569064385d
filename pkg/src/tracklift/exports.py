"""File exports: trajectory JSON, binary PLY clouds, CSV traces."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import CameraTrajectory

TRAJECTORY_VERSION = 1


def write_trajectory_json(path, traj: CameraTrajectory) -> None:
    doc = {
        "format": "trajectory",
        "version": TRAJECTORY_VERSION,
        "poses": [{"R": traj.rotations[i].tolist(), "t": traj.centers[i].tolist()}
                  for i in range(len(traj))],
    }
    Path(path).write_text(json.dumps(doc))


def read_trajectory_json(path) -> CameraTrajectory:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid trajectory JSON: {e}") from e
    if doc.get("format") != "trajectory" or doc.get("version") != TRAJECTORY_VERSION:
        raise DataError(f"{path}: not a version-{TRAJECTORY_VERSION} trajectory file")
    rotations = np.array([p["R"] for p in doc["poses"]], dtype=np.float64)
    centers = np.array([p["t"] for p in doc["poses"]], dtype=np.float64)
    return CameraTrajectory(rotations, centers)


def write_ply(path, points: np.ndarray, quality: np.ndarray | None = None) -> None:
    """Binary little-endian PLY; optional per-vertex quality channel."""
    points = np.asarray(points, dtype="<f4")
    if points.ndim != 2 or points.shape[1] != 3:
        raise DataError(f"PLY points must be (P, 3), got {points.shape}")
    lines = ["ply", "format binary_little_endian 1.0",
             f"element vertex {points.shape[0]}",
             "property float x", "property float y", "property float z"]
    if quality is not None:
        quality = np.asarray(quality, dtype="<f4")
        if quality.shape != (points.shape[0],):
            raise DataError("quality channel length mismatch")
        lines.append("property float quality")
        payload = np.concatenate([points, quality[:, None]], axis=1)
    else:
        payload = points
    header = "\n".join(lines + ["end_header", ""])
    Path(path).write_bytes(header.encode("ascii") + payload.tobytes(order="C"))


def read_ply(path):
    """Read PLYs produced by write_ply. Returns (points, quality or None)."""
    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    pos = raw.find(marker)
    if not raw.startswith(b"ply") or pos < 0:
        raise DataError(f"{path}: not a PLY file")
    header = raw[:pos].decode("ascii").splitlines()
    n_vertex = None
    props = []
    for line in header:
        if line.startswith("element vertex"):
            n_vertex = int(line.split()[-1])
        elif line.startswith("property float"):
            props.append(line.split()[-1])
    if n_vertex is None or props[:3] != ["x", "y", "z"]:
        raise DataError(f"{path}: unsupported PLY layout")
    width = len(props)
    data = np.frombuffer(raw, dtype="<f4", count=n_vertex * width,
                         offset=pos + len(marker)).reshape(n_vertex, width)
    quality = data[:, 3].copy() if width > 3 else None
    return data[:, :3].astype(np.float64), quality


def write_gamma_csv(path, track_indices: np.ndarray, gamma: np.ndarray) -> None:
    """One `original_track_index,gamma` row per surviving track (no header,
    so the line count equals the track count)."""
    lines = [f"{int(i)},{float(g)!r}" for i, g in zip(track_indices, gamma)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_gamma_csv(path):
    indices, gamma = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        i, g = line.split(",")
        indices.append(int(i))
        gamma.append(float(g))
    return np.asarray(indices), np.asarray(gamma)


def write_cost_trace_csv(path, trace) -> None:
    lines = ["iteration,cost"] + [f"{i},{float(c)!r}" for i, c in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_cost_trace_csv(path):
    lines = Path(path).read_text().splitlines()
    return [float(line.split(",")[1]) for line in lines[1:] if line.strip()]


def write_coefficients_json(path, bases: np.ndarray, coeffs: np.ndarray) -> None:
    doc = {"bases": np.asarray(bases).tolist(),
           "coefficients": np.asarray(coeffs).tolist()}
    Path(path).write_text(json.dumps(doc))
