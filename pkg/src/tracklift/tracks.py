"""Point-track tensors: data model, T4D binary format, sampling rules.

A track tensor stores, for each of N frames and P tracks, a normalized
2D observation (x, y) and a {0, 1} visibility flag o. Unobserved entries
carry zero coordinates and are ignored by every consumer.

T4D file layout (little-endian):
  magic "T4D1" | u32 N | u32 P | u32 flags (bit0: has-intrinsics) |
  u32 reserved=0 | [4 x f32 fx fy cx cy if bit0] |
  N*P*2 f32 xy (frame-major, point-minor) | N*P u8 flags (same order)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"T4D1"
_HEADER = struct.Struct("<4sIIII")
_INTR = struct.Struct("<4f")
FLAG_HAS_INTRINSICS = 1
# Tracks observed in at most this many frames are dropped by samplers
# and by inference.
MIN_OBSERVATIONS = 10


@dataclass
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DataError(f"non-positive focal length ({self.fx}, {self.fy})")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


class PointTrackTensor:
    """N x P x (x, y, o) observations of P tracked points over N frames.

    ``intrinsics``, when present, are the pinhole parameters that relate
    the stored normalized coordinates back to pixels.
    """

    def __init__(self, xy: np.ndarray, o: np.ndarray,
                 intrinsics: Intrinsics | None = None):
        xy = np.asarray(xy)
        o = np.asarray(o)
        if xy.ndim != 3 or xy.shape[2] != 2:
            raise DataError(f"xy shape {xy.shape} is not (N, P, 2)")
        if o.shape != xy.shape[:2]:
            raise DataError(f"o shape {o.shape} does not match xy {xy.shape}")
        o = o.astype(np.uint8)
        if not np.isin(o, (0, 1)).all():
            raise DataError("observation flags must be exactly 0 or 1")
        if not o.any(axis=0).all():
            dead = int(np.argmin(o.any(axis=0)))
            raise DataError(f"track {dead} has no observed frame")
        observed = o.astype(bool)
        if not np.isfinite(xy[observed]).all():
            raise DataError("non-finite coordinates at observed entries")
        # zero-fill unobserved entries so serialization is canonical
        self.xy = np.where(observed[:, :, None], xy, 0.0)
        self.o = o
        self.intrinsics = intrinsics

    @property
    def n_frames(self) -> int:
        return self.xy.shape[0]

    @property
    def n_tracks(self) -> int:
        return self.xy.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return self.o.astype(bool)

    def observation_counts(self) -> np.ndarray:
        return self.o.sum(axis=0).astype(np.int64)

    def subset(self, frames=None, tracks=None) -> "PointTrackTensor":
        xy, o = self.xy, self.o
        if frames is not None:
            xy, o = xy[frames], o[frames]
        if tracks is not None:
            xy, o = xy[:, tracks], o[:, tracks]
        return PointTrackTensor(xy, o, self.intrinsics)


def save_tracks(path, tracks: PointTrackTensor) -> None:
    path = Path(path)
    flags = FLAG_HAS_INTRINSICS if tracks.intrinsics is not None else 0
    blob = [_HEADER.pack(MAGIC, tracks.n_frames, tracks.n_tracks, flags, 0)]
    if tracks.intrinsics is not None:
        i = tracks.intrinsics
        blob.append(_INTR.pack(i.fx, i.fy, i.cx, i.cy))
    blob.append(tracks.xy.astype("<f4").tobytes(order="C"))
    blob.append(tracks.o.astype(np.uint8).tobytes(order="C"))
    path.write_bytes(b"".join(blob))


def load_tracks(path) -> PointTrackTensor:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, n, p, flags, reserved = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: magic mismatch, got {magic!r}")
    if reserved != 0:
        raise DataError(f"{path}: nonzero reserved field {reserved}")
    offset = _HEADER.size
    intr = None
    if flags & FLAG_HAS_INTRINSICS:
        if len(raw) < offset + _INTR.size:
            raise DataError(f"{path}: truncated intrinsics block")
        intr = Intrinsics(*_INTR.unpack_from(raw, offset))
        offset += _INTR.size
    n_xy = n * p * 2 * 4
    n_o = n * p
    if n_xy + n_o != len(raw) - offset:
        raise DataError(
            f"{path}: payload size mismatch (N={n}, P={p} needs "
            f"{n_xy + n_o} bytes, found {len(raw) - offset})")
    xy = np.frombuffer(raw, dtype="<f4", count=n * p * 2, offset=offset)
    xy = xy.reshape(n, p, 2).astype(np.float32)
    o = np.frombuffer(raw, dtype=np.uint8, count=n * p, offset=offset + n_xy)
    o = o.reshape(n, p).copy()
    return PointTrackTensor(xy, o, intr)


# -- intrinsics normalization --------------------------------------------

def normalize_by_intrinsics(tracks_px: PointTrackTensor,
                            intr: Intrinsics) -> PointTrackTensor:
    """Pixel coordinates to normalized: ((x - cx) / fx, (y - cy) / fy)."""
    xy = np.empty_like(tracks_px.xy, dtype=np.float64)
    xy[:, :, 0] = (tracks_px.xy[:, :, 0] - intr.cx) / intr.fx
    xy[:, :, 1] = (tracks_px.xy[:, :, 1] - intr.cy) / intr.fy
    return PointTrackTensor(xy, tracks_px.o, intr)


def denormalize_by_intrinsics(tracks_norm: PointTrackTensor,
                              intr: Intrinsics) -> PointTrackTensor:
    xy = np.empty_like(tracks_norm.xy, dtype=np.float64)
    xy[:, :, 0] = tracks_norm.xy[:, :, 0] * intr.fx + intr.cx
    xy[:, :, 1] = tracks_norm.xy[:, :, 1] * intr.fy + intr.cy
    return PointTrackTensor(xy, tracks_norm.o, intr)


# -- training-window sampling ----------------------------------------------

@dataclass
class SampledWindow:
    """A frame window plus provenance of the tracks drawn from it."""

    tracks: PointTrackTensor
    frame_start: int
    track_indices: np.ndarray
    short: bool  # fewer eligible tracks than requested


def eligible_tracks(tracks: PointTrackTensor, frame_start: int,
                    window: int) -> np.ndarray:
    """Indices passing both sampling rules for the given window.

    A track qualifies when its first observed frame lies inside
    [start - window/2, start + 3*window/2] and it is observed strictly
    more than MIN_OBSERVATIONS times within the window itself.
    """
    obs = tracks.observed
    first_seen = np.argmax(obs, axis=0).astype(np.float64)
    lo = frame_start - window / 2.0
    hi = frame_start + 3.0 * window / 2.0
    in_range = (first_seen >= lo) & (first_seen <= hi)
    inside = obs[frame_start:frame_start + window].sum(axis=0)
    return np.flatnonzero(in_range & (inside > MIN_OBSERVATIONS))


def sample_training_window(tracks: PointTrackTensor, n_range, p_target: int,
                           rng: np.random.Generator) -> SampledWindow:
    lo, hi = int(n_range[0]), int(n_range[1])
    lo = min(lo, tracks.n_frames)
    hi = min(hi, tracks.n_frames)
    if lo < 2:
        raise DataError(f"window range {n_range} too small for {tracks.n_frames} frames")
    window = int(rng.integers(lo, hi + 1))
    frame_start = int(rng.integers(0, tracks.n_frames - window + 1))

    candidates = eligible_tracks(tracks, frame_start, window)
    if candidates.size == 0:
        raise DataError(
            f"no eligible tracks in window [{frame_start}, {frame_start + window})")
    short = candidates.size < p_target
    take = min(p_target, candidates.size)
    chosen = np.sort(rng.choice(candidates, size=take, replace=False))
    sub = tracks.subset(frames=slice(frame_start, frame_start + window),
                        tracks=chosen)
    return SampledWindow(sub, frame_start, chosen, short)
