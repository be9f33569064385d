"""The equivariant track-tensor network.

Pipeline: sinusoidal coordinate embedding -> linear lift -> several pairs
of (per-track attention over frames, per-frame attention over tracks),
each followed by a feed-forward block -> aggregation into per-point and
per-frame heads. The per-point head emits K basis clouds and a motion
level per track; the per-frame head (a temporal convolution) emits a
6-d rotation, a camera center, and K-1 basis coefficients per frame.

Tracks can be permuted freely: basis rows and motion levels permute
with them while coefficients and poses are unchanged. Time is handled
by positional encoding (first frame-attention only) and the temporal
convolution, so time-shift symmetry is only approximate.

An alternative stack of linear set-symmetric layers (a per-column
temporal convolution plus a track-summed one) is available via
``layer_kind="dss"`` for ablation runs.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError
from .geometry import CameraTrajectory, rotation_from_6d
from .tracks import PointTrackTensor

LAYER_KINDS = ("attention", "dss")
ROTATION_IDENTITY_6D = np.array([1.0, 0, 0, 0, 1.0, 0])
# Cameras start behind the origin facing it, which is also the target of
# the pretraining loss; initializing the head bias there keeps early
# rotations non-degenerate and the pretraining budget small.
POSE_CENTER_INIT = np.array([0.0, 0.0, -15.0])


@dataclass
class NetworkConfig:
    d_model: int = 256
    heads: int = 16
    head_dim: int = 64
    ffn_dim: int = 2048
    layer_pairs: int = 3
    k_bases: int = 12
    embed_frequencies: int = 12
    temporal_kernel: int = 31
    gamma_floor: float = 1e-4
    layer_kind: str = "attention"
    dss_kernel: int = 7
    use_gamma: bool = True

    def __post_init__(self):
        if self.k_bases < 2:
            raise DataError("k_bases must be at least 2")
        if self.temporal_kernel % 2 != 1 or self.temporal_kernel < 1:
            raise DataError("temporal_kernel must be odd and positive")
        if self.dss_kernel % 2 != 1 or self.dss_kernel < 1:
            raise DataError("dss_kernel must be odd and positive")
        if self.layer_kind not in LAYER_KINDS:
            raise DataError(f"unknown layer kind {self.layer_kind!r}")
        if self.heads < 1 or self.head_dim < 1:
            raise DataError("heads and head_dim must be positive")

    @property
    def embed_dim(self) -> int:
        return 3 + 4 * self.embed_frequencies

    @property
    def frame_out_dim(self) -> int:
        return 6 + 3 + (self.k_bases - 1)

    @property
    def point_out_dim(self) -> int:
        return 3 * self.k_bases + 1

    @classmethod
    def tiny(cls, **overrides) -> "NetworkConfig":
        """Desk-scale configuration used by the end-to-end experiments."""
        base = dict(d_model=64, heads=4, head_dim=16, ffn_dim=256,
                    layer_pairs=2, k_bases=4)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class NetworkOutputs:
    """Differentiable network outputs (autodiff tensors)."""

    bases: Tensor      # (K, P, 3)
    coeffs: Tensor     # (N, K-1)
    gamma: Tensor      # (P,)
    rotations: Tensor  # (N, 3, 3)
    centers: Tensor    # (N, 3)

    def numpy(self) -> SimpleNamespace:
        """Detached numpy view plus a pose trajectory."""
        return SimpleNamespace(
            bases=np.array(self.bases.data, dtype=np.float64),
            coeffs=np.array(self.coeffs.data, dtype=np.float64),
            gamma=np.array(self.gamma.data, dtype=np.float64),
            trajectory=CameraTrajectory(
                np.array(self.rotations.data, dtype=np.float64),
                np.array(self.centers.data, dtype=np.float64)),
        )


# -- parameter initialization ---------------------------------------------

def _param_shapes(cfg: NetworkConfig) -> dict[str, tuple]:
    d, hh = cfg.d_model, cfg.heads * cfg.head_dim
    shapes: dict[str, tuple] = {"embed.w": (cfg.embed_dim, d), "embed.b": (d,)}
    if cfg.layer_kind == "attention":
        for i in range(cfg.layer_pairs):
            for axis in ("time", "point"):
                p = f"pair{i}.{axis}"
                shapes[f"{p}.ln.scale"] = (d,)
                shapes[f"{p}.ln.shift"] = (d,)
                for m in ("q", "k", "v"):
                    shapes[f"{p}.w{m}"] = (d, hh)
                    shapes[f"{p}.b{m}"] = (hh,)
                shapes[f"{p}.wo"] = (hh, d)
                shapes[f"{p}.bo"] = (d,)
                shapes[f"{p}.ffn.ln.scale"] = (d,)
                shapes[f"{p}.ffn.ln.shift"] = (d,)
                shapes[f"{p}.ffn.w1"] = (d, cfg.ffn_dim)
                shapes[f"{p}.ffn.b1"] = (cfg.ffn_dim,)
                shapes[f"{p}.ffn.w2"] = (cfg.ffn_dim, d)
                shapes[f"{p}.ffn.b2"] = (d,)
    else:
        for i in range(2 * cfg.layer_pairs):
            shapes[f"dss{i}.l1.w"] = (cfg.dss_kernel * d, d)
            shapes[f"dss{i}.l1.b"] = (d,)
            shapes[f"dss{i}.l2.w"] = (cfg.dss_kernel * d, d)
            shapes[f"dss{i}.l2.b"] = (d,)
    shapes["final_ln.scale"] = (d,)
    shapes["final_ln.shift"] = (d,)
    shapes["point_head.w"] = (d, cfg.point_out_dim)
    shapes["point_head.b"] = (cfg.point_out_dim,)
    shapes["frame_head.w"] = (cfg.temporal_kernel * d, cfg.frame_out_dim)
    shapes["frame_head.b"] = (cfg.frame_out_dim,)
    return shapes


def init_params(cfg: NetworkConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Fan-in-scaled uniform weights, zero biases.

    The frame head starts small and biased at the identity rotation so
    early rotations are never degenerate; its center bias is zero and is
    pulled to the pretraining target during the camera pretrain phase.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(("ln.scale",)):
            arr = np.ones(shape)
        elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2",
                            "ln.shift")):
            arr = np.zeros(shape)
        else:
            fan_in = shape[0]
            scale = 0.02 if name.startswith("frame_head") else 1.0
            bound = scale / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        if name == "frame_head.b":
            arr = arr.copy()
            arr[:6] = ROTATION_IDENTITY_6D
            arr[6:9] = POSE_CENTER_INIT
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


# -- input featurization ----------------------------------------------------

def sinusoidal_embed(tracks: PointTrackTensor, frequencies: int,
                     dtype=np.float32) -> np.ndarray:
    """(x, y, o) plus sin/cos of each coordinate at frequencies 2^l * pi."""
    n, p = tracks.n_frames, tracks.n_tracks
    out = np.empty((n, p, 3 + 4 * frequencies), dtype=np.float64)
    x, y = tracks.xy[:, :, 0], tracks.xy[:, :, 1]
    out[:, :, 0] = x
    out[:, :, 1] = y
    out[:, :, 2] = tracks.o
    for level in range(frequencies):
        w = (2.0 ** level) * np.pi
        base = 3 + 4 * level
        out[:, :, base + 0] = np.sin(w * x)
        out[:, :, base + 1] = np.cos(w * x)
        out[:, :, base + 2] = np.sin(w * y)
        out[:, :, base + 3] = np.cos(w * y)
    return out.astype(dtype)


def temporal_positional_encoding(n: int, d: int, dtype=np.float32) -> np.ndarray:
    """Standard interleaved sin/cos frame-index encoding, shape (n, d)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    idx = np.arange(d, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * (idx // 2) / d)
    pe = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return pe.astype(dtype)


# -- building blocks ---------------------------------------------------------

def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    mu = ad.tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ad.tmean(centered * centered, axis=-1, keepdims=True)
    return centered / ad.sqrt(var + eps) * scale + shift


def _attention_core(x: Tensor, params: dict, prefix: str, cfg: NetworkConfig,
                    attn_sink: list | None = None) -> Tensor:
    """Pre-norm multi-head self-attention over axis 1 of (B, S, d)."""
    b, s, d = x.shape
    h, hd = cfg.heads, cfg.head_dim
    hidden = layer_norm(x, params[f"{prefix}.ln.scale"], params[f"{prefix}.ln.shift"])

    def heads_of(name):
        proj = ad.matmul(hidden, params[f"{prefix}.w{name}"]) + params[f"{prefix}.b{name}"]
        return ad.transpose(ad.reshape(proj, (b, s, h, hd)), (0, 2, 1, 3))

    q, k, v = heads_of("q"), heads_of("k"), heads_of("v")
    logits = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
    attn = ad.softmax(logits, axis=-1)
    if attn_sink is not None:
        attn_sink.append((prefix, np.array(attn.data)))
    ctx = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
    ctx = ad.reshape(ctx, (b, s, h * hd))
    out = ad.matmul(ctx, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]
    x = x + out

    hidden = layer_norm(x, params[f"{prefix}.ffn.ln.scale"], params[f"{prefix}.ffn.ln.shift"])
    mid = ad.relu(ad.matmul(hidden, params[f"{prefix}.ffn.w1"]) + params[f"{prefix}.ffn.b1"])
    return x + ad.matmul(mid, params[f"{prefix}.ffn.w2"]) + params[f"{prefix}.ffn.b2"]


def time_attention(x: Tensor, params: dict, pair: int, cfg: NetworkConfig,
                   positional: bool = False, attn_sink: list | None = None) -> Tensor:
    """Self-attention along frames, independently per track."""
    n, p, d = x.shape
    if positional:
        pe = temporal_positional_encoding(n, d, dtype=x.dtype)
        x = x + Tensor(pe.reshape(n, 1, d))
    xt = ad.transpose(x, (1, 0, 2))
    xt = _attention_core(xt, params, f"pair{pair}.time", cfg, attn_sink)
    return ad.transpose(xt, (1, 0, 2))


def point_attention(x: Tensor, params: dict, pair: int, cfg: NetworkConfig,
                    attn_sink: list | None = None) -> Tensor:
    """Self-attention along tracks, independently per frame (no positions)."""
    return _attention_core(x, params, f"pair{pair}.point", cfg, attn_sink)


def _replicate_pad_time(x: Tensor, pad: int) -> Tensor:
    first = ad.broadcast_to(x[0:1], (pad,) + x.shape[1:])
    last = ad.broadcast_to(x[x.shape[0] - 1:x.shape[0]], (pad,) + x.shape[1:])
    return ad.concat([first, x, last], axis=0)


def temporal_conv(x: Tensor, w: Tensor, b: Tensor, kernel: int) -> Tensor:
    """Same-length 1-d convolution over axis 0 with replicate padding.

    Works on (N, d) or (N, P, d); taps are concatenated on the channel
    axis and contracted with a (kernel*d, out) weight.
    """
    n = x.shape[0]
    pad = (kernel - 1) // 2
    rows = _replicate_pad_time(x, pad)
    taps = [rows[i:i + n] for i in range(kernel)]
    return ad.matmul(ad.concat(taps, axis=-1), w) + b


def dss_layer(x: Tensor, params: dict, index: int, cfg: NetworkConfig) -> Tensor:
    """Linear set-symmetric layer: per-column temporal convolution plus a
    track-summed temporal convolution broadcast to every column."""
    n, p, d = x.shape
    per_column = temporal_conv(x, params[f"dss{index}.l1.w"],
                               params[f"dss{index}.l1.b"], cfg.dss_kernel)
    pooled = ad.tsum(x, axis=1)
    shared = temporal_conv(pooled, params[f"dss{index}.l2.w"],
                           params[f"dss{index}.l2.b"], cfg.dss_kernel)
    return per_column + ad.reshape(shared, (n, 1, shared.shape[-1]))


def output_heads(feat: Tensor, params: dict, cfg: NetworkConfig) -> NetworkOutputs:
    """Aggregate features and decode bases, motion levels, and poses."""
    n, p, d = feat.shape
    per_point = ad.tmean(feat, axis=0)   # (P, d)
    per_frame = ad.tmean(feat, axis=1)   # (N, d)

    point_out = ad.matmul(per_point, params["point_head.w"]) + params["point_head.b"]
    k = cfg.k_bases
    bases = ad.transpose(ad.reshape(point_out[:, :3 * k], (p, k, 3)), (1, 0, 2))
    if cfg.use_gamma:
        gamma = ad.softplus(point_out[:, 3 * k]) + cfg.gamma_floor
    else:
        gamma = Tensor(np.ones(p, dtype=feat.data.dtype))

    frame_out = temporal_conv(per_frame, params["frame_head.w"],
                              params["frame_head.b"], cfg.temporal_kernel)
    rotations = rotation_from_6d(frame_out[:, 0:6])
    centers = frame_out[:, 6:9]
    coeffs = frame_out[:, 9:]
    return NetworkOutputs(bases, coeffs, gamma, rotations, centers)


def assemble_clouds(bases: Tensor, coeffs: Tensor) -> Tensor:
    """X_i = B_1 + sum_{k>=2} c_ik B_k for tensor operands."""
    k, p, _ = bases.shape
    n = coeffs.shape[0]
    if coeffs.shape[1] != k - 1:
        raise DataError(f"coeffs width {coeffs.shape[1]} != K-1 = {k - 1}")
    first = bases[0:1]
    if k == 1:
        return ad.broadcast_to(first, (n, p, 3))
    weighted = ad.reshape(coeffs, (n, k - 1, 1, 1)) * ad.reshape(bases[1:], (1, k - 1, p, 3))
    return ad.tsum(weighted, axis=1) + first


def forward(tracks: PointTrackTensor, params: dict, cfg: NetworkConfig,
            attn_sink: list | None = None):
    """Full pass: embed, alternate attention, decode, assemble clouds."""
    if tracks.n_frames < 2:
        raise DataError("forward needs at least 2 frames")
    dtype = next(iter(params.values())).data.dtype
    embedded = sinusoidal_embed(tracks, cfg.embed_frequencies, dtype=dtype)
    x = ad.matmul(Tensor(embedded), params["embed.w"]) + params["embed.b"]

    if cfg.layer_kind == "attention":
        for i in range(cfg.layer_pairs):
            x = time_attention(x, params, i, cfg, positional=(i == 0),
                               attn_sink=attn_sink)
            x = point_attention(x, params, i, cfg, attn_sink=attn_sink)
    else:
        total = 2 * cfg.layer_pairs
        for i in range(total):
            x = dss_layer(x, params, i, cfg)
            if i < total - 1:
                x = ad.relu(x)

    x = layer_norm(x, params["final_ln.scale"], params["final_ln.shift"])
    outputs = output_heads(x, params, cfg)
    clouds = assemble_clouds(outputs.bases, outputs.coeffs)
    return outputs, clouds
