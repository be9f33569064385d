"""Self-supervised training: pretraining, curriculum loop, finetuning.

One window is sampled per optimization step (a random corpus element,
a random frame window, up to ``p_per_sample`` tracks). Until the
curriculum switch epoch windows stay short; afterwards the length range
widens. Optimization is Adam at a fixed learning rate. The whole
trajectory is deterministic given (seed, corpus, config) and can be
checkpointed bit-exactly, including optimizer moments and the RNG
state, so interrupted runs resume identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DataError, NumericalError
from .losses import LossWeights, pretrain_loss, total_loss
from .network import NetworkConfig, forward, init_params
from .tracks import MIN_OBSERVATIONS, PointTrackTensor, sample_training_window

LOG_KEYS = ("step", "epoch", "total", "reproject", "static", "negative", "sparse")


@dataclass
class TrainingConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 100
    pretrain_tolerance: float = 1e-4
    pretrain_max_steps: int = 5000
    curriculum_switch_epoch: int = 50
    n_range_early: tuple = (20, 22)
    n_range_late: tuple = (20, 50)
    p_per_sample: int = 100
    seed: int = 0
    finetune_iters: int = 500

    def __post_init__(self):
        if self.lr <= 0:
            raise DataError("learning rate must be positive")
        self.n_range_early = tuple(int(v) for v in self.n_range_early)
        self.n_range_late = tuple(int(v) for v in self.n_range_late)
        for lo, hi in (self.n_range_early, self.n_range_late):
            if lo < 2 or hi < lo:
                raise DataError(f"invalid window range [{lo}, {hi}]")

    def n_range_for_epoch(self, epoch: int) -> tuple:
        if epoch < self.curriculum_switch_epoch:
            return self.n_range_early
        return self.n_range_late

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**d)


class Adam:
    """Adaptive-moment optimizer over a named parameter dict."""

    def __init__(self, shapes: dict[str, tuple], cfg: TrainingConfig, dtype=np.float32):
        self.cfg = cfg
        self.m = {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}
        self.v = {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}
        self.t = 0

    def step(self, params: dict[str, Tensor]) -> dict[str, Tensor]:
        """One update; returns fresh leaf tensors, leaving inputs untouched."""
        c = self.cfg
        self.t += 1
        bias1 = 1.0 - c.beta1 ** self.t
        bias2 = 1.0 - c.beta2 ** self.t
        out = {}
        for k, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * (g * g)
            update = (self.m[k] / bias1) / (np.sqrt(self.v[k] / bias2) + c.adam_eps)
            data = p.data - c.lr * update
            if not np.isfinite(data).all():
                raise NumericalError(f"non-finite parameter '{k}' after update {self.t}")
            out[k] = Tensor(data.astype(p.data.dtype), requires_grad=True)
        return out


class Trainer:
    """Stateful training driver; snapshot/restore-able for resume."""

    def __init__(self, corpus: list[PointTrackTensor], net_cfg: NetworkConfig,
                 train_cfg: TrainingConfig, weights: LossWeights | None = None,
                 dtype=np.float32):
        if not corpus:
            raise DataError("empty training corpus")
        self.corpus = corpus
        self.net_cfg = net_cfg
        self.train_cfg = train_cfg
        self.weights = weights or LossWeights()
        self.params = init_params(net_cfg, train_cfg.seed, dtype=dtype)
        self.opt = Adam({k: v.shape for k, v in self.params.items()}, train_cfg,
                        dtype=dtype)
        self.rng = np.random.default_rng(train_cfg.seed)
        self.step = 0
        self.pretrained = False
        self.log: list[dict] = []
        self.window_history: list[int] = []

    # -- phases ---------------------------------------------------------

    def _sample_window(self, n_range):
        # Windows whose eligibility set is empty (possible when every track
        # starts at frame 0 and the window starts late) are redrawn.
        last_error = None
        for _ in range(50):
            idx = int(self.rng.integers(len(self.corpus)))
            try:
                window = sample_training_window(self.corpus[idx], n_range,
                                                self.train_cfg.p_per_sample,
                                                self.rng)
            except DataError as e:
                last_error = e
                continue
            self.window_history.append(window.tracks.n_frames)
            return window
        raise DataError(f"no sampleable window in corpus: {last_error}")

    def pretrain(self) -> int:
        """Drive every pose toward the fixed behind-the-origin target.

        Stops as soon as the loss on the current batch drops below the
        configured tolerance; an already-converged model takes zero steps.
        """
        cfg = self.train_cfg
        last = float("inf")
        for step in range(cfg.pretrain_max_steps + 1):
            window = self._sample_window(cfg.n_range_early)
            outputs, _ = forward(window.tracks, self.params, self.net_cfg)
            loss = pretrain_loss(outputs.rotations, outputs.centers)
            last = loss.item()
            if last < cfg.pretrain_tolerance:
                self.pretrained = True
                return step
            loss.backward()
            self.params = self.opt.step(self.params)
        raise NumericalError(
            f"pretraining did not reach {cfg.pretrain_tolerance} in "
            f"{cfg.pretrain_max_steps} steps (last loss {last:.3e})")

    def run_steps(self, n_steps: int) -> None:
        cfg = self.train_cfg
        for _ in range(n_steps):
            epoch = self.step // len(self.corpus)
            window = self._sample_window(cfg.n_range_for_epoch(epoch))
            outputs, clouds = forward(window.tracks, self.params, self.net_cfg)
            total, breakdown = total_loss(
                outputs, clouds, window.tracks, self.weights,
                use_gamma=self.net_cfg.use_gamma,
                gamma_floor=self.net_cfg.gamma_floor)
            if not np.isfinite(breakdown.total):
                raise NumericalError(
                    f"non-finite loss at step {self.step}: {breakdown.to_dict()}")
            total.backward()
            self.params = self.opt.step(self.params)
            self.log.append({"step": self.step, "epoch": epoch,
                             **breakdown.to_dict()})
            self.step += 1

    def target_steps(self) -> int:
        return self.train_cfg.epochs * len(self.corpus)

    def run(self) -> None:
        """Pretrain (if not yet done) then train to the configured epochs."""
        if not self.pretrained:
            self.pretrain()
        remaining = self.target_steps() - self.step
        if remaining > 0:
            self.run_steps(remaining)

    # -- snapshot ---------------------------------------------------------

    def state(self) -> dict:
        return {
            "step": self.step,
            "pretrained": self.pretrained,
            "adam_t": self.opt.t,
            "rng_state": self.rng.bit_generator.state,
        }

    def restore(self, params, adam_m, adam_v, state: dict) -> None:
        self.params = params
        self.opt.m = adam_m
        self.opt.v = adam_v
        self.opt.t = state["adam_t"]
        self.step = state["step"]
        self.pretrained = state["pretrained"]
        self.rng.bit_generator.state = state["rng_state"]


def finetune(params: dict, tracks: PointTrackTensor, net_cfg: NetworkConfig,
             train_cfg: TrainingConfig, iters: int,
             weights: LossWeights | None = None):
    """Per-video refinement on the full (filtered) track tensor.

    Uses a fresh optimizer; ``iters == 0`` returns the parameters
    untouched. Returns (params, per-step loss trace).
    """
    if iters == 0:
        return params, []
    weights = weights or LossWeights()
    counts = tracks.observation_counts()
    keep = np.flatnonzero(counts > MIN_OBSERVATIONS)
    if keep.size < 2:
        raise DataError("fewer than 2 tracks survive the observation filter")
    subset = tracks.subset(tracks=keep)
    opt = Adam({k: v.shape for k, v in params.items()}, train_cfg,
               dtype=next(iter(params.values())).data.dtype)
    trace = []
    for _ in range(iters):
        outputs, clouds = forward(subset, params, net_cfg)
        total, breakdown = total_loss(outputs, clouds, subset, weights,
                                      use_gamma=net_cfg.use_gamma,
                                      gamma_floor=net_cfg.gamma_floor)
        if not np.isfinite(breakdown.total):
            raise NumericalError(f"non-finite finetune loss: {breakdown.to_dict()}")
        total.backward()
        params = opt.step(params)
        trace.append(breakdown.total)
    return params, trace


# -- training log -----------------------------------------------------------

def save_log(path, log: list[dict]) -> None:
    lines = [json.dumps({k: rec[k] for k in LOG_KEYS}, sort_keys=True)
             for rec in log]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_log(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out


# -- checkpoint container ----------------------------------------------------

CHECKPOINT_MAGIC = b"TLCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    code = _DTYPE_CODES[arr.dtype]
    name_b = name.encode()
    head = struct.pack("<H", len(name_b)) + name_b
    head += struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(_CODE_DTYPES[code]).tobytes(order="C")


def _unpack_tensor(raw: bytes, offset: int):
    (name_len,) = struct.unpack_from("<H", raw, offset)
    offset += 2
    name = raw[offset:offset + name_len].decode()
    offset += name_len
    code, ndim = struct.unpack_from("<BB", raw, offset)
    offset += 2
    shape = struct.unpack_from(f"<{ndim}I", raw, offset)
    offset += 4 * ndim
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    offset += count * dtype.itemsize
    return name, arr.reshape(shape).copy(), offset


def save_checkpoint(path, params: dict, net_cfg: NetworkConfig,
                    train_cfg: TrainingConfig, opt_m=None, opt_v=None,
                    state: dict | None = None) -> None:
    state = state or {}
    header = {
        "version": CHECKPOINT_VERSION,
        "network": net_cfg.to_dict(),
        "training": train_cfg.to_dict(),
        "step": state.get("step", 0),
        "pretrained": state.get("pretrained", False),
        "adam_t": state.get("adam_t", 0),
        "rng_state": state.get("rng_state"),
    }
    head_b = json.dumps(header, sort_keys=True).encode()
    blob = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(head_b)),
            head_b]
    tensors = {f"param:{k}": v.data for k, v in params.items()}
    for src, prefix in ((opt_m, "adam_m:"), (opt_v, "adam_v:")):
        if src is not None:
            tensors.update({f"{prefix}{k}": v for k, v in src.items()})
    blob.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        blob.append(_pack_tensor(name, tensors[name]))
    Path(path).write_bytes(b"".join(blob))


@dataclass
class Checkpoint:
    params: dict
    net_cfg: NetworkConfig
    train_cfg: TrainingConfig
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)


def load_checkpoint(path, expect_net_cfg: NetworkConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    version, head_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + head_len].decode())
    net_cfg = NetworkConfig.from_dict(header["network"])
    if expect_net_cfg is not None:
        stored, wanted = net_cfg.to_dict(), expect_net_cfg.to_dict()
        for key in wanted:
            if stored.get(key) != wanted[key]:
                raise DataError(
                    f"{path}: checkpoint field '{key}' is {stored.get(key)!r}, "
                    f"expected {wanted[key]!r}")
    train_cfg = TrainingConfig.from_dict(header["training"])
    offset = 12 + head_len
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    params, opt_m, opt_v = {}, {}, {}
    for _ in range(count):
        name, arr, offset = _unpack_tensor(raw, offset)
        kind, key = name.split(":", 1)
        if kind == "param":
            params[key] = Tensor(arr, requires_grad=True)
        elif kind == "adam_m":
            opt_m[key] = arr
        elif kind == "adam_v":
            opt_v[key] = arr
        else:
            raise DataError(f"{path}: unknown tensor kind {kind!r}")
    state = {"step": header["step"], "pretrained": header["pretrained"],
             "adam_t": header["adam_t"], "rng_state": header["rng_state"]}
    return Checkpoint(params, net_cfg, train_cfg, opt_m, opt_v, state)


def save_trainer(path, trainer: Trainer) -> None:
    save_checkpoint(path, trainer.params, trainer.net_cfg, trainer.train_cfg,
                    trainer.opt.m, trainer.opt.v, trainer.state())


def resume_trainer(path, corpus: list[PointTrackTensor],
                   weights: LossWeights | None = None) -> Trainer:
    ck = load_checkpoint(path)
    trainer = Trainer(corpus, ck.net_cfg, ck.train_cfg, weights)
    # rng_state is JSON round-tripped; restore expects the original dict form
    state = dict(ck.state)
    trainer.restore(ck.params, ck.opt_m, ck.opt_v, state)
    return trainer
