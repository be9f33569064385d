"""Finite-difference validation suites for the gradient engine.

Each primitive gets a scalar-valued probe function checked elementwise
against central differences on random small tensors (inputs kept away
from the kinks of abs/min). The loss-graph suite differentiates the
full training objective with respect to the leaves that are live in
every term, plus the two component losses in which nothing is detached;
the stop-gradient contracts themselves are exact-zero checks.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses
from . import network as net
from .autodiff import Tensor
from .geometry import rotation_from_6d
from .tracks import PointTrackTensor

TOLERANCE = 1e-4
FD_STEP = 1e-5


def away_from_kinks(rng, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.where(x < 0, x - margin, x + margin), x)


def primitive_cases() -> dict:
    return {
        "add": lambda l: ad.tsum(ad.add(l["a"], l["b"]) * l["a"]),
        "sub": lambda l: ad.tsum(ad.sub(l["a"], l["b"]) * l["b"]),
        "mul": lambda l: ad.tsum(ad.mul(l["a"], l["b"])),
        "div": lambda l: ad.tsum(ad.div(l["a"], 2.0 + ad.absval(l["b"]))),
        "neg": lambda l: ad.tsum(ad.neg(l["a"]) * l["b"]),
        "pow": lambda l: ad.tsum(ad.power(2.0 + ad.absval(l["a"]), 3.0)),
        "exp": lambda l: ad.tsum(ad.exp(l["a"])),
        "log": lambda l: ad.tsum(ad.log(2.0 + ad.absval(l["a"]))),
        "sqrt": lambda l: ad.tsum(ad.sqrt(2.0 + ad.absval(l["a"]))),
        "abs": lambda l: ad.tsum(ad.absval(l["a"]) * l["b"]),
        "minimum": lambda l: ad.tsum(ad.minimum(l["a"], 0.0) * l["b"]),
        "clamp_magnitude": lambda l: ad.tsum(
            ad.div(l["b"], ad.clamp_magnitude(l["a"], 1e-8))),
        "matmul": lambda l: ad.tsum(ad.matmul(l["m1"], l["m2"]) ** 2.0),
        "sum": lambda l: ad.tsum(ad.tsum(l["a"], axis=0) * ad.tsum(l["b"], axis=0)),
        "mean": lambda l: ad.tsum(ad.tmean(l["a"], axis=1, keepdims=True) * l["b"]),
        "softmax": lambda l: ad.tsum(ad.softmax(l["a"], axis=1) * l["b"]),
        "transpose": lambda l: ad.tsum(ad.transpose(l["a"]) * ad.transpose(l["b"])),
        "reshape": lambda l: ad.tsum(ad.reshape(l["a"], (12,)) * ad.reshape(l["b"], (12,))),
        "slice": lambda l: ad.tsum(l["a"][1:3, :2] * l["b"][0:2, 1:3]),
        "concat": lambda l: ad.tsum(ad.concat([l["a"], l["b"]], axis=0) ** 2.0),
        "broadcast": lambda l: ad.tsum(
            ad.broadcast_to(l["a"][0:1, :], (3, 4)) * l["b"]),
        "stop_gradient": lambda l: ad.tsum(
            ad.stop_gradient(Tensor(np.ones((3, 4)))) * l["a"] * l["b"]),
    }


def run_primitive_suite(instances: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative FD error per primitive over random instances."""
    report = {}
    for name, fn in sorted(primitive_cases().items()):
        rng = np.random.default_rng(seed + (hash(name) % 100003))
        worst = 0.0
        for _ in range(instances):
            inputs = {
                "a": away_from_kinks(rng, (3, 4)),
                "b": away_from_kinks(rng, (3, 4)),
                "m1": rng.normal(size=(2, 3)),
                "m2": rng.normal(size=(3, 2)),
            }
            worst = max(worst, ad.check_gradients(fn, inputs, eps=FD_STEP))
        report[name] = worst
    return report


def _random_loss_instance(rng, n=4, p=6, k=3):
    leaves = {
        "b1": rng.normal(size=(1, p, 3)) * 0.5,
        "dev": rng.normal(size=(k - 1, p, 3)) * 0.5,
        "coeffs": rng.normal(size=(n, k - 1)) * 0.3,
        "gamma": rng.uniform(0.05, 0.5, size=p),
        "v6": np.tile([1.0, 0, 0, 0, 1.0, 0], (n, 1)) + rng.normal(size=(n, 6)) * 0.1,
        "centers": np.tile([0.0, 0, -10.0], (n, 1)) + rng.normal(size=(n, 3)) * 0.5,
    }
    xy = rng.normal(size=(n, p, 2)) * 0.2
    tracks = PointTrackTensor(xy, np.ones((n, p), dtype=np.uint8))
    return leaves, tracks


def _outputs_from(l: dict) -> net.NetworkOutputs:
    bases = ad.concat([l["b1"], l["dev"]], axis=0) \
        if isinstance(l["b1"], Tensor) else np.concatenate([l["b1"], l["dev"]])
    rot = rotation_from_6d(l["v6"])
    return net.NetworkOutputs(bases, l["coeffs"], l["gamma"], rot, l["centers"])


def run_loss_graph_suite(instances: int = 100, seed: int = 1) -> dict[str, float]:
    """FD checks covering every gradient path of the training objective.

    total-loss: leaves live in all terms (deviations, coefficients);
    static / negative: all leaves (no detachments in those losses).
    """
    rng = np.random.default_rng(seed)
    weights = losses.LossWeights()
    worst = {"total_loss": 0.0, "static_loss": 0.0, "negative_depth_loss": 0.0}
    for _ in range(instances):
        leaves, tracks = _random_loss_instance(rng)

        def total_fn(l):
            full = {k: (l[k] if k in l else Tensor(leaves[k])) for k in leaves}
            out = _outputs_from(full)
            clouds = net.assemble_clouds(out.bases, out.coeffs)
            value, _ = losses.total_loss(out, clouds, tracks, weights)
            return value

        live = {"dev": leaves["dev"], "coeffs": leaves["coeffs"]}
        worst["total_loss"] = max(worst["total_loss"],
                                  ad.check_gradients(total_fn, live, eps=FD_STEP))

        def static_fn(l):
            return losses.static_loss(_outputs_from(l), tracks)

        worst["static_loss"] = max(worst["static_loss"],
                                   ad.check_gradients(static_fn, leaves, eps=FD_STEP))

        def negative_fn(l):
            out = _outputs_from(l)
            clouds = net.assemble_clouds(out.bases, out.coeffs)
            return losses.negative_depth_loss(clouds, out.rotations, out.centers,
                                              tracks)

        mixed = {k: v.copy() for k, v in leaves.items()}
        mixed["b1"] = mixed["b1"].copy()
        mixed["b1"][0, :2, 2] = -13.0  # put two points behind the cameras
        with ad.finite_checks(False):
            worst["negative_depth_loss"] = max(
                worst["negative_depth_loss"],
                ad.check_gradients(negative_fn, mixed, eps=FD_STEP))
    return worst


def run_all(instances: int = 100, seed: int = 0):
    """Full suite; returns (report, ok)."""
    report = run_primitive_suite(instances, seed)
    report.update(run_loss_graph_suite(instances, seed + 1))
    ok = all(err < TOLERANCE for err in report.values())
    return report, ok
