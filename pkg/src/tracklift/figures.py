"""Matplotlib report figures rendered next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_loss_curves(log: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [rec["step"] for rec in log]
    for key in ("total", "reproject", "static", "negative", "sparse"):
        values = np.array([rec[key] for rec in log], dtype=np.float64)
        ax.plot(steps, values, label=key, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-4)
    ax.legend(fontsize=8)
    ax.set_title("training losses")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_trajectory_plot(est_centers: np.ndarray, path,
                         gt_centers: np.ndarray | None = None,
                         title: str = "camera trajectory (top view)") -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    est_centers = np.asarray(est_centers)
    ax.plot(est_centers[:, 0], est_centers[:, 2], "o-", markersize=3,
            label="estimated")
    if gt_centers is not None:
        gt_centers = np.asarray(gt_centers)
        ax.plot(gt_centers[:, 0], gt_centers[:, 2], "x--", markersize=4,
                label="ground truth")
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_gamma_histogram(gamma: np.ndarray, path,
                         threshold: float | None = None) -> None:
    gamma = np.asarray(gamma, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    finite = gamma[np.isfinite(gamma)]
    bins = np.logspace(np.log10(max(finite.min(), 1e-6)),
                       np.log10(max(finite.max(), 1e-5)), 40)
    ax.hist(finite, bins=bins, color="tab:purple", alpha=0.8)
    ax.set_xscale("log")
    if threshold is not None:
        ax.axvline(threshold, color="tab:red", linestyle="--",
                   label=f"static gate {threshold:g}")
        ax.legend(fontsize=8)
    ax.set_xlabel("motion level")
    ax.set_ylabel("tracks")
    ax.set_title("per-track motion levels")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_cost_trace(trace, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(trace)), trace, "o-", markersize=3)
    ax.set_yscale("log")
    ax.set_xlabel("accepted iteration")
    ax.set_ylabel("cost")
    ax.set_title("bundle adjustment cost")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
