"""Command-line entry point.

Subcommands: synth (generate a synthetic scene), train / finetune,
infer (optionally with bundle adjustment), eval (metrics or generator
self-check), gradcheck. Every command writes a manifest.json recording
arguments, configuration echo, inputs/outputs, and timing. Report
paths render matplotlib figures next to their delimited outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, ba, figures
from .config import ManifestTimer, load_config_arg, route_config
from .errors import DataError, NumericalError, UsageError
from .evaluation import MetricReport, align_similarity, evaluate_sequence
from .exports import (read_gamma_csv, read_ply, read_trajectory_json,
                      write_coefficients_json, write_cost_trace_csv,
                      write_gamma_csv, write_ply, write_trajectory_json)
from .geometry import camera_point, reprojection_error
from .inference import infer
from .losses import LossWeights
from .network import NetworkConfig
from .synthetic import (SceneConfig, assemble_clouds_np,
                        generate_synthetic_scene, read_scene_json,
                        write_scene_json)
from .tracks import Intrinsics, load_tracks, save_tracks
from .training import (Trainer, TrainingConfig, finetune, load_checkpoint,
                       load_log, resume_trainer, save_checkpoint, save_log,
                       save_trainer)

SELF_CHECK_TOLERANCE = 1e-6


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _net_config(args, net_overrides: dict) -> NetworkConfig:
    if getattr(args, "preset", "paper") == "tiny":
        return NetworkConfig.tiny(**net_overrides)
    return NetworkConfig(**net_overrides)


def _load_corpus(corpus_dir: Path):
    paths = sorted(Path(corpus_dir).glob("*.t4d"))
    if not paths:
        raise DataError(f"no .t4d files in {corpus_dir}")
    return [load_tracks(p) for p in paths], paths


# -- synth -------------------------------------------------------------


def cmd_synth(args) -> int:
    manifest = ManifestTimer("synth", vars(args))
    buckets = route_config(load_config_arg(args.config), ("scene",))
    cfg = SceneConfig(**buckets["scene"])
    manifest.config_echo = asdict(cfg)
    scene, tracks = generate_synthetic_scene(cfg, seed=args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tracks(out / "tracks.t4d", tracks)
    write_scene_json(out / "gt_scene.json", scene)
    manifest.outputs += [str(out / "tracks.t4d"), str(out / "gt_scene.json")]
    manifest.write(out)
    print(f"wrote {out / 'tracks.t4d'} "
          f"({tracks.n_frames} frames, {tracks.n_tracks} tracks)")
    return 0


# -- train / finetune ----------------------------------------------------


def cmd_train(args) -> int:
    manifest = ManifestTimer("train", vars(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus, paths = _load_corpus(args.corpus)
    manifest.inputs += [str(p) for p in paths]

    if args.resume:
        if args.config:
            raise UsageError("--config cannot be combined with --resume")
        trainer = resume_trainer(args.resume, corpus)
        manifest.inputs.append(str(args.resume))
        log_path = out / "training_log.jsonl"
        if log_path.exists():
            trainer.log = load_log(log_path) + trainer.log
    else:
        buckets = route_config(load_config_arg(args.config),
                               ("network", "training", "weights"))
        if args.seed is not None:
            buckets["training"]["seed"] = args.seed
        net_cfg = _net_config(args, buckets["network"])
        train_cfg = TrainingConfig(**buckets["training"])
        weights = LossWeights(**buckets["weights"])
        trainer = Trainer(corpus, net_cfg, train_cfg, weights)

    manifest.config_echo = {"network": trainer.net_cfg.to_dict(),
                            "training": trainer.train_cfg.to_dict(),
                            "weights": asdict(trainer.weights)}
    trainer.run()

    save_trainer(out / "checkpoint.tlck", trainer)
    save_log(out / "training_log.jsonl", trainer.log)
    figures.save_loss_curves(trainer.log, out / "loss_curve.png")
    manifest.outputs += [str(out / "checkpoint.tlck"),
                         str(out / "training_log.jsonl"),
                         str(out / "loss_curve.png")]
    manifest.write(out)
    if trainer.log:
        print(f"trained {trainer.step} steps; final total loss "
              f"{trainer.log[-1]['total']:.4g}")
    return 0


def cmd_finetune(args) -> int:
    manifest = ManifestTimer("finetune", vars(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(args.checkpoint)
    tracks = load_tracks(args.tracks)
    manifest.inputs += [str(args.checkpoint), str(args.tracks)]
    manifest.config_echo = {"network": ck.net_cfg.to_dict(),
                            "training": ck.train_cfg.to_dict(),
                            "iters": args.iters}

    if args.iters == 0:
        save_checkpoint(out / "checkpoint.tlck", ck.params, ck.net_cfg,
                        ck.train_cfg, ck.opt_m, ck.opt_v, ck.state)
    else:
        params, trace = finetune(ck.params, tracks, ck.net_cfg, ck.train_cfg,
                                 args.iters)
        state = dict(ck.state)
        state["step"] = state.get("step", 0) + args.iters
        save_checkpoint(out / "checkpoint.tlck", params, ck.net_cfg,
                        ck.train_cfg, state=state)
        write_cost_trace_csv(out / "finetune_trace.csv", trace)
        figures.save_cost_trace(trace, out / "finetune_trace.png")
        manifest.outputs += [str(out / "finetune_trace.csv"),
                             str(out / "finetune_trace.png")]
    manifest.outputs.append(str(out / "checkpoint.tlck"))
    manifest.write(out)
    print(f"finetuned {args.iters} iterations -> {out / 'checkpoint.tlck'}")
    return 0


# -- infer ---------------------------------------------------------------


def _resolve_intrinsics(tracks, intrinsics_path) -> Intrinsics | None:
    if intrinsics_path:
        doc = json.loads(Path(intrinsics_path).read_text())
        return Intrinsics.from_dict(doc)
    return tracks.intrinsics


def cmd_infer(args) -> int:
    manifest = ManifestTimer("infer", vars(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(args.checkpoint)
    tracks = load_tracks(args.tracks)
    manifest.inputs += [str(args.checkpoint), str(args.tracks)]
    manifest.config_echo = {"network": ck.net_cfg.to_dict(),
                            "gamma_thresh": args.gamma_thresh,
                            "pixel_gate": args.pixel_gate}

    result = infer(tracks, ck.params, ck.net_cfg)
    outputs = result.outputs

    write_trajectory_json(out / "trajectory.json", outputs.trajectory)
    write_gamma_csv(out / "gamma.csv", result.kept_tracks, outputs.gamma)
    manifest.outputs += [str(out / "trajectory.json"), str(out / "gamma.csv")]

    if args.single_cloud:
        write_ply(out / "bases.ply", outputs.bases[0], quality=outputs.gamma)
        write_coefficients_json(out / "coefficients.json", outputs.bases,
                                outputs.coeffs)
        manifest.outputs += [str(out / "bases.ply"), str(out / "coefficients.json")]
    else:
        cloud_dir = out / "clouds"
        cloud_dir.mkdir(exist_ok=True)
        for i in range(result.clouds.shape[0]):
            write_ply(cloud_dir / f"frame_{i:04d}.ply", result.clouds[i],
                      quality=outputs.gamma)
        manifest.outputs.append(str(cloud_dir))

    figures.save_gamma_histogram(outputs.gamma, out / "gamma_hist.png",
                                 threshold=args.gamma_thresh if args.ba else None)
    figures.save_trajectory_plot(outputs.trajectory.centers,
                                 out / "trajectory.png")
    manifest.outputs += [str(out / "gamma_hist.png"), str(out / "trajectory.png")]

    if args.ba:
        intr = _resolve_intrinsics(tracks, args.intrinsics)
        if intr is None:
            raise UsageError("--ba needs intrinsics (embedded in the tensor "
                             "or via --intrinsics)")
        subset = ba.select_static(outputs, args.gamma_thresh)
        problem = ba.build_ba_problem(subset, outputs, result.tracks,
                                      args.pixel_gate, intr)
        refined = ba.bundle_adjust(problem)
        write_trajectory_json(out / "ba_trajectory.json", refined.trajectory)
        write_ply(out / "ba_points.ply", refined.points)
        write_cost_trace_csv(out / "ba_cost_trace.csv", refined.cost_trace)
        figures.save_cost_trace(refined.cost_trace, out / "ba_cost_trace.png")
        manifest.outputs += [str(out / "ba_trajectory.json"),
                             str(out / "ba_points.ply"),
                             str(out / "ba_cost_trace.csv"),
                             str(out / "ba_cost_trace.png")]
        print(f"bundle adjustment: {problem.n_residuals} residuals, "
              f"cost {refined.cost_trace[0]:.3e} -> {refined.cost_trace[-1]:.3e}")

    manifest.write(out)
    print(f"inference outputs in {out} "
          f"({result.clouds.shape[0]} poses, {result.kept_tracks.size} tracks)")
    return 0


# -- eval ------------------------------------------------------------------


def _self_check(gt_dir: Path) -> int:
    tracks = load_tracks(gt_dir / "tracks.t4d")
    scene = read_scene_json(gt_dir / "gt_scene.json")
    clouds = scene.clouds()
    worst = 0.0
    for i in range(tracks.n_frames):
        pose = scene.poses[i]
        observed = np.flatnonzero(tracks.o[i])
        for j in observed:
            worst = max(worst, float(reprojection_error(
                clouds[i, j], pose, tracks.xy[i, j])))
    print(f"generator self-check: max reprojection error {worst:.3e}")
    if worst >= SELF_CHECK_TOLERANCE:
        raise NumericalError(
            f"self-check failed: {worst:.3e} >= {SELF_CHECK_TOLERANCE}")
    return 0


def _load_pred_clouds(pred: Path, n_frames: int) -> np.ndarray:
    cloud_dir = pred / "clouds"
    if cloud_dir.is_dir():
        frames = []
        for i in range(n_frames):
            points, _ = read_ply(cloud_dir / f"frame_{i:04d}.ply")
            frames.append(points)
        return np.stack(frames)
    coeff_path = pred / "coefficients.json"
    if coeff_path.exists():
        doc = json.loads(coeff_path.read_text())
        return assemble_clouds_np(np.asarray(doc["bases"]),
                                  np.asarray(doc["coefficients"]))
    raise DataError(f"{pred}: no clouds/ directory or coefficients.json")


def cmd_eval(args) -> int:
    manifest = ManifestTimer("eval", vars(args))
    gt_dir = Path(args.gt)
    if args.self_check:
        code = _self_check(gt_dir)
        return code

    if not args.pred:
        raise UsageError("eval needs --pred (or --self-check)")
    pred = Path(args.pred)
    out_path = Path(args.out) if args.out else pred / "report.json"

    tracks = load_tracks(gt_dir / "tracks.t4d")
    scene = read_scene_json(gt_dir / "gt_scene.json")
    traj_file = pred / ("ba_trajectory.json" if args.use_ba else "trajectory.json")
    est_traj = read_trajectory_json(traj_file)
    kept, _gamma = read_gamma_csv(pred / "gamma.csv")
    manifest.inputs += [str(gt_dir / "tracks.t4d"), str(gt_dir / "gt_scene.json"),
                        str(traj_file), str(pred / "gamma.csv")]

    if len(est_traj) != tracks.n_frames:
        raise DataError(f"trajectory has {len(est_traj)} poses for "
                        f"{tracks.n_frames} frames")

    clouds = _load_pred_clouds(pred, tracks.n_frames)
    cam = camera_point(clouds, (est_traj.rotations[:, None],
                                est_traj.centers[:, None]))
    est_depths = cam[..., 2]
    gt_depths = scene.depths()[:, kept]
    valid = tracks.observed[:, kept]
    dynamic = scene.dynamic_mask[kept]

    report = evaluate_sequence(est_traj, scene.poses, est_depths, gt_depths,
                               valid, dynamic)
    report.save(out_path)

    sim = align_similarity(est_traj.centers, scene.poses.centers)
    overlay = out_path.parent / "trajectory_overlay.png"
    figures.save_trajectory_plot(sim.apply(est_traj.centers), overlay,
                                 gt_centers=scene.poses.centers,
                                 title="aligned trajectory vs ground truth")
    manifest.outputs += [str(out_path), str(overlay)]
    manifest.write(out_path.parent)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


# -- gradcheck ---------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from . import gradcheck
    report, ok = gradcheck.run_all(instances=args.instances, seed=args.seed)
    width = max(len(k) for k in report)
    for name, err in sorted(report.items()):
        flag = "ok" if err < gradcheck.TOLERANCE else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {flag}")
    if not ok:
        raise NumericalError("gradient check failed (relative error >= 1e-4)")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="tracklift",
                     description="Cameras and low-rank dynamic point clouds "
                                 "from 2D point tracks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene + tracks")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="config file or inline key=value;key2=v2 "
                                    "(scene keys: n_frames, n_tracks, k_bases, "
                                    "dynamic_fraction, noise_std, occlusion_rate, "
                                    "trajectory_kind)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="pretrain + train on a corpus of .t4d files")
    p.add_argument("--corpus", required=True, help="directory of .t4d files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", help="network/training/loss keys, e.g. "
                                    "k_bases=12;epochs=100;lr=1e-4;lambda_sparse=0.001")
    p.add_argument("--preset", choices=("paper", "tiny"), default="paper",
                   help="base network size (paper: 256-d, 3 pairs, K=12)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="per-video refinement of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tracks", required=True)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("infer", help="feed-forward reconstruction (+ optional BA)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tracks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ba", action="store_true", help="refine static points and "
                                                     "poses with bundle adjustment")
    p.add_argument("--gamma-thresh", type=float, default=0.008,
                   help="static gate on motion levels (0.008 in-domain, "
                        "0.005 out-of-domain)")
    p.add_argument("--pixel-gate", type=float, default=10.0,
                   help="initial reprojection gate in pixels")
    p.add_argument("--intrinsics", help="JSON file {fx, fy, cx, cy}; overrides "
                                        "intrinsics embedded in the tensor")
    p.add_argument("--single-cloud", action="store_true",
                   help="write bases.ply + coefficients.json instead of "
                        "per-frame clouds")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="trajectory/structure metrics or --self-check")
    p.add_argument("--gt", required=True, help="directory from `tracklift synth`")
    p.add_argument("--pred", help="directory from `tracklift infer`")
    p.add_argument("--out", help="report path (default: <pred>/report.json)")
    p.add_argument("--use-ba", action="store_true",
                   help="evaluate ba_trajectory.json instead of trajectory.json")
    p.add_argument("--self-check", action="store_true",
                   help="verify generator consistency of the --gt directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
