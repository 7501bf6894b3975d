"""Command-line entry point: generate / train / simulate / inject / render / eval.

Every command writes a run manifest (resolved configuration, seed, artifact
list) next to its outputs; re-running a command with the manifest's snapshot
reproduces the outputs bitwise.  Exit codes: 0 success, 1 numerical or
runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import fields, integrate, render, scene as scene_mod, train
from .anchors import AnchorSet
from .integrate import IntegratorConfig, IntegrationError
from .scene import (
    CameraSpec,
    GaussianCloud,
    SceneData,
    SceneError,
    export_trajectory_csv,
    import_trajectory_csv,
    load_scene,
    save_scene,
)

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2

GROUND_TRUTH_OVERSAMPLE = 10  # ground truth runs at 10x the default step count


class UsageError(Exception):
    pass


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int, artifacts: list):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "out": str(out_dir),
        "artifacts": sorted(artifacts),
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return path


def _config_snapshot(args) -> dict:
    skip = {"func", "command"}
    out = {}
    for k, v in vars(args).items():
        if k in skip:
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _load_field_spec(path, checkpoint_field=None):
    with open(path) as f:
        spec = json.load(f)

    def loader(ckpt_path):
        if ckpt_path == "@checkpoint" and checkpoint_field is not None:
            return checkpoint_field
        field, _, _ = train.load_checkpoint(ckpt_path)
        return field

    return fields.build_field(spec, neural_loader=loader)


# ---------------------------------------------------------------------------
# generate


def _default_camera(width=96, height=96):
    return CameraSpec(
        eye=np.array([0.5, -2.5, 0.5]),
        look_at=np.array([0.5, 0.5, 0.5]),
        up=np.array([0.0, 0.0, 1.0]),
        vertical_fov=0.9,
        width=width,
        height=height,
    )


def generate_scene(kind: str, n_gaussians: int, n_frames: int, seed: int, params: dict = None) -> SceneData:
    """Synthetic scene: cloud sampled in the unit box, ground-truth
    trajectories from a high-resolution RK4 rollout of the analytic field."""
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.15, 0.85, size=(n_gaussians, 3))
    rotations = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n_gaussians, 1))
    log_scales = np.full((n_gaussians, 3), np.log(0.04))
    colors = rng.uniform(0.2, 1.0, size=(n_gaussians, 3))
    opacities = np.full(n_gaussians, 0.8)
    cloud = GaussianCloud(
        positions=positions, rotations=rotations, log_scales=log_scales,
        colors=colors, opacities=opacities, time=0.0,
    )
    field = fields.ZeroField() if kind == "zero" else fields.AnalyticField(kind, seed=seed, **(params or {}))

    times = np.linspace(0.0, 1.0, n_frames)
    steps_per_unit = IntegratorConfig().step_count * GROUND_TRUTH_OVERSAMPLE
    traj = np.empty((n_frames, n_gaussians, 3))
    traj[0] = positions
    p, q, ls = positions.copy(), rotations.copy(), log_scales.copy()
    v = np.zeros((n_gaussians, 3))
    for fi in range(1, n_frames):
        span = times[fi] - times[fi - 1]
        n_steps = max(1, round(span * steps_per_unit))
        h = span / n_steps
        for s in range(n_steps):
            p, q, ls, v = integrate.rk4_step_arrays(field, p, q, ls, v, times[fi - 1] + s * h, h, step_index=s)
        traj[fi] = p
    return SceneData(
        cloud=cloud,
        cameras=[_default_camera()],
        trajectory_times=times,
        trajectory_positions=traj,
        knn_k=8,
    )


def cmd_generate(args):
    params = json.loads(args.params) if args.params else {}
    if args.n_gaussians < 1 or args.n_frames < 2:
        raise UsageError("need at least 1 gaussian and 2 frames")
    data = generate_scene(args.kind, args.n_gaussians, args.n_frames, args.seed, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(data, out / "scene.json")
    export_trajectory_csv(data.trajectory_times, data.trajectory_positions, out / "trajectory.csv")
    return ["scene.json", "trajectory.csv"]


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    data = load_scene(args.scene)
    config = train.TrainingConfig(
        epochs=args.epochs,
        frame_stride=args.stride,
        train_fraction=args.train_fraction,
        learning_rate=args.learning_rate,
        seed=args.seed,
        coherence_variant=args.coherence_variant,
    )
    result = train.fit(data, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train.save_checkpoint(
        out / "checkpoint.gsd",
        result.field,
        result.anchors,
        extra_meta={"supervised_times": result.supervised_times.tolist()},
    )
    with open(out / "loss_history.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "total", "data", "coherence", "anchor", "tv"])
        for r in result.history:
            w.writerow([r.epoch, repr(r.total), repr(r.data), repr(r.coherence), repr(r.anchor), repr(r.tv)])
    return ["checkpoint.gsd", "loss_history.csv"], {"supervised_frames": len(result.supervised_times)}


# ---------------------------------------------------------------------------
# simulate


def _resolve_sim_inputs(args):
    """Returns (field, cloud, anchor_set)."""
    anchor_set = None
    checkpoint_field = None
    cloud = None
    if args.checkpoint:
        checkpoint_field, anchor_set, _ = train.load_checkpoint(args.checkpoint)
    if args.scene:
        cloud = load_scene(args.scene).cloud
    if args.field:
        field = _load_field_spec(args.field, checkpoint_field)
    elif checkpoint_field is not None:
        field = checkpoint_field
    else:
        raise UsageError("need --checkpoint or --field")
    if cloud is None:
        if anchor_set is None or len(anchor_set) == 0:
            raise UsageError("need --scene for the initial cloud (checkpoint has no anchors)")
        cloud = anchor_set[0].cloud
    return field, cloud, anchor_set


def cmd_simulate(args):
    if args.t0 == args.t1:
        raise UsageError("t0 and t1 must differ")
    field, cloud, anchor_set = _resolve_sim_inputs(args)
    config = IntegratorConfig(method=args.method, step_count=args.steps, record_stride=args.record_stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.anchored:
        if anchor_set is None or len(anchor_set) == 0:
            raise UsageError("--anchored requires a checkpoint with anchors")
        n_rec = args.steps // args.record_stride
        times = [args.t0 + (args.t1 - args.t0) * i / max(1, n_rec) for i in range(n_rec + 1)]
        positions = np.stack(
            [integrate.anchor_aware_rollout(anchor_set, t, config, field).positions for t in times]
        )
        times = np.array(times)
    else:
        traj = integrate.rollout(cloud, args.t0, args.t1, config, field)
        times, positions = traj.times, traj.positions
    export_trajectory_csv(times, positions, out / "trajectory.csv")
    return ["trajectory.csv"]


# ---------------------------------------------------------------------------
# inject


def cmd_inject(args):
    checkpoint_field = None
    anchor_set = None
    if args.checkpoint:
        checkpoint_field, anchor_set, _ = train.load_checkpoint(args.checkpoint)
    base = checkpoint_field if checkpoint_field is not None else fields.ZeroField()
    injected = _load_field_spec(args.field, checkpoint_field)
    if args.mask:
        with open(args.mask) as f:
            mask = fields.build_mask(json.load(f))
        composed = fields.blend_masked(base, injected, mask)
    elif args.checkpoint:
        composed = fields.compose_add(base, injected, args.lam)
    else:
        composed = injected

    if args.scene:
        cloud = load_scene(args.scene).cloud
    elif anchor_set is not None and len(anchor_set) > 0:
        cloud = anchor_set[0].cloud
    else:
        raise UsageError("need --scene or a checkpoint with anchors for the initial cloud")

    config = IntegratorConfig(method=args.method, step_count=args.steps, record_stride=args.record_stride)
    traj = integrate.rollout(cloud, args.t0, args.t1, config, composed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_trajectory_csv(traj.times, traj.positions, out / "trajectory.csv")
    artifacts = ["trajectory.csv"]
    if args.render_frames:
        camera = _default_camera()
        if args.scene:
            cams = load_scene(args.scene).cameras
            if cams:
                camera = cams[0]
        for fi in range(len(traj)):
            img = render.rasterize(traj.cloud_at(fi), camera)
            name = f"frame_{fi:04d}.ppm"
            render.write_ppm(img, out / name)
            artifacts.append(name)
    return artifacts


# ---------------------------------------------------------------------------
# render


def cmd_render(args):
    data = load_scene(args.scene)
    if not data.cameras:
        raise UsageError("scene has no cameras")
    if args.camera_index >= len(data.cameras):
        raise UsageError(f"camera index {args.camera_index} out of range")
    camera = data.cameras[args.camera_index]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    if args.trajectory:
        times, positions = import_trajectory_csv(args.trajectory)
        if positions.shape[1] != len(data.cloud):
            raise UsageError("trajectory gaussian count does not match the scene")
        for fi in range(len(times)):
            img = render.rasterize(data.cloud.with_positions(positions[fi]), camera)
            name = f"frame_{fi:04d}.ppm"
            render.write_ppm(img, out / name)
            artifacts.append(name)
    else:
        img = render.rasterize(data.cloud, camera)
        render.write_ppm(img, out / "frame_0000.ppm")
        artifacts.append("frame_0000.ppm")
    return artifacts


# ---------------------------------------------------------------------------
# eval


SUPPORTED_METRICS = ("position", "psnr", "ssim", "dssim")


def cmd_eval(args):
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in metrics:
        if m not in SUPPORTED_METRICS:
            raise UsageError(
                f"unsupported metric {m!r} (supported: {', '.join(SUPPORTED_METRICS)}; "
                "lpips needs a pretrained network and is not provided)"
            )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    observed_times = None
    if args.train_manifest:
        with open(args.train_manifest) as f:
            tm = json.load(f)
        ckpt = Path(tm["out"]) / "checkpoint.gsd"
        if ckpt.exists():
            _, _, meta = train.load_checkpoint(ckpt)
            observed_times = meta.get("extra", {}).get("supervised_times")

    rows = []
    header = ["frame_index", "time", "observed"]
    if "position" in metrics:
        times, pred = import_trajectory_csv(args.pred)
        gt_scene = load_scene(args.gt)
        if not gt_scene.has_trajectories:
            raise UsageError("ground-truth scene has no trajectories")
        gt_times, gt_pos = gt_scene.trajectory_times, gt_scene.trajectory_positions
        header.append("mean_position_error")
        for fi, t in enumerate(times):
            gi = int(np.argmin(np.abs(gt_times - t)))
            if abs(gt_times[gi] - t) > 1e-9:
                raise UsageError(f"predicted frame time {t} has no matching ground-truth frame")
            err = float(np.mean(np.linalg.norm(pred[fi] - gt_pos[gi], axis=-1)))
            observed = _is_observed(t, observed_times)
            rows.append([fi, t, observed, err])
    image_metrics = [m for m in metrics if m in ("psnr", "ssim", "dssim")]
    if image_metrics:
        pred_frames = sorted(Path(args.pred_frames).glob("*.ppm"))
        gt_frames = sorted(Path(args.gt_frames).glob("*.ppm"))
        if len(pred_frames) != len(gt_frames) or not pred_frames:
            raise UsageError("frame directories are empty or differ in length")
        header.extend(image_metrics)
        fn = {"psnr": render.psnr, "ssim": render.ssim, "dssim": render.dssim}
        for fi, (pf, gf) in enumerate(zip(pred_frames, gt_frames)):
            a = render.read_ppm(pf)
            b = render.read_ppm(gf)
            vals = [fn[m](a, b) for m in image_metrics]
            if rows and "position" in metrics:
                rows[fi].extend(vals)
            else:
                rows.append([fi, float(fi), _is_observed(None, None), *vals])

    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow(r)
        means = ["mean", "", ""] + [
            repr(float(np.mean([r[j] for r in rows]))) for j in range(3, len(header))
        ]
        w.writerow(means)

    col = "  ".join(f"{h:>22}" for h in header)
    print(col)
    for r in rows:
        print("  ".join(f"{str(x):>22}" for x in r))
    return ["metrics.csv"]


def _is_observed(t, observed_times):
    if observed_times is None or t is None:
        return ""
    return "observed" if any(abs(t - ot) < 1e-9 for ot in observed_times) else "held-out"


# ---------------------------------------------------------------------------
# parser / entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsdyn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", default=None, help="optional JSON config file")

    p = sub.add_parser("generate", help="synthetic scene with ground-truth trajectories")
    shared(p)
    p.add_argument("--kind", required=True, help="analytic field kind (or 'zero')")
    p.add_argument("--n-gaussians", type=int, default=10)
    p.add_argument("--n-frames", type=int, default=20)
    p.add_argument("--params", default=None, help="JSON field parameters")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit a neural velocity field to sparse frames")
    shared(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--stride", type=int, default=1, help="supervise every k-th frame")
    p.add_argument("--train-fraction", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=1500)
    p.add_argument("--learning-rate", type=float, default=5e-3)
    p.add_argument("--coherence-variant", choices=["literal", "relative"], default="relative")
    p.set_defaults(func=cmd_train)

    def integrator_flags(p):
        p.add_argument("--method", choices=["euler", "rk4"], default="rk4")
        p.add_argument("--steps", type=int, default=100, help="steps per unit time")
        p.add_argument("--record-stride", type=int, default=1)

    p = sub.add_parser("simulate", help="roll a field forward or backward")
    shared(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--field", default=None, help="JSON field composition spec")
    p.add_argument("--scene", default=None, help="scene providing the initial cloud")
    p.add_argument("--t0", type=float, required=True)
    p.add_argument("--t1", type=float, required=True)
    p.add_argument("--anchored", action="store_true", help="reinitialize from stored anchors")
    integrator_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("inject", help="blend or add an external field and roll out")
    shared(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--field", required=True, help="JSON composition/field spec for the injected dynamics")
    p.add_argument("--mask", default=None, help="JSON mask spec (sphere or box)")
    p.add_argument("--lam", type=float, default=1.0, help="weight for additive composition")
    p.add_argument("--scene", default=None)
    p.add_argument("--t0", type=float, default=0.0)
    p.add_argument("--t1", type=float, default=1.0)
    p.add_argument("--render-frames", action="store_true")
    integrator_flags(p)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("render", help="rasterize a scene (optionally along a trajectory)")
    shared(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--camera-index", type=int, default=0)
    p.add_argument("--trajectory", default=None, help="trajectory CSV to animate the cloud")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="metrics against ground truth")
    shared(p)
    p.add_argument("--pred", default=None, help="predicted trajectory CSV")
    p.add_argument("--gt", default=None, help="ground-truth scene file")
    p.add_argument("--pred-frames", default=None, help="directory of predicted PPM frames")
    p.add_argument("--gt-frames", default=None, help="directory of ground-truth PPM frames")
    p.add_argument("--metrics", default="position")
    p.add_argument("--train-manifest", default=None, help="flag rows observed/held-out via a training manifest")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out_dir = Path(args.out)
    try:
        result = args.func(args)
    except (UsageError, SceneError, fields.FieldError, FileNotFoundError, json.JSONDecodeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrationError, train.TrainingError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    if isinstance(result, tuple):
        artifacts, extra = result
    else:
        artifacts, extra = result, {}
    config = _config_snapshot(args)
    config.update(extra)
    _write_manifest(out_dir, args.command, config, args.seed, artifacts)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
