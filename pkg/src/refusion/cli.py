"""Command-line entry points: synth, reconstruct, evaluate, bench.

Every subcommand accepts ``--config FILE`` naming a flat key=value file
whose keys are the long flag names (dashes or underscores); values set the
defaults and explicit flags still win.
"""

import argparse
import json
import os
import sys

from .dataset_io import ingest_dataset, write_dataset
from .errors import IngestionError, RefusionError
from .evaluation import (
    DEFAULT_CELL_SIZE,
    GridIndex,
    build_reference,
    mad_completeness,
    mad_correctness,
    sample_mesh,
    save_distance_ply,
)
from .geometry import Intrinsics
from .keyframe_fusion import KF_CONST, STRATEGY_KINDS, KeyframeStrategy
from .meshing import marching_cubes, save_obj, weld
from .pipeline import (
    REINTEGRATION_MODES,
    RunConfig,
    bench,
    reconstruct,
)
from .synth import (
    DEFAULT_ANCHOR_INTERVAL,
    DEFAULT_INTRINSICS,
    SIGMA0_DEFAULT,
    Z_MAX_DEFAULT,
    TrajectorySpec,
    demo_scene,
    make_sequence,
    orbit_waypoints,
)
from .volume import VolumeConfig, load_volume


def _parse_intrinsics(text):
    parts = text.split()
    if len(parts) != 6:
        raise argparse.ArgumentTypeError(
            "intrinsics must be 'fx fy cx cy width height'"
        )
    fx, fy, cx, cy = (float(p) for p in parts[:4])
    width, height = (int(p) for p in parts[4:])
    return Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)


def _parse_schedule(text):
    """'15:0.5,28:1.0' -> [(15, 0.5), (28, 1.0)]; empty string -> []."""
    if not text.strip():
        return []
    out = []
    for item in text.split(","):
        frame, _, fraction = item.partition(":")
        try:
            out.append((int(frame), float(fraction)))
        except ValueError:
            raise argparse.ArgumentTypeError(
                f"bad correction {item!r}; expected FRAME:FRACTION"
            ) from None
    return out


def _parse_int_list(text):
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}"
        ) from None


def _parse_str_list(text):
    return [p.strip() for p in text.split(",") if p.strip()]


def _add_volume_flags(sub, stream_radius=3.0):
    sub.add_argument("--voxel-size", type=float, default=0.01,
                     help="voxel edge length in meters")
    sub.add_argument("--mu", type=float, default=0.06,
                     help="truncation band in meters")
    sub.add_argument("--stream-radius", type=float, default=stream_radius,
                     help="active streaming sphere radius in meters")


def _add_run_flags(sub):
    sub.add_argument("--strategy", choices=sorted(STRATEGY_KINDS),
                     default=KF_CONST, help="keyframe boundary strategy")
    sub.add_argument("--kappa", type=int, default=20,
                     help="frames per keyframe for KF_CONST")
    sub.add_argument("--delta-r", type=float, default=0.35,
                     help="KF_DIST rotation threshold (radians)")
    sub.add_argument("--delta-t", type=float, default=0.3,
                     help="KF_DIST translation threshold (meters)")
    sub.add_argument("--overlap-min", type=float, default=0.7,
                     help="KF_OVRLP minimum overlap ratio")
    sub.add_argument("--m", type=int, default=10,
                     help="correction window size")
    sub.add_argument("--mode", choices=REINTEGRATION_MODES,
                     default="consecutive_window",
                     help="pose-correction strategy")


def _strategy_from(args):
    return KeyframeStrategy(
        kind=args.strategy,
        kappa=args.kappa,
        delta_r=args.delta_r,
        delta_t=args.delta_t,
        overlap_min=args.overlap_min,
    )


def _volume_from(args):
    return VolumeConfig(
        voxel_size=args.voxel_size, mu=args.mu, stream_radius=args.stream_radius
    )


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="refusion",
        description="Keyframe-fused RGB-D reconstruction with on-the-fly "
        "surface correction.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    subs = {}

    sub = subparsers.add_parser(
        "synth", help="render a synthetic dataset into a directory"
    )
    sub.add_argument("out", help="output dataset directory")
    sub.add_argument("--waypoints", type=int, default=8,
                     help="orbit waypoint count")
    sub.add_argument("--frames-per-segment", type=int, default=20,
                     help="frames per waypoint segment")
    sub.add_argument("--orbit-radius", type=float, default=1.2,
                     help="camera orbit radius in meters")
    sub.add_argument("--camera-height", type=float, default=1.3,
                     help="camera height in meters")
    sub.add_argument("--seed", type=int, default=0, help="RNG seed")
    sub.add_argument("--noise-sigma0", type=float, default=SIGMA0_DEFAULT,
                     help="depth noise at 1 m (sigma scales with z^2)")
    sub.add_argument("--blur-sigma-max", type=float, default=0.0,
                     help="max color motion-blur sigma in pixels")
    sub.add_argument("--drift-trans", type=float, default=0.0,
                     help="translational drift per frame (meters)")
    sub.add_argument("--drift-rot", type=float, default=0.0,
                     help="rotational drift per frame (radians)")
    sub.add_argument("--corrections", type=_parse_schedule, default=[],
                     help="pose-correction schedule FRAME:FRACTION[,...]")
    sub.add_argument("--anchor-interval", type=int,
                     default=DEFAULT_ANCHOR_INTERVAL,
                     help="declare an anchor every this many frames")
    sub.add_argument("--z-max", type=float, default=Z_MAX_DEFAULT,
                     help="sensor range cutoff in meters")
    sub.add_argument("--intrinsics", type=_parse_intrinsics,
                     default=DEFAULT_INTRINSICS,
                     help="'fx fy cx cy width height'")
    sub.add_argument("--no-color", action="store_true",
                     help="skip color rendering")
    subs["synth"] = sub

    sub = subparsers.add_parser(
        "reconstruct", help="run the reconstruction pipeline over a dataset"
    )
    sub.add_argument("dataset", help="dataset directory")
    sub.add_argument("--output", default="out",
                     help="output directory for mesh/stats/metrics/volume")
    _add_run_flags(sub)
    _add_volume_flags(sub)
    sub.add_argument("--obj", action="store_true",
                     help="also write the mesh as OBJ")
    subs["reconstruct"] = sub

    sub = subparsers.add_parser(
        "evaluate",
        help="score a volume checkpoint against the dataset's ground truth",
    )
    sub.add_argument("volume", help="volume checkpoint written by reconstruct")
    sub.add_argument("--dataset", required=True,
                     help="dataset directory with groundtruth.txt")
    sub.add_argument("--points", type=int, default=1_000_000,
                     help="reference sample count")
    sub.add_argument("--cell-size", type=float, default=DEFAULT_CELL_SIZE,
                     help="nearest-neighbor grid cell size (meters)")
    sub.add_argument("--seed", type=int, default=0, help="sampling seed")
    sub.add_argument("--stream-radius", type=float, default=5.0,
                     help="streaming radius for the reference build")
    sub.add_argument("--distance-ply", default=None,
                     help="write the model mesh colored by distance (mm)")
    sub.add_argument("--json", dest="json_out", default=None,
                     help="also write the metrics JSON to this path")
    subs["evaluate"] = sub

    sub = subparsers.add_parser(
        "bench", help="run a kappa x m x mode matrix and tabulate it"
    )
    sub.add_argument("dataset", help="dataset directory")
    sub.add_argument("--kappas", type=_parse_int_list, default=[1, 20],
                     help="comma-separated kappa values")
    sub.add_argument("--ms", type=_parse_int_list, default=[10],
                     help="comma-separated window sizes")
    sub.add_argument("--modes", type=_parse_str_list,
                     default=["consecutive_window"],
                     help="comma-separated reintegration modes")
    sub.add_argument("--csv", default=None, help="write the table here")
    sub.add_argument("--points", type=int, default=200_000,
                     help="reference sample count")
    sub.add_argument("--seed", type=int, default=0, help="sampling seed")
    _add_volume_flags(sub)
    subs["bench"] = sub

    for sub in subs.values():
        sub.add_argument("--config", default=None,
                         help="flat key=value file of flag defaults")
    return parser, subs


def _read_config(path):
    if not os.path.exists(path):
        raise IngestionError(f"{path}: missing config file")
    overrides = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise IngestionError(
                    f"{path}:{line_no}: expected key=value, got {line!r}"
                )
            overrides[key.strip().replace("-", "_")] = value.strip()
    return overrides


def _apply_config(sub, overrides, path):
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in overrides.items():
        action = actions.get(key)
        if action is None:
            raise IngestionError(f"{path}: unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise IngestionError(f"{path}: bad boolean for {key!r}: {raw!r}")
            defaults[key] = lowered in ("true", "1", "yes")
        elif action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise IngestionError(f"{path}: bad value for {key!r}: {exc}") from None
        else:
            defaults[key] = raw
        if action.choices is not None and defaults[key] not in action.choices:
            raise IngestionError(
                f"{path}: {key!r} must be one of {sorted(action.choices)}"
            )
    sub.set_defaults(**defaults)


def _cmd_synth(args):
    waypoints = orbit_waypoints(
        args.waypoints, radius=args.orbit_radius, height=args.camera_height
    )
    spec = TrajectorySpec(
        waypoints=waypoints,
        frames_per_segment=args.frames_per_segment,
        drift_rate=(args.drift_trans, args.drift_rot),
        correction_schedule=args.corrections,
    )
    seq = make_sequence(
        demo_scene(),
        spec,
        args.intrinsics,
        seed=args.seed,
        noise_sigma0=args.noise_sigma0,
        blur_sigma_max=args.blur_sigma_max,
        anchor_interval=args.anchor_interval,
        z_max=args.z_max,
        render_color_images=not args.no_color,
    )
    write_dataset(seq, args.out)
    print(
        f"wrote {len(seq.frames)} frames, {len(seq.events)} events to {args.out}"
    )
    return 0


def _cmd_reconstruct(args):
    cfg = RunConfig(
        strategy=_strategy_from(args),
        m=args.m,
        volume=_volume_from(args),
        reintegration_mode=args.mode,
        dataset=args.dataset,
        output=args.output,
    )
    mesh, stats = reconstruct(cfg)
    if args.obj:
        save_obj(mesh, os.path.join(args.output, "mesh.obj"))
    print(
        f"reconstructed {stats.n_frames} frames into {stats.keyframe_count} "
        f"keyframes; mesh has {mesh.n_vertices} vertices, "
        f"{mesh.n_triangles} triangles; outputs in {args.output}"
    )
    return 0


def _cmd_evaluate(args):
    store, voxel_size, mu = load_volume(args.volume)
    vol = VolumeConfig(
        voxel_size=voxel_size,
        mu=mu,
        stream_radius=max(args.stream_radius, 2.0 * mu + voxel_size),
    )
    mesh = weld(marching_cubes(store, vol))

    dataset = ingest_dataset(args.dataset)
    if dataset.gt_poses is None:
        raise IngestionError(
            f"{os.path.join(args.dataset, 'groundtruth.txt')}: "
            "evaluation needs a ground-truth trajectory"
        )
    ref_mesh = build_reference(
        dataset.frames, dataset.gt_poses, dataset.intrinsics, vol
    )
    reference = sample_mesh(ref_mesh, args.points, seed=args.seed)
    metrics = {
        "corr_mad_mm": mad_correctness(mesh, reference, args.cell_size),
        "compl_mad_mm": mad_completeness(mesh, reference, args.cell_size),
        "model_vertices": mesh.n_vertices,
        "reference_points": reference.n_points,
    }
    if args.distance_ply:
        index = GridIndex(reference.points, cell_size=args.cell_size)
        d_mm = index.query(mesh.vertices) * 1000.0
        save_distance_ply(mesh, d_mm, args.distance_ply)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    print(text)
    if args.json_out:
        with open(args.json_out, "w") as fh:
            fh.write(text + "\n")
    return 0


def _cmd_bench(args):
    configs = [
        RunConfig(
            strategy=KeyframeStrategy(kind=KF_CONST, kappa=kappa),
            m=m,
            volume=_volume_from(args),
            reintegration_mode=mode,
        )
        for kappa in args.kappas
        for m in args.ms
        for mode in args.modes
    ]
    rows = bench(
        configs,
        dataset=args.dataset,
        csv_path=args.csv,
        reference_points=args.points,
        seed=args.seed,
    )
    for row in rows:
        cells = []
        for key, value in row.items():
            if isinstance(value, float):
                value = f"{value:.2f}"
            cells.append(f"{key}={value}")
        print("  ".join(cells))
    if args.csv:
        print(f"wrote {len(rows)} rows to {args.csv}")
    return 0


_DISPATCH = {
    "synth": _cmd_synth,
    "reconstruct": _cmd_reconstruct,
    "evaluate": _cmd_evaluate,
    "bench": _cmd_bench,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            overrides = _read_config(args.config)
            _apply_config(subs[args.command], overrides, args.config)
            args = parser.parse_args(argv)
        return _DISPATCH[args.command](args)
    except RefusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
