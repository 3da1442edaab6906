"""Time the compute kernels: compiled extension vs pure-numpy fallback.

Runs the two hot kernels on representative inputs — a rendered keyframe
fused into its full block footprint, and a nearest-neighbor sweep — with
each backend, verifies the outputs are bit-for-bit identical, and prints
a small table with the speedup.

    python3 benchmarks/kernel_benchmark.py [--iterations N]
"""

import argparse
import importlib
import time

import numpy as np

from refusion import volume as V
from refusion.geometry import Intrinsics
from refusion.keyframe_fusion import FrameObservation, fuse_depth, new_keyframe
from refusion.synth import TrajectorySpec, demo_scene, make_sequence, orbit_waypoints
from refusion.volume import EPS_W, VolumeConfig, VoxelBlock

INTR = Intrinsics(60.0, 60.0, 31.5, 23.5, 64, 48)
CFG = VolumeConfig(voxel_size=0.02, mu=0.06, stream_radius=5.0)


def load_backends():
    backends = {"python": importlib.import_module("refusion._kernels_py")}
    try:
        backends["compiled"] = importlib.import_module("refusion._kernels_cy")
    except ImportError:
        print("compiled extension not built; timing the fallback only\n")
    return backends


def render_keyframe():
    spec = TrajectorySpec(
        waypoints=orbit_waypoints(4, radius=1.2, height=1.3),
        frames_per_segment=2,
    )
    seq = make_sequence(demo_scene(), spec, INTR, seed=0, z_max=2.5)
    frame = seq.frames[0]
    obs = FrameObservation(
        index=frame.index,
        color=frame.color,
        depth=frame.depth,
        pose=seq.gt_poses[frame.index],
    )
    kf = new_keyframe(obs, INTR, anchor_id=0, anchor_pose=obs.pose)
    fuse_depth(kf, obs)
    return kf, obs.pose


def bench_fuse_block(backends, iterations):
    kf, pose = render_keyframe()
    coords = sorted(V.keyframe_block_footprint(kf, pose, CFG))
    args = V._kernel_args(kf, pose, CFG)
    span = CFG.block_span

    results = {}
    for name, impl in backends.items():
        blocks = {coord: VoxelBlock(coord) for coord in coords}
        best = np.inf
        for _ in range(iterations):
            for blk in blocks.values():
                blk.d[:] = 0.0
                blk.w[:] = 0.0
                blk.c[:] = 0.0
            t0 = time.perf_counter()
            for coord, blk in blocks.items():
                impl.fuse_block(
                    blk.d,
                    blk.w,
                    blk.c,
                    coord[0] * span,
                    coord[1] * span,
                    coord[2] * span,
                    CFG.voxel_size,
                    *args,
                    CFG.mu,
                    EPS_W,
                    0,
                )
            best = min(best, time.perf_counter() - t0)
        results[name] = (best, blocks)

    reference = None
    for name, (_, blocks) in results.items():
        state = [
            (blk.d.copy(), blk.w.copy(), blk.c.copy())
            for _, blk in sorted(blocks.items())
        ]
        if reference is None:
            reference = state
        else:
            for (d0, w0, c0), (d1, w1, c1) in zip(reference, state):
                assert np.array_equal(d0, d1)
                assert np.array_equal(w0, w1)
                assert np.array_equal(c0, c1)

    label = f"fuse_block ({len(coords)} blocks, {INTR.width}x{INTR.height} frame)"
    return label, {name: best for name, (best, _) in results.items()}


def bench_nn_min_d2(backends, iterations, n_queries=5_000, n_points=20_000):
    rng = np.random.default_rng(0)
    queries = np.ascontiguousarray(rng.uniform(-1.0, 1.0, (n_queries, 3)))
    points = np.ascontiguousarray(rng.uniform(-1.0, 1.0, (n_points, 3)))

    results = {}
    outputs = {}
    for name, impl in backends.items():
        out = np.empty(n_queries)
        best = np.inf
        for _ in range(iterations):
            t0 = time.perf_counter()
            impl.nn_min_d2(queries, points, out)
            best = min(best, time.perf_counter() - t0)
        results[name] = best
        outputs[name] = out.copy()

    first = next(iter(outputs.values()))
    for out in outputs.values():
        assert np.array_equal(first, out)

    label = f"nn_min_d2 ({n_queries} queries x {n_points} points)"
    return label, results


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "--iterations", type=int, default=5, help="timing repeats (best-of)"
    )
    args = parser.parse_args()

    backends = load_backends()
    rows = [
        bench_fuse_block(backends, args.iterations),
        bench_nn_min_d2(backends, args.iterations),
    ]

    width = max(len(label) for label, _ in rows)
    header = f"{'kernel':<{width}}  {'python':>10}  {'compiled':>10}  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, times in rows:
        py_ms = times["python"] * 1e3
        if "compiled" in times:
            cy_ms = times["compiled"] * 1e3
            print(
                f"{label:<{width}}  {py_ms:>8.2f}ms  {cy_ms:>8.2f}ms  "
                f"{py_ms / cy_ms:>7.1f}x"
            )
        else:
            print(f"{label:<{width}}  {py_ms:>8.2f}ms  {'-':>10}  {'-':>8}")
    print("\noutputs verified bit-for-bit identical across backends")


if __name__ == "__main__":
    main()
