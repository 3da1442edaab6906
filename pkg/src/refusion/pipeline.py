"""End-to-end reconstruction runs: configuration, the frame loop, reporting.

The loop follows the streaming architecture: each arriving frame first
drains any pending pose-update events (possibly triggering one window
correction), then either fuses into the open keyframe or closes it —
finalizing its color, integrating it into the volume, recording it in the
ledger — and opens a new one anchored to the latest DVO keyframe.  After
the stream ends the last keyframe is integrated, every remaining moved
entry is corrected, and the surface is extracted.
"""

import csv
import json
import os
import time
from dataclasses import dataclass, field

from .dataset_io import ingest_dataset
from .errors import EmptyInputError
from .geometry import Intrinsics, Pose
from .keyframe_fusion import (
    KeyframeStrategy,
    fuse_color,
    fuse_depth,
    keyframe_decision,
    new_keyframe,
)
from .meshing import marching_cubes, save_ply, weld
from .reintegration import (
    DEFAULT_M,
    IntegrationLedger,
    apply_pose_update,
    correct_topk,
    correct_window,
    finalize,
    select_topk,
    select_window,
)
from .volume import TwoTierStore, VolumeConfig, integrate, save_volume, stream

MODE_WINDOW = "consecutive_window"
MODE_TOPK = "topk_baseline"
MODE_OFF = "off"
REINTEGRATION_MODES = (MODE_WINDOW, MODE_TOPK, MODE_OFF)

STATS_COLUMNS = (
    "frame",
    "fuse_ms",
    "integrate_ms",
    "correct_ms",
    "blocks_in",
    "blocks_out",
    "relocations",
)


@dataclass
class RunConfig:
    """Everything one reconstruction run needs beyond the dataset itself."""

    strategy: KeyframeStrategy = field(default_factory=KeyframeStrategy)
    m: int = DEFAULT_M
    volume: VolumeConfig = field(default_factory=VolumeConfig)
    intrinsics: Intrinsics = None  # None: use the dataset's
    seed: int = 0
    reintegration_mode: str = MODE_WINDOW
    dataset: str = None
    output: str = None

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"window size m must be >= 1, got {self.m}")
        if self.reintegration_mode not in REINTEGRATION_MODES:
            raise ValueError(
                f"reintegration_mode must be one of {REINTEGRATION_MODES}, "
                f"got {self.reintegration_mode!r}"
            )


@dataclass
class FrameStats:
    """Per-frame timings (ms) and streaming-counter deltas."""

    frame: int
    fuse_ms: float = 0.0
    integrate_ms: float = 0.0
    correct_ms: float = 0.0
    blocks_in: int = 0
    blocks_out: int = 0
    relocations: int = 0

    def as_row(self):
        return [getattr(self, name) for name in STATS_COLUMNS]


@dataclass
class RunStats:
    """Accumulated run report; counter totals equal the volume's counters."""

    frames: list = field(default_factory=list)
    keyframe_count: int = 0
    corrected_entries: int = 0
    retained_pixels: int = 0
    blocks_streamed_in: int = 0
    blocks_streamed_out: int = 0
    sphere_relocations: int = 0
    metrics: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return len(self.frames)

    def total(self, name):
        return sum(getattr(row, name) for row in self.frames)

    @property
    def fuse_ms(self):
        return self.total("fuse_ms")

    @property
    def integrate_ms(self):
        return self.total("integrate_ms")

    @property
    def correct_ms(self):
        return self.total("correct_ms")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(STATS_COLUMNS)
            for row in self.frames:
                writer.writerow(row.as_row())

    def summary(self):
        out = {
            "frames": self.n_frames,
            "keyframes": self.keyframe_count,
            "corrected_entries": self.corrected_entries,
            "retained_pixels": self.retained_pixels,
            "fuse_ms": self.fuse_ms,
            "integrate_ms": self.integrate_ms,
            "correct_ms": self.correct_ms,
            "blocks_streamed_in": self.blocks_streamed_in,
            "blocks_streamed_out": self.blocks_streamed_out,
            "sphere_relocations": self.sphere_relocations,
        }
        out.update(self.metrics)
        return out


class _Stopwatch:
    """Accumulates wall-clock spans onto FrameStats fields."""

    def __init__(self):
        self.row = None

    def __call__(self, name):
        self._name = name
        return self

    def __enter__(self):
        self._t0 = time.perf_counter()

    def __exit__(self, *exc):
        dt = (time.perf_counter() - self._t0) * 1e3
        setattr(self.row, self._name, getattr(self.row, self._name) + dt)
        return False


def _counter_state(store):
    return (
        store.blocks_streamed_in,
        store.blocks_streamed_out,
        store.sphere_relocations,
    )


def run_pipeline(dataset, cfg):
    """Run the reconstruction loop over an in-memory dataset.

    Returns (mesh, stats, store, ledger); the mesh is welded, the store
    holds the final volume, and the ledger retains every integrated
    keyframe with its final pose.
    """
    if not dataset.frames:
        raise EmptyInputError("dataset has no frames")
    intr = cfg.intrinsics if cfg.intrinsics is not None else dataset.intrinsics

    store = TwoTierStore()
    ledger = IntegrationLedger()
    ledger.declare_anchor(0, Pose.identity())
    latest_anchor = 0
    dvo_flags = set()

    events = sorted(dataset.events, key=lambda e: e.at_frame)
    next_event = 0

    stats = RunStats()
    watch = _Stopwatch()
    kf = None
    next_kf_id = 1

    def close_keyframe():
        nonlocal kf, next_kf_id
        with watch("fuse_ms"):
            fuse_color(kf)
        with watch("integrate_ms"):
            stream(store, kf.pose.translation, cfg.volume)
            integrate(store, kf, kf.pose, cfg.volume)
        kf.kf_id = next_kf_id
        ledger.add(kf, next_kf_id, kf.anchor_id, kf.rel_pose, kf.pose)
        next_kf_id += 1
        stats.keyframe_count += 1
        stats.retained_pixels += kf.depth.size
        kf = None

    for obs in dataset.frames:
        row = FrameStats(frame=obs.index)
        stats.frames.append(row)
        watch.row = row
        before = _counter_state(store)

        changed = 0
        while next_event < len(events) and events[next_event].at_frame <= obs.index:
            event = events[next_event]
            next_event += 1
            changed += apply_pose_update(ledger, event)
            dvo_flags |= event.dvo_kf_flags
            for aid in sorted(event.dvo_kf_flags):
                if aid in ledger.anchors and aid > latest_anchor:
                    latest_anchor = aid

        if changed and ledger.K and cfg.reintegration_mode != MODE_OFF:
            with watch("correct_ms"):
                if cfg.reintegration_mode == MODE_WINDOW:
                    j_star = select_window(ledger, cfg.m)
                    stats.corrected_entries += correct_window(
                        store,
                        ledger,
                        j_star,
                        cfg.m,
                        cfg.volume,
                        next_center=obs.pose.translation,
                    )
                else:
                    picks = select_topk(ledger, cfg.m)
                    stats.corrected_entries += correct_topk(
                        store,
                        ledger,
                        picks,
                        cfg.volume,
                        next_center=obs.pose.translation,
                    )

        if kf is not None and keyframe_decision(
            cfg.strategy, kf, obs, dvo_kf_flags=dvo_flags
        ):
            close_keyframe()
        if kf is None:
            with watch("fuse_ms"):
                kf = new_keyframe(
                    obs,
                    intr,
                    anchor_id=latest_anchor,
                    anchor_pose=ledger.anchor_pose(latest_anchor),
                )
                fuse_depth(kf, obs)
        else:
            with watch("fuse_ms"):
                fuse_depth(kf, obs)

        delta = [b - a for a, b in zip(before, _counter_state(store))]
        row.blocks_in, row.blocks_out, row.relocations = delta

    # Stream end: the trailing work books onto the last frame's row.
    before = _counter_state(store)
    close_keyframe()
    if cfg.reintegration_mode != MODE_OFF:
        with watch("correct_ms"):
            stats.corrected_entries += finalize(store, ledger, cfg.volume, m=cfg.m)
    delta = [b - a for a, b in zip(before, _counter_state(store))]
    row.blocks_in += delta[0]
    row.blocks_out += delta[1]
    row.relocations += delta[2]

    stats.blocks_streamed_in = store.blocks_streamed_in
    stats.blocks_streamed_out = store.blocks_streamed_out
    stats.sphere_relocations = store.sphere_relocations

    mesh = weld(marching_cubes(store, cfg.volume))
    return mesh, stats, store, ledger


def reconstruct(cfg):
    """Load the configured dataset, run the pipeline, write the outputs.

    Writes mesh.ply, stats.csv, metrics.json and volume.bin under
    cfg.output when it is set.  Returns (mesh, stats).
    """
    if cfg.dataset is None:
        raise ValueError("RunConfig.dataset must name a dataset directory")
    dataset = ingest_dataset(cfg.dataset)
    mesh, stats, store, _ = run_pipeline(dataset, cfg)
    if cfg.output is not None:
        os.makedirs(cfg.output, exist_ok=True)
        save_ply(mesh, os.path.join(cfg.output, "mesh.ply"))
        stats.write_csv(os.path.join(cfg.output, "stats.csv"))
        with open(os.path.join(cfg.output, "metrics.json"), "w") as fh:
            json.dump(stats.summary(), fh, indent=2, sort_keys=True)
        save_volume(store, os.path.join(cfg.output, "volume.bin"), cfg.volume)
    return mesh, stats


BENCH_COLUMNS = (
    "strategy",
    "kappa",
    "m",
    "reintegration_mode",
    "fuse_ms",
    "integrate_ms",
    "correct_ms",
    "blocks_streamed_in",
    "blocks_streamed_out",
    "sphere_relocations",
    "keyframes",
    "corrected_entries",
    "corr_mad_mm",
    "compl_mad_mm",
)


def bench(configs, dataset=None, csv_path=None, reference_points=200_000, seed=0):
    """Run a configuration matrix over one dataset and tabulate the results.

    ``dataset`` may be an in-memory Dataset or a directory path; when None
    every config must name the same dataset path.  Accuracy columns need
    ground truth; without it they are left empty.  Returns the rows as a
    list of dicts and optionally writes them as CSV.
    """
    from .evaluation import (
        build_reference,
        mad_completeness,
        mad_correctness,
        sample_mesh,
    )

    if not configs:
        raise ValueError("bench needs at least one configuration")
    if dataset is None:
        paths = {cfg.dataset for cfg in configs}
        if len(paths) != 1 or None in paths:
            raise ValueError(
                "configs name different datasets; pass the dataset explicitly"
            )
        dataset = paths.pop()
    if isinstance(dataset, (str, os.PathLike)):
        dataset = ingest_dataset(dataset)

    reference = None
    if dataset.gt_poses is not None:
        ref_mesh = build_reference(
            dataset.frames, dataset.gt_poses, dataset.intrinsics, configs[0].volume
        )
        reference = sample_mesh(ref_mesh, reference_points, seed=seed)

    rows = []
    for cfg in configs:
        mesh, stats, _, _ = run_pipeline(dataset, cfg)
        row = {
            "strategy": cfg.strategy.kind,
            "kappa": cfg.strategy.kappa,
            "m": cfg.m,
            "reintegration_mode": cfg.reintegration_mode,
            "fuse_ms": stats.fuse_ms,
            "integrate_ms": stats.integrate_ms,
            "correct_ms": stats.correct_ms,
            "blocks_streamed_in": stats.blocks_streamed_in,
            "blocks_streamed_out": stats.blocks_streamed_out,
            "sphere_relocations": stats.sphere_relocations,
            "keyframes": stats.keyframe_count,
            "corrected_entries": stats.corrected_entries,
            "corr_mad_mm": "",
            "compl_mad_mm": "",
        }
        if reference is not None:
            row["corr_mad_mm"] = mad_correctness(mesh, reference)
            row["compl_mad_mm"] = mad_completeness(mesh, reference)
        rows.append(row)

    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    return rows
