"""Dataset directory layout: reading and writing.

A dataset is a directory holding ``depth/`` (16-bit grayscale PNGs, meters
scaled by 5000), optional ``color/`` (8-bit RGB PNGs), ``trajectory.txt``
(the estimated poses: ``frame_index tx ty tz qx qy qz qw`` per line,
Hamilton quaternions in x,y,z,w order), ``intrinsics.txt``
(``fx fy cx cy width height``), optional ``groundtruth.txt`` (same schema
as trajectory.txt) and optional ``events.jsonl`` describing backend pose
updates.  Synthetic sequences are written in the same layout real captures
use, so one parser serves both.
"""

import json
import os

import numpy as np
from PIL import Image
from dataclasses import dataclass, field

from .errors import IngestionError
from .geometry import Intrinsics, Pose, quat_to_rotation, rotation_to_quat
from .keyframe_fusion import FrameObservation
from .reintegration import PoseUpdateEvent

DEPTH_SCALE = 5000.0  # the de-facto RGB-D benchmark convention
QUAT_NORM_TOL = 1e-3


@dataclass
class Dataset:
    """Everything a reconstruction run needs, in memory."""

    frames: list
    intrinsics: Intrinsics
    gt_poses: dict = None
    events: list = field(default_factory=list)

    @property
    def n_frames(self):
        return len(self.frames)


def _frame_name(index):
    return f"{index:06d}.png"


# ---------------------------------------------------------------------------
# writing


def _pose_line(index, pose):
    q = rotation_to_quat(pose.rotation)
    t = pose.translation
    vals = " ".join(f"{v!r}" for v in (*map(float, t), *map(float, q)))
    return f"{index} {vals}"


def _write_trajectory(path, poses):
    lines = [_pose_line(i, poses[i]) for i in sorted(poses)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _event_to_record(event):
    anchors = {}
    for aid, pose in event.anchor_poses.items():
        q = rotation_to_quat(pose.rotation)
        anchors[str(aid)] = [*map(float, pose.translation), *map(float, q)]
    return {
        "at_frame": event.at_frame,
        "anchors": anchors,
        "new_dvo_keyframes": sorted(event.dvo_kf_flags),
    }


def write_dataset(seq, path):
    """Write a synthetic sequence to ``path`` in the dataset layout."""
    os.makedirs(os.path.join(path, "depth"), exist_ok=True)
    has_color = any(f.color is not None for f in seq.frames)
    if has_color:
        os.makedirs(os.path.join(path, "color"), exist_ok=True)

    for frame in seq.frames:
        raw = np.clip(np.round(frame.depth * DEPTH_SCALE), 0, 65535).astype(np.uint16)
        Image.fromarray(raw).save(
            os.path.join(path, "depth", _frame_name(frame.index))
        )
        if frame.color is not None:
            rgb = np.clip(np.round(frame.color), 0, 255).astype(np.uint8)
            Image.fromarray(rgb, mode="RGB").save(
                os.path.join(path, "color", _frame_name(frame.index))
            )

    _write_trajectory(os.path.join(path, "trajectory.txt"), seq.drifted_poses)
    _write_trajectory(os.path.join(path, "groundtruth.txt"), seq.gt_poses)

    intr = seq.intrinsics
    with open(os.path.join(path, "intrinsics.txt"), "w") as fh:
        fh.write(f"{intr.fx} {intr.fy} {intr.cx} {intr.cy} {intr.width} {intr.height}\n")

    with open(os.path.join(path, "events.jsonl"), "w") as fh:
        for event in seq.events:
            fh.write(json.dumps(_event_to_record(event)) + "\n")


# ---------------------------------------------------------------------------
# reading


def _parse_pose(parts, path, line_no):
    if len(parts) != 7:
        raise IngestionError(
            f"{path}:{line_no}: expected 'tx ty tz qx qy qz qw', got {len(parts)} values"
        )
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise IngestionError(f"{path}:{line_no}: non-numeric pose value") from None
    t = np.array(vals[:3])
    q = np.array(vals[3:])
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > QUAT_NORM_TOL:
        raise IngestionError(
            f"{path}:{line_no}: quaternion norm {norm:.6f} too far from 1"
        )
    return Pose(quat_to_rotation(q / norm), t)


def _read_trajectory(path):
    poses = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                index = int(parts[0])
            except ValueError:
                raise IngestionError(
                    f"{path}:{line_no}: frame index {parts[0]!r} is not an integer"
                ) from None
            poses[index] = _parse_pose(parts[1:], path, line_no)
    if not poses:
        raise IngestionError(f"{path}: no poses found")
    return poses


def _read_intrinsics(path):
    if not os.path.exists(path):
        raise IngestionError(f"{path}: missing intrinsics file")
    with open(path) as fh:
        parts = fh.read().split()
    if len(parts) != 6:
        raise IngestionError(
            f"{path}: expected 'fx fy cx cy width height', got {len(parts)} values"
        )
    try:
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        width, height = (int(p) for p in parts[4:])
    except ValueError:
        raise IngestionError(f"{path}: non-numeric intrinsics value") from None
    return Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)


def _read_depth(path):
    try:
        with Image.open(path) as img:
            raw = np.asarray(img)
    except Exception as exc:
        raise IngestionError(f"{path}: cannot decode depth image ({exc})") from None
    if raw.ndim != 2:
        raise IngestionError(f"{path}: depth image must be single-channel")
    return raw.astype(np.float64) / DEPTH_SCALE


def _read_color(path):
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"))
    except Exception as exc:
        raise IngestionError(f"{path}: cannot decode color image ({exc})") from None
    return rgb.astype(np.float64)


def _read_events(path):
    events = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}:{line_no}: bad JSON ({exc})") from None
            try:
                anchors = {}
                for aid, vals in rec.get("anchors", {}).items():
                    anchors[int(aid)] = _parse_pose(
                        [str(v) for v in vals], path, line_no
                    )
                events.append(
                    PoseUpdateEvent(
                        at_frame=int(rec["at_frame"]),
                        anchor_poses=anchors,
                        dvo_kf_flags=set(
                            int(k) for k in rec.get("new_dvo_keyframes", [])
                        ),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise IngestionError(
                    f"{path}:{line_no}: malformed event ({exc})"
                ) from None
    return events


def ingest_dataset(path):
    """Load a dataset directory; see the module docstring for the layout.

    Frames come back in index order carrying the estimated (trajectory.txt)
    poses; ground truth and events are attached when present.
    """
    if not os.path.isdir(path):
        raise IngestionError(f"{path}: not a dataset directory")
    trajectory = _read_trajectory(os.path.join(path, "trajectory.txt"))
    intrinsics = _read_intrinsics(os.path.join(path, "intrinsics.txt"))

    color_dir = os.path.join(path, "color")
    frames = []
    for index in sorted(trajectory):
        depth_path = os.path.join(path, "depth", _frame_name(index))
        if not os.path.exists(depth_path):
            raise IngestionError(f"{depth_path}: missing depth image")
        depth = _read_depth(depth_path)
        if depth.shape != (intrinsics.height, intrinsics.width):
            raise IngestionError(
                f"{depth_path}: shape {depth.shape} does not match intrinsics "
                f"({intrinsics.height}, {intrinsics.width})"
            )
        color_path = os.path.join(color_dir, _frame_name(index))
        color = _read_color(color_path) if os.path.exists(color_path) else None
        frames.append(
            FrameObservation(
                index=index, color=color, depth=depth, pose=trajectory[index]
            )
        )

    gt_path = os.path.join(path, "groundtruth.txt")
    gt_poses = _read_trajectory(gt_path) if os.path.exists(gt_path) else None
    events_path = os.path.join(path, "events.jsonl")
    events = _read_events(events_path) if os.path.exists(events_path) else []
    return Dataset(frames=frames, intrinsics=intrinsics, gt_poses=gt_poses, events=events)
