"""Dataset directory writing and ingestion."""

import os

import numpy as np
import pytest
from PIL import Image

from refusion.dataset_io import DEPTH_SCALE, ingest_dataset, write_dataset
from refusion.errors import IngestionError
from refusion.geometry import Intrinsics
from refusion.synth import TrajectorySpec, demo_scene, make_sequence, orbit_waypoints

INTR = Intrinsics(60.0, 60.0, 31.5, 23.5, 64, 48)


@pytest.fixture(scope="module")
def sequence():
    spec = TrajectorySpec(
        waypoints=orbit_waypoints(4, radius=1.2, height=1.3),
        frames_per_segment=3,
        drift_rate=(0.002, 0.001),
        correction_schedule=[(7, 0.5), (13, 1.0)],
    )
    return make_sequence(demo_scene(), spec, INTR, seed=3, noise_sigma0=0.001)


@pytest.fixture(scope="module")
def dataset_dir(sequence, tmp_path_factory):
    path = tmp_path_factory.mktemp("ds")
    write_dataset(sequence, path)
    return path


def test_roundtrip_frame_count_and_layout(sequence, dataset_dir):
    ds = ingest_dataset(dataset_dir)
    assert ds.n_frames == len(sequence.frames)
    assert [f.index for f in ds.frames] == [f.index for f in sequence.frames]
    assert ds.intrinsics == INTR
    assert len(ds.events) == len(sequence.events)
    assert os.path.isdir(os.path.join(dataset_dir, "depth"))
    assert os.path.isdir(os.path.join(dataset_dir, "color"))


def test_depth_roundtrip_within_quantization(sequence, dataset_dir):
    ds = ingest_dataset(dataset_dir)
    for orig, read in zip(sequence.frames[:3], ds.frames[:3]):
        err = np.abs(orig.depth - read.depth).max()
        assert err <= 0.5 / DEPTH_SCALE + 1e-12


def test_depth_scale_factor(tmp_path, sequence):
    # raw 10000 at scale 5000 decodes to exactly 2.000 m
    write_dataset(sequence, tmp_path)
    raw = np.full((INTR.height, INTR.width), 10000, dtype=np.uint16)
    Image.fromarray(raw).save(tmp_path / "depth" / "000001.png")
    ds = ingest_dataset(tmp_path)
    assert np.all(ds.frames[0].depth == 2.0)


def test_color_roundtrip_exact(sequence, dataset_dir):
    ds = ingest_dataset(dataset_dir)
    orig = np.clip(np.round(sequence.frames[0].color), 0, 255)
    assert np.array_equal(orig, ds.frames[0].color)


def test_pose_roundtrip(sequence, dataset_dir):
    ds = ingest_dataset(dataset_dir)
    for frame in ds.frames:
        drifted = sequence.drifted_poses[frame.index]
        assert np.allclose(frame.pose.rotation, drifted.rotation, atol=1e-12)
        assert np.array_equal(frame.pose.translation, drifted.translation)
    for index, pose in sequence.gt_poses.items():
        assert np.allclose(ds.gt_poses[index].rotation, pose.rotation, atol=1e-12)


def test_events_roundtrip(sequence, dataset_dir):
    ds = ingest_dataset(dataset_dir)
    for orig, read in zip(sequence.events, ds.events):
        assert read.at_frame == orig.at_frame
        assert read.dvo_kf_flags == orig.dvo_kf_flags
        assert set(read.anchor_poses) == set(orig.anchor_poses)
        for aid, pose in orig.anchor_poses.items():
            got = read.anchor_poses[aid]
            assert np.allclose(got.rotation, pose.rotation, atol=1e-12)
            assert np.allclose(got.translation, pose.translation, atol=1e-12)


def test_color_optional(tmp_path, sequence):
    write_dataset(sequence, tmp_path)
    os.remove(tmp_path / "color" / "000001.png")
    ds = ingest_dataset(tmp_path)
    assert ds.frames[0].color is None
    assert ds.frames[1].color is not None


def test_gt_and_events_optional(tmp_path, sequence):
    write_dataset(sequence, tmp_path)
    os.remove(tmp_path / "groundtruth.txt")
    os.remove(tmp_path / "events.jsonl")
    ds = ingest_dataset(tmp_path)
    assert ds.gt_poses is None
    assert ds.events == []


def test_missing_depth_names_path(tmp_path, sequence):
    write_dataset(sequence, tmp_path)
    victim = tmp_path / "depth" / "000002.png"
    os.remove(victim)
    with pytest.raises(IngestionError, match="000002.png"):
        ingest_dataset(tmp_path)


def test_truncated_depth_names_path(tmp_path, sequence):
    write_dataset(sequence, tmp_path)
    victim = tmp_path / "depth" / "000003.png"
    data = victim.read_bytes()
    victim.write_bytes(data[: len(data) // 2])
    with pytest.raises(IngestionError, match="000003.png"):
        ingest_dataset(tmp_path)


def test_bad_quaternion_norm_rejected(tmp_path, sequence):
    write_dataset(sequence, tmp_path)
    traj = tmp_path / "trajectory.txt"
    lines = traj.read_text().splitlines()
    lines[0] = "1 0.0 0.0 0.0 0.0 0.0 0.0 1.5"
    traj.write_text("\n".join(lines) + "\n")
    with pytest.raises(IngestionError, match="quaternion norm"):
        ingest_dataset(tmp_path)


def test_slightly_off_quaternion_renormalized(tmp_path, sequence):
    write_dataset(sequence, tmp_path)
    traj = tmp_path / "trajectory.txt"
    lines = traj.read_text().splitlines()
    # norm 1.0005: inside the 1e-3 acceptance band
    lines[0] = "1 0.0 0.0 0.0 0.0 0.0 0.0 1.0005"
    traj.write_text("\n".join(lines) + "\n")
    ds = ingest_dataset(tmp_path)
    assert np.allclose(ds.frames[0].pose.rotation, np.eye(3), atol=1e-12)


def test_malformed_trajectory_line(tmp_path, sequence):
    write_dataset(sequence, tmp_path)
    traj = tmp_path / "trajectory.txt"
    traj.write_text("1 0 0 0 0 0 1\n")  # seven fields, not eight
    with pytest.raises(IngestionError, match="trajectory.txt:1"):
        ingest_dataset(tmp_path)


def test_bad_event_json(tmp_path, sequence):
    write_dataset(sequence, tmp_path)
    (tmp_path / "events.jsonl").write_text('{"at_frame": 3, "anchors": \n')
    with pytest.raises(IngestionError, match="events.jsonl:1"):
        ingest_dataset(tmp_path)


def test_depth_shape_must_match_intrinsics(tmp_path, sequence):
    write_dataset(sequence, tmp_path)
    (tmp_path / "intrinsics.txt").write_text("60 60 31.5 23.5 32 24\n")
    with pytest.raises(IngestionError, match="shape"):
        ingest_dataset(tmp_path)


def test_missing_directory():
    with pytest.raises(IngestionError, match="no-such-dataset"):
        ingest_dataset("no-such-dataset")
