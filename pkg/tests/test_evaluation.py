"""Metric tests: sampling laws, exact NN search, MAD behavior, references."""

from types import SimpleNamespace

import numpy as np
import pytest

from refusion import evaluation
from refusion.errors import (
    DegenerateMeshError,
    EmptyInputError,
    EmptyModelError,
    IncompleteTrajectoryError,
)
from refusion.evaluation import (
    GridIndex,
    PointCloud,
    build_reference,
    distance_colors,
    mad_completeness,
    mad_correctness,
    sample_mesh,
    save_distance_ply,
)
from refusion.geometry import Intrinsics, Pose, rotation_from_euler_zyx
from refusion.meshing import TriangleMesh
from refusion.volume import VolumeConfig


def tri_mesh(vertices, triangles):
    vertices = np.asarray(vertices, dtype=np.float64)
    return TriangleMesh(
        vertices=vertices,
        colors=np.zeros_like(vertices),
        triangles=np.asarray(triangles, dtype=np.int64),
    )


def brute_distances(queries, points):
    d2 = ((queries[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
    return np.sqrt(d2.min(axis=1))


# ---------------------------------------------------------------------------
# sample_mesh


def test_sample_single_triangle_stays_in_plane():
    a = np.array([0.1, 0.0, 0.3])
    b = np.array([0.9, 0.2, 0.1])
    c = np.array([0.4, 0.8, 0.9])
    mesh = tri_mesh([a, b, c], [[0, 1, 2]])
    cloud = sample_mesh(mesh, 1000, seed=3)
    assert cloud.n_points == 1000
    normal = np.cross(b - a, c - a)
    normal /= np.linalg.norm(normal)
    off = (cloud.points - a) @ normal
    assert np.abs(off).max() < 1e-9
    # and inside the triangle: barycentric coordinates all non-negative
    m = np.stack([b - a, c - a], axis=1)
    uv = np.linalg.lstsq(m, (cloud.points - a).T, rcond=None)[0]
    assert uv.min() > -1e-9
    assert (uv.sum(axis=0)).max() < 1.0 + 1e-9


def test_sample_follows_triangle_areas():
    # Areas 1 and 3: expect 250/750 within 3 binomial sigmas.
    mesh = tri_mesh(
        [
            [0.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [10.0, 0.0, 0.0],
            [12.0, 0.0, 0.0],
            [10.0, 3.0, 0.0],
        ],
        [[0, 1, 2], [3, 4, 5]],
    )
    n = 1000
    cloud = sample_mesh(mesh, n, seed=11)
    n_small = (cloud.points[:, 0] < 5.0).sum()
    sigma = np.sqrt(n * 0.25 * 0.75)
    assert abs(n_small - 250) <= 3 * sigma


def test_sample_deterministic_under_seed():
    mesh = tri_mesh(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[0, 1, 2]]
    )
    one = sample_mesh(mesh, 500, seed=42)
    two = sample_mesh(mesh, 500, seed=42)
    other = sample_mesh(mesh, 500, seed=43)
    assert np.array_equal(one.points, two.points)
    assert not np.array_equal(one.points, other.points)


def test_sample_rejects_degenerate_input():
    with pytest.raises(DegenerateMeshError):
        sample_mesh(TriangleMesh(), 10)
    collinear = tri_mesh(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], [[0, 1, 2]]
    )
    with pytest.raises(DegenerateMeshError):
        sample_mesh(collinear, 10)
    good = tri_mesh(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[0, 1, 2]]
    )
    with pytest.raises(ValueError):
        sample_mesh(good, 0)


# ---------------------------------------------------------------------------
# GridIndex


def test_grid_index_matches_brute_force_exactly():
    rng = np.random.default_rng(7)
    points = rng.uniform(-1.0, 1.0, size=(1000, 3))
    queries = np.concatenate(
        [
            rng.uniform(-1.2, 1.2, size=(400, 3)),
            points[rng.integers(0, 1000, size=50)],  # exact hits
            rng.uniform(3.0, 4.0, size=(20, 3)),  # far outside the box
        ]
    )
    expected = brute_distances(queries, points)
    for cell in (0.01, 0.04, 0.3, 5.0):
        got = GridIndex(points, cell_size=cell).query(queries)
        assert np.array_equal(got, expected), f"cell_size={cell}"


def test_grid_index_single_query_and_chunking(monkeypatch):
    rng = np.random.default_rng(19)
    points = rng.normal(size=(200, 3))
    queries = rng.normal(size=(45, 3))
    monkeypatch.setattr(evaluation, "_QUERY_CHUNK", 7)
    index = GridIndex(points)
    assert np.array_equal(index.query(queries), brute_distances(queries, points))
    single = index.query(queries[0])
    assert single == brute_distances(queries[:1], points)[0]


def test_grid_index_rejects_empty():
    with pytest.raises(EmptyInputError):
        GridIndex(np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# MAD metrics


def test_mad_zero_on_identical_geometry():
    rng = np.random.default_rng(5)
    pts = rng.uniform(size=(300, 3))
    mesh = tri_mesh(pts, [[0, 1, 2]])
    cloud = PointCloud(points=pts.copy())
    assert mad_correctness(mesh, cloud) == 0.0
    assert mad_completeness(mesh, cloud) == 0.0


def test_mad_plane_offset_is_five_millimeters():
    # Model: vertex grid on z=0.  Reference: dense plane 5 mm above it,
    # deliberately misaligned laterally, padded so no vertex sees an edge.
    xs = np.arange(16) * 0.01
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    mesh = tri_mesh(verts, [[0, 1, 16]])
    rs = np.arange(-0.02 + 0.00037, 0.17, 0.001)
    rx, ry = np.meshgrid(rs, rs, indexing="ij")
    ref = PointCloud(
        points=np.stack([rx.ravel(), ry.ravel(), np.full(rx.size, 0.005)], axis=1)
    )
    mad = mad_correctness(mesh, ref)
    assert abs(mad - 5.0) < 0.1


def test_mad_invariant_under_common_rigid_transform():
    rng = np.random.default_rng(23)
    verts = rng.uniform(size=(200, 3))
    mesh = tri_mesh(verts, [[0, 1, 2]])
    ref = PointCloud(points=rng.uniform(size=(500, 3)))
    corr = mad_correctness(mesh, ref)
    compl = mad_completeness(mesh, ref)
    rot = rotation_from_euler_zyx(0.4, -1.1, 0.8)
    t = np.array([3.0, -2.0, 1.5])
    mesh2 = tri_mesh(verts @ rot.T + t, [[0, 1, 2]])
    ref2 = PointCloud(points=ref.points @ rot.T + t)
    assert abs(mad_correctness(mesh2, ref2) - corr) < 1e-9
    assert abs(mad_completeness(mesh2, ref2) - compl) < 1e-9


def test_completeness_flags_missing_geometry():
    rng = np.random.default_rng(31)
    near = rng.uniform(-0.1, 0.1, size=(400, 3))
    far = rng.uniform(-0.1, 0.1, size=(400, 3)) + np.array([1.0, 0.0, 0.0])
    ref = PointCloud(points=np.concatenate([near, far]))
    model = tri_mesh(near, [[0, 1, 2]])  # reconstructed only half the scene
    corr = mad_correctness(model, ref)
    compl = mad_completeness(model, ref)
    assert corr == 0.0  # every model vertex coincides with a reference point
    assert compl > 100.0  # half the reference sits ~1 m from the model
    assert compl != corr


def test_mad_error_signalling():
    mesh = tri_mesh(np.zeros((3, 3)), [[0, 1, 2]])
    cloud = PointCloud(points=np.zeros((5, 3)))
    with pytest.raises(EmptyInputError):
        mad_correctness(TriangleMesh(), cloud)
    with pytest.raises(EmptyInputError):
        mad_correctness(mesh, PointCloud())
    with pytest.raises(EmptyModelError):
        mad_completeness(TriangleMesh(), cloud)
    with pytest.raises(EmptyInputError):
        mad_completeness(mesh, PointCloud())


# ---------------------------------------------------------------------------
# build_reference


WALL_INTR = Intrinsics(fx=15.0, fy=15.0, cx=7.5, cy=5.5, width=16, height=12)
WALL_CFG = VolumeConfig(voxel_size=0.01, mu=0.06, stream_radius=4.0)


def wall_frames():
    depth = np.full((12, 16), 2.0)
    frames = [
        SimpleNamespace(index=i, depth=depth.copy(), color=None) for i in (1, 2, 3)
    ]
    poses = {
        1: Pose(np.eye(3), np.array([-0.05, 0.0, 0.0])),
        2: Pose.identity(),
        3: Pose(np.eye(3), np.array([0.05, 0.0, 0.0])),
    }
    return frames, poses


def test_build_reference_recovers_wall_plane():
    frames, poses = wall_frames()
    mesh = build_reference(frames, poses, WALL_INTR, WALL_CFG)
    assert mesh.n_triangles > 0
    assert np.abs(mesh.vertices[:, 2] - 2.0).max() < WALL_CFG.voxel_size


def test_build_reference_deterministic():
    frames, poses = wall_frames()
    one = build_reference(frames, poses, WALL_INTR, WALL_CFG)
    frames, poses = wall_frames()
    two = build_reference(frames, poses, WALL_INTR, WALL_CFG)
    assert np.array_equal(one.vertices, two.vertices)
    assert np.array_equal(one.colors, two.colors)
    assert np.array_equal(one.triangles, two.triangles)


def test_build_reference_error_paths():
    frames, poses = wall_frames()
    with pytest.raises(EmptyInputError):
        build_reference([], poses, WALL_INTR, WALL_CFG)
    del poses[2]
    with pytest.raises(IncompleteTrajectoryError):
        build_reference(frames, poses, WALL_INTR, WALL_CFG)


# ---------------------------------------------------------------------------
# distance coloring


def test_distance_color_endpoints():
    cols = distance_colors(np.array([0.0, 25.0, 50.0, 80.0]))
    assert np.array_equal(cols[0], [0.0, 0.0, 255.0])
    assert np.array_equal(cols[1], [127.5, 0.0, 127.5])
    assert np.array_equal(cols[2], [255.0, 0.0, 0.0])
    assert np.array_equal(cols[3], [255.0, 0.0, 0.0])


def test_save_distance_ply_colors(tmp_path):
    mesh = tri_mesh(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[0, 1, 2]]
    )
    path = tmp_path / "err.ply"
    save_distance_ply(mesh, np.array([0.0, 25.0, 500.0]), path)
    raw = path.read_bytes()
    body = raw[raw.index(b"end_header\n") + len(b"end_header\n") :]
    vdt = np.dtype(
        [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1")]
    )
    verts = np.frombuffer(body[: 3 * vdt.itemsize], dtype=vdt)
    assert tuple(verts[["r", "g", "b"]][0]) == (0, 0, 255)
    assert tuple(verts[["r", "g", "b"]][1]) == (128, 0, 128)
    assert tuple(verts[["r", "g", "b"]][2]) == (255, 0, 0)
    with pytest.raises(ValueError):
        save_distance_ply(mesh, np.zeros(2), tmp_path / "bad.ply")
