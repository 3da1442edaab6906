import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from refusion import keyframe_fusion as KF
from refusion.errors import UndefinedOverlapError
from refusion.geometry import Intrinsics, Pose, rotation_y

INTR = Intrinsics(fx=50.0, fy=50.0, cx=31.5, cy=23.5, width=64, height=48)
TINY = Intrinsics(fx=100.0, fy=100.0, cx=2.0, cy=2.0, width=5, height=5)


def wall_frame(index, z, pose=None, color=None, intr=INTR):
    depth = np.full((intr.height, intr.width), float(z))
    return KF.FrameObservation(
        index=index,
        color=color,
        depth=depth,
        pose=pose if pose is not None else Pose.identity(),
    )


def start_kf(frame, intr=INTR):
    kf = KF.new_keyframe(frame, intr)
    KF.fuse_depth(kf, frame)
    return kf


# ---------------------------------------------------------------------------
# FrameObservation validation


def test_frame_index_must_be_positive():
    with pytest.raises(ValueError):
        KF.FrameObservation(0, None, np.ones((4, 4)), Pose.identity())


def test_frame_negative_depth_rejected():
    depth = np.ones((4, 4))
    depth[1, 1] = -0.5
    with pytest.raises(ValueError):
        KF.FrameObservation(1, None, depth, Pose.identity())


def test_frame_color_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        KF.FrameObservation(
            1, np.zeros((5, 5, 3)), np.ones((4, 4)), Pose.identity()
        )


# ---------------------------------------------------------------------------
# depth sample weight


def test_frontal_unit_distance_weight_is_one():
    depth = np.ones((5, 5))
    normals = np.zeros((5, 5, 3))
    normals[..., 2] = 1.0
    w = KF.depth_sample_weight(depth, TINY, normals)
    assert w[2, 2] == 1.0  # principal-point pixel: ray (0,0,1)


def test_sixty_degree_weight_at_two_meters():
    depth = np.full((5, 5), 2.0)
    normals = np.zeros((5, 5, 3))
    normals[..., 0] = np.sin(np.deg2rad(60.0))
    normals[..., 2] = np.cos(np.deg2rad(60.0))
    w = KF.depth_sample_weight(depth, TINY, normals)
    assert abs(w[2, 2] - 0.125) < 1e-12  # cos(60)/2^2


def test_invalid_depth_gets_zero_weight():
    depth = np.ones((5, 5))
    depth[2, 2] = 0.0
    normals = np.zeros((5, 5, 3))
    normals[..., 2] = 1.0
    w = KF.depth_sample_weight(depth, TINY, normals)
    assert w[2, 2] == 0.0


def test_backfacing_normal_gets_zero_weight():
    depth = np.ones((5, 5))
    normals = np.zeros((5, 5, 3))
    normals[..., 2] = -1.0
    assert KF.depth_sample_weight(depth, TINY, normals)[2, 2] == 0.0


def test_normal_map_constant_plane():
    depth = np.full((9, 9), 2.0)
    intr = Intrinsics(fx=100.0, fy=100.0, cx=4.0, cy=4.0, width=9, height=9)
    n = KF.normal_map(depth, intr)
    assert np.allclose(n[1:-1, 1:-1], [0.0, 0.0, 1.0])
    assert np.all(n[0] == 0) and np.all(n[-1] == 0)
    assert np.all(n[:, 0] == 0) and np.all(n[:, -1] == 0)
    w = KF.depth_sample_weight(depth, intr)
    assert abs(w[4, 4] - 0.25) < 1e-12  # frontal, 1/z^2
    assert np.all(w[0] == 0)  # borders carry no weight


# ---------------------------------------------------------------------------
# discontinuity mask


def test_mask_constant_plane_all_false():
    assert not KF.discontinuity_mask(np.full((8, 8), 1.5)).any()


def test_mask_step_edge_marks_both_sides():
    depth = np.full((8, 8), 1.0)
    depth[:, 4:] = 1.5
    mask = KF.discontinuity_mask(depth, delta_disc=0.1)
    assert mask[:, 3].all() and mask[:, 4].all()
    assert not mask[:, :3].any() and not mask[:, 5:].any()


def test_mask_small_step_ignored():
    depth = np.full((8, 8), 1.0)
    depth[:, 4:] = 1.05
    assert not KF.discontinuity_mask(depth, delta_disc=0.1).any()


def test_mask_invalid_pixel_poisons_neighbors():
    depth = np.full((7, 7), 1.0)
    depth[3, 3] = 0.0
    mask = KF.discontinuity_mask(depth, delta_disc=0.1)
    assert mask[2:5, 2:5].all()  # the 8 neighbors plus the hole itself
    assert not mask[0].any() and not mask[:, 0].any()


# ---------------------------------------------------------------------------
# depth fusion


def test_identity_fuse_reproduces_masked_input():
    frame = wall_frame(1, 2.0)
    kf = start_kf(frame)
    valid = kf.weight > 0
    assert valid.any()
    assert np.allclose(kf.depth[valid], 2.0, atol=1e-9)
    assert not kf.depth[~valid].any()
    # interior pixels carry weight, borders do not
    assert not valid[0].any() and valid[10, 10]


def test_weight_accumulates_exactly():
    frame = wall_frame(1, 2.0)
    kf = start_kf(frame)
    w1 = kf.weight.copy()
    KF.fuse_depth(kf, wall_frame(2, 2.0))
    assert np.array_equal(kf.weight, 2.0 * w1)
    valid = kf.weight > 0
    assert np.allclose(kf.depth[valid], 2.0, atol=1e-9)


def test_running_average_matches_hand_formula():
    kf = start_kf(wall_frame(1, 2.0))
    KF.fuse_depth(kf, wall_frame(2, 2.2))
    w1 = KF.depth_sample_weight(np.full((48, 64), 2.0), INTR)[23, 31]
    w2 = KF.depth_sample_weight(np.full((48, 64), 2.2), INTR)[23, 31]
    expect = (2.0 * w1 + 2.2 * w2) / (w1 + w2)
    assert abs(kf.depth[23, 31] - expect) < 1e-12
    assert abs(kf.weight[23, 31] - (w1 + w2)) < 1e-15


def test_fusion_order_independent():
    frames = [wall_frame(i + 1, z) for i, z in enumerate((2.0, 2.1, 2.3))]
    kf_a = start_kf(frames[0])
    KF.fuse_depth(kf_a, frames[1])
    KF.fuse_depth(kf_a, frames[2])

    kf_b = KF.new_keyframe(frames[0], INTR)
    for f in (frames[2], frames[0], frames[1]):
        KF.fuse_depth(kf_b, f)

    va = kf_a.weight > 0
    assert np.array_equal(va, kf_b.weight > 0)
    assert np.allclose(kf_a.depth[va], kf_b.depth[va], rtol=1e-9)
    assert np.allclose(kf_a.weight[va], kf_b.weight[va], rtol=1e-12)


def test_members_recorded_in_order():
    kf = start_kf(wall_frame(5, 2.0))
    KF.fuse_depth(kf, wall_frame(6, 2.0))
    assert kf.members == [5, 6]


# ---------------------------------------------------------------------------
# blurriness and unsharp masking


def checkerboard(n=64, cell=8):
    tile = np.indices((n, n)).sum(axis=0) // cell % 2
    return tile.astype(np.float64) * 255.0


def test_blurriness_constant_image_is_sharp():
    assert KF.blurriness(np.full((32, 32), 77.0)) == 1.0


def test_blurriness_prefers_sharp_image():
    sharp = checkerboard()
    soft = gaussian_filter(sharp, 3.0)
    assert KF.blurriness(sharp) > KF.blurriness(soft)
    assert 0.0 <= KF.blurriness(soft) <= 1.0


def test_blurriness_deterministic():
    img = checkerboard()
    assert KF.blurriness(img) == KF.blurriness(img)


def test_unsharp_constant_unchanged():
    img = np.full((16, 16, 3), 90.0)
    assert np.array_equal(KF.unsharp_mask(img), img)


def test_unsharp_zero_gain_is_identity():
    rng = np.random.default_rng(5)
    img = rng.uniform(0, 255, (16, 16, 3))
    assert np.array_equal(KF.unsharp_mask(img, gain=0.0), img)


def test_unsharp_step_overshoots():
    img = np.full((8, 32), 64.0)
    img[:, 16:] = 192.0
    out = KF.unsharp_mask(img, gain=1.0)
    assert out.min() < 64.0 - 1.0
    assert out.max() > 192.0 + 1.0


def test_unsharp_clamps_to_byte_range():
    img = np.zeros((8, 32))
    img[:, 16:] = 255.0
    out = KF.unsharp_mask(img, gain=2.0)
    assert out.min() >= 0.0 and out.max() <= 255.0


# ---------------------------------------------------------------------------
# weighted median


def test_weighted_median_odd_unit_weights():
    assert KF.weighted_median([10, 200, 12], [1, 1, 1]) == 12


def test_weighted_median_mass_majority():
    assert KF.weighted_median([10, 200], [3, 1]) == 10


def test_weighted_median_tie_resolves_low():
    assert KF.weighted_median([9, 5], [1, 1]) == 5


def test_weighted_median_scale_and_permutation_invariant():
    rng = np.random.default_rng(11)
    vals = rng.uniform(0, 255, 21)
    wts = rng.uniform(0.1, 2.0, 21)
    ref = KF.weighted_median(vals, wts)
    assert KF.weighted_median(vals, wts * 7.5) == ref
    perm = rng.permutation(21)
    assert KF.weighted_median(vals[perm], wts[perm]) == ref


def test_weighted_median_empty_raises():
    with pytest.raises(ValueError):
        KF.weighted_median([], [])


# ---------------------------------------------------------------------------
# color fusion


def test_single_member_identity_color():
    color = np.zeros((48, 64, 3))
    color[:, :, 0] = np.linspace(0, 255, 64)[None, :]
    color[:, :, 1] = 128.0
    frame = wall_frame(1, 2.0, color=color)
    kf = start_kf(frame)
    KF.fuse_color(kf)
    assert kf.finalized
    expect = KF.unsharp_mask(color)
    valid = kf.color_valid
    assert valid.any()
    assert np.allclose(kf.color[valid], expect[valid], atol=1e-6)
    assert not kf.color_valid[~(kf.weight > 0)].any()


def test_three_member_median_color():
    kf = None
    for i, level in enumerate((10.0, 200.0, 12.0)):
        frame = wall_frame(i + 1, 2.0, color=np.full((48, 64, 3), level))
        if kf is None:
            kf = KF.new_keyframe(frame, INTR)
        KF.fuse_depth(kf, frame)
    KF.fuse_color(kf)
    valid = kf.color_valid
    assert valid.any()
    # constant images pass through the deblur untouched; equal weights, so
    # the median of {10, 200, 12} is 12 on every channel
    assert np.allclose(kf.color[valid], 12.0, atol=1e-9)


def test_occluded_pixels_marked_colorless():
    frame = wall_frame(1, 2.0, color=np.full((48, 64, 3), 50.0))
    kf = start_kf(frame)
    moved = kf.weight > 0
    kf.depth[moved] = 3.0  # keyframe surface no longer matches the member
    KF.fuse_color(kf)
    assert not kf.color_valid.any()
    assert not kf.color.any()


def test_fuse_color_twice_rejected():
    kf = start_kf(wall_frame(1, 2.0, color=np.zeros((48, 64, 3))))
    KF.fuse_color(kf)
    with pytest.raises(ValueError):
        KF.fuse_color(kf)
    with pytest.raises(ValueError):
        KF.fuse_depth(kf, wall_frame(2, 2.0))


# ---------------------------------------------------------------------------
# overlap


def test_overlap_identical_pose_is_one():
    frame = wall_frame(1, 2.0)
    kf = start_kf(frame)
    assert KF.overlap_ratio(kf, wall_frame(2, 2.0)) == 1.0


def test_overlap_opposite_view_is_zero():
    kf = start_kf(wall_frame(1, 2.0))
    behind = wall_frame(2, 2.0, pose=Pose(rotation_y(np.pi), np.zeros(3)))
    assert KF.overlap_ratio(kf, behind) == 0.0


def test_overlap_half_image_shift_on_wall():
    kf = start_kf(wall_frame(1, 2.0))
    # visible wall width at z=2 is width*z/fx = 2.56 m; shifting the camera
    # by half of it leaves about half the keyframe pixels visible
    shift = Pose(np.eye(3), np.array([1.28, 0.0, 0.0]))
    ratio = KF.overlap_ratio(kf, wall_frame(2, 2.0, pose=shift))
    assert abs(ratio - 0.5) <= 0.02


def test_overlap_empty_keyframe_undefined():
    empty = KF.new_keyframe(wall_frame(1, 2.0), INTR)
    with pytest.raises(UndefinedOverlapError):
        KF.overlap_ratio(empty, wall_frame(2, 2.0))


# ---------------------------------------------------------------------------
# keyframe decisions


def test_const_strategy_boundary():
    strat = KF.KeyframeStrategy(kind=KF.KF_CONST, kappa=5)
    kf = start_kf(wall_frame(1, 2.0))
    for i in range(2, 6):
        assert not KF.keyframe_decision(strat, kf, wall_frame(i, 2.0))
        KF.fuse_depth(kf, wall_frame(i, 2.0))
    assert len(kf.members) == 5
    assert KF.keyframe_decision(strat, kf, wall_frame(6, 2.0))


def test_empty_keyframe_never_closes():
    strat = KF.KeyframeStrategy(kind=KF.KF_CONST, kappa=1)
    kf = KF.new_keyframe(wall_frame(1, 2.0), INTR)
    assert not KF.keyframe_decision(strat, kf, wall_frame(1, 2.0))


def test_const_kappa_one_single_member_keyframes():
    strat = KF.KeyframeStrategy(kind=KF.KF_CONST, kappa=1)
    kf = start_kf(wall_frame(1, 2.0))
    assert KF.keyframe_decision(strat, kf, wall_frame(2, 2.0))


def test_dist_strategy_translation_threshold():
    strat = KF.KeyframeStrategy(kind=KF.KF_DIST, delta_r=0.35, delta_t=0.3)
    kf = start_kf(wall_frame(1, 2.0))
    near = wall_frame(2, 2.0, pose=Pose(np.eye(3), np.array([0.29, 0, 0.0])))
    far = wall_frame(3, 2.0, pose=Pose(np.eye(3), np.array([0.31, 0, 0.0])))
    assert not KF.keyframe_decision(strat, kf, near)
    assert KF.keyframe_decision(strat, kf, far)


def test_dist_strategy_rotation_threshold():
    strat = KF.KeyframeStrategy(kind=KF.KF_DIST, delta_r=0.35, delta_t=0.3)
    kf = start_kf(wall_frame(1, 2.0))
    spun = wall_frame(2, 2.0, pose=Pose(rotation_y(0.4), np.zeros(3)))
    assert KF.keyframe_decision(strat, kf, spun)


def test_dvo_strategy_uses_flag_set():
    strat = KF.KeyframeStrategy(kind=KF.KF_DVO)
    kf = start_kf(wall_frame(1, 2.0))
    assert KF.keyframe_decision(strat, kf, wall_frame(7, 2.0), dvo_kf_flags={7})
    assert not KF.keyframe_decision(strat, kf, wall_frame(6, 2.0), dvo_kf_flags={7})
    assert not KF.keyframe_decision(strat, kf, wall_frame(6, 2.0))


def test_ovrlp_strategy():
    strat = KF.KeyframeStrategy(kind=KF.KF_OVRLP, overlap_min=0.7)
    kf = start_kf(wall_frame(1, 2.0))
    assert not KF.keyframe_decision(strat, kf, wall_frame(2, 2.0))
    shifted = wall_frame(3, 2.0, pose=Pose(np.eye(3), np.array([1.8, 0, 0.0])))
    assert KF.keyframe_decision(strat, kf, shifted)


def test_strategy_validation():
    with pytest.raises(ValueError):
        KF.KeyframeStrategy(kind="KF_WHATEVER")
    with pytest.raises(ValueError):
        KF.KeyframeStrategy(kappa=0)
    with pytest.raises(ValueError):
        KF.KeyframeStrategy(overlap_min=1.5)


# ---------------------------------------------------------------------------
# anchoring


def test_rel_pose_composes_back_to_frame_pose():
    anchor = Pose(rotation_y(0.3), np.array([1.0, 0.0, -0.5]))
    frame = wall_frame(4, 2.0, pose=Pose(rotation_y(0.45), np.array([1.2, 0.1, -0.4])))
    kf = KF.new_keyframe(frame, INTR, anchor_id=3, anchor_pose=anchor)
    from refusion.geometry import compose

    recomposed = compose(anchor, kf.rel_pose)
    assert np.allclose(recomposed.rotation, frame.pose.rotation, atol=1e-12)
    assert np.allclose(recomposed.translation, frame.pose.translation, atol=1e-12)
    assert kf.anchor_id == 3
