import numpy as np
import pytest

from refusion import reintegration as R
from refusion import volume as V
from refusion.errors import MalformedEventError, VolumeInconsistencyError
from refusion.geometry import (
    DEFAULT_DISTANCE_SCALE,
    Intrinsics,
    Pose,
    compose,
    pose_distance,
    rotation_z,
)

INTR = Intrinsics(fx=15.0, fy=15.0, cx=7.5, cy=5.5, width=16, height=12)
CFG = V.VolumeConfig(voxel_size=0.01, mu=0.06, stream_radius=4.0)


class Frame:
    def __init__(self, depth, weight, color, intrinsics):
        self.depth = depth
        self.weight = weight
        self.color = color
        self.intrinsics = intrinsics


def random_frame(rng, intr=INTR):
    shape = (intr.height, intr.width)
    depth = rng.uniform(1.0, 2.0, shape)
    weight = rng.uniform(0.5, 2.0, shape)
    color = rng.uniform(0.0, 1.0, shape + (3,))
    return Frame(depth, weight, color, intr)


def x_pose(x):
    return Pose(np.eye(3), np.array([float(x), 0.0, 0.0]))


def ledger_with_distances(dvec):
    """Entries whose scaled pose distance equals dvec[i] exactly: pure x
    translations with the unit translation scale."""
    ledger = R.IntegrationLedger()
    ledger.declare_anchor(0, Pose.identity())
    for i, d in enumerate(dvec):
        entry = ledger.add(
            kf=None,
            kf_id=i + 1,
            anchor_id=0,
            rel_pose=x_pose(0.0),
            integrated_pose=x_pose(0.0),
        )
        entry.target_pose = x_pose(d)
    return ledger


# Mirrors the worked loop-closure illustration: per-entry distances with a
# dense moved run at 3..8 and two stragglers at 12, 13 (1-based).
FIG_DISTANCES = [
    0.05, 0.05, 0.5, 0.45, 0.55, 0.40, 0.42, 0.70,
    0.05, 0.05, 0.05, 0.90, 0.60, 0.05, 0.05,
]


# ---------------------------------------------------------------------------
# apply_pose_update


def make_volume_ledger(rng, n_entries=3):
    ledger = R.IntegrationLedger()
    ledger.declare_anchor(0, Pose.identity())
    store = V.TwoTierStore()
    V.stream(store, np.zeros(3), CFG)
    for i in range(n_entries):
        kf = random_frame(rng)
        pose = x_pose(0.05 * i)
        rel = pose.copy()  # anchor at identity
        V.stream(store, pose.translation, CFG)
        rec = V.integrate(store, kf, pose, CFG)
        ledger.add(kf, i + 1, 0, rel, rec.pose)
    return store, ledger


def test_noop_event_changes_nothing():
    rng = np.random.default_rng(1)
    _, ledger = make_volume_ledger(rng)
    before = ledger.distances()
    ev = R.PoseUpdateEvent(at_frame=5, anchor_poses={0: Pose.identity()})
    assert R.apply_pose_update(ledger, ev) == 0
    assert np.array_equal(ledger.distances(), before)


def test_anchor_translation_premultiplies():
    rng = np.random.default_rng(2)
    _, ledger = make_volume_ledger(rng)
    moved = Pose(np.eye(3), np.array([0.1, 0.0, 0.0]))
    changed = R.apply_pose_update(
        ledger, R.PoseUpdateEvent(at_frame=5, anchor_poses={0: moved})
    )
    assert changed == len(ledger.entries)
    for entry in ledger.entries:
        want = compose(moved, entry.rel_pose)
        assert np.allclose(entry.target_pose.translation, want.translation)
        assert np.allclose(
            entry.target_pose.translation,
            entry.integrated_pose.translation + np.array([0.1, 0.0, 0.0]),
            atol=1e-12,
        )


def test_update_only_touches_matching_anchor():
    ledger = R.IntegrationLedger()
    ledger.declare_anchor(0, Pose.identity())
    ledger.declare_anchor(1, x_pose(1.0))
    ledger.add(None, 1, 0, x_pose(0.0), x_pose(0.0))
    ledger.add(None, 2, 1, x_pose(0.0), x_pose(1.0))
    ev = R.PoseUpdateEvent(at_frame=3, anchor_poses={1: x_pose(1.3)})
    assert R.apply_pose_update(ledger, ev) == 1
    d = ledger.distances()
    assert d[0] == 0.0
    assert abs(d[1] - 0.3) < 1e-12


def test_new_anchor_may_be_declared_by_event():
    ledger = R.IntegrationLedger()
    ev = R.PoseUpdateEvent(at_frame=1, anchor_poses={7: x_pose(2.0)})
    assert R.apply_pose_update(ledger, ev) == 0
    assert np.allclose(ledger.anchor_pose(7).translation, [2.0, 0.0, 0.0])


def test_entry_with_undeclared_anchor_is_malformed():
    ledger = R.IntegrationLedger()
    ledger.declare_anchor(0, Pose.identity())
    entry = ledger.add(None, 1, 0, x_pose(0.0), x_pose(0.0))
    entry.anchor_id = 99  # simulates a corrupt event stream
    with pytest.raises(MalformedEventError):
        R.apply_pose_update(ledger, R.PoseUpdateEvent(at_frame=2))
    with pytest.raises(MalformedEventError):
        ledger.add(None, 2, 42, x_pose(0.0), x_pose(0.0))


def test_event_validation():
    with pytest.raises(MalformedEventError):
        R.PoseUpdateEvent(at_frame=0)
    with pytest.raises(MalformedEventError):
        R.PoseUpdateEvent(at_frame=1, anchor_poses={0: "not a pose"})


# ---------------------------------------------------------------------------
# window selection


def brute_force_window(dvec, m):
    k = len(dvec)
    length = min(m, k)
    best_j, best_sum = None, -1.0
    for j in range(1, k - length + 2):
        s = sum(dvec[j - 1 : j - 1 + length])
        if s > best_sum:
            best_j, best_sum = j, s
    if best_sum < R.EPS_MOVE:
        return None
    return best_j


def test_select_window_nothing_moved():
    ledger = ledger_with_distances([0.0] * 10)
    assert R.select_window(ledger, 3) is None


def test_select_window_empty_ledger():
    assert R.select_window(R.IntegrationLedger(), 5) is None


def test_select_window_single_moved_entry_tiebreak():
    dvec = [0.0] * 10
    dvec[6] = 0.25  # 1-based index 7
    ledger = ledger_with_distances(dvec)
    assert R.select_window(ledger, 3) == 5  # smallest j covering index 7


def test_select_window_fig_scenario():
    ledger = ledger_with_distances(FIG_DISTANCES)
    assert R.select_window(ledger, 5) == 4  # window 4..8


def test_select_topk_fig_scenario():
    ledger = ledger_with_distances(FIG_DISTANCES)
    picks = R.select_topk(ledger, 5)
    assert picks == [12, 8, 13, 5, 3]


def test_select_topk_total_tie_takes_first():
    ledger = ledger_with_distances([0.0] * 8)
    assert R.select_topk(ledger, 3) == [1, 2, 3]


def test_select_topk_saturates():
    ledger = ledger_with_distances([0.1, 0.2, 0.3])
    assert set(R.select_topk(ledger, 10)) == {1, 2, 3}


def test_select_window_matches_brute_force():
    rng = np.random.default_rng(13)
    for _ in range(300):
        k = int(rng.integers(1, 40))
        m = int(rng.integers(1, 12))
        dvec = rng.uniform(0.0, 1.0, k)
        dvec[rng.random(k) < 0.5] = 0.0
        ledger = ledger_with_distances(dvec)
        assert R.select_window(ledger, m) == brute_force_window(list(dvec), m)


def test_select_window_short_ledger_uses_full_span():
    ledger = ledger_with_distances([0.2, 0.1])
    assert R.select_window(ledger, 10) == 1


def test_scaled_rotation_counts_double():
    ledger = R.IntegrationLedger()
    ledger.declare_anchor(0, Pose.identity())
    e = ledger.add(None, 1, 0, x_pose(0.0), Pose.identity())
    e.target_pose = Pose(rotation_z(0.2), np.zeros(3))
    d = ledger.distances(DEFAULT_DISTANCE_SCALE)
    assert abs(d[0] - 0.4) < 1e-12  # yaw scaled by 2


# ---------------------------------------------------------------------------
# correction


def test_identity_window_correction_is_noop():
    rng = np.random.default_rng(23)
    store, ledger = make_volume_ledger(rng, n_entries=3)
    before = {c: b.copy() for c, b in store.iter_blocks()}
    n = R.correct_window(store, ledger, 1, 3, CFG)
    assert n == 3
    for coord, blk in store.iter_blocks():
        old = before[coord]
        assert np.abs(blk.d - old.d).max() <= 1e-9
        assert np.abs(blk.w - old.w).max() <= 1e-12


def test_single_entry_correction_matches_fresh_integration():
    rng = np.random.default_rng(29)
    kf = random_frame(rng)
    old_pose = x_pose(0.0)
    new_pose = Pose(np.eye(3), np.array([0.15, 0.05, 0.0]))

    store = V.TwoTierStore()
    V.stream(store, old_pose.translation, CFG)
    ledger = R.IntegrationLedger()
    ledger.declare_anchor(0, Pose.identity())
    rec = V.integrate(store, kf, old_pose, CFG)
    entry = ledger.add(kf, 1, 0, old_pose, rec.pose)
    entry.target_pose = new_pose.copy()

    assert R.correct_window(store, ledger, 1, 1, CFG) == 1
    assert (
        pose_distance(entry.integrated_pose, entry.target_pose) < R.EPS_MOVE
    )

    fresh = V.TwoTierStore()
    V.stream(fresh, new_pose.translation, CFG)
    V.integrate(fresh, kf, new_pose, CFG)
    dd, dc, dw = V.compare_volumes(store, fresh)
    assert dd <= 1e-9 and dc <= 1e-9 and dw <= 1e-12


def test_correction_abort_restores_volume():
    rng = np.random.default_rng(31)
    store, ledger = make_volume_ledger(rng, n_entries=2)
    # Corrupt the second entry's integration pose: its removal must fail.
    ledger.entries[1].integrated_pose = x_pose(2.5)
    ledger.entries[1].target_pose = x_pose(2.6)
    ledger.entries[0].target_pose = x_pose(0.02)
    before = {c: b.copy() for c, b in store.iter_blocks()}

    with pytest.raises(VolumeInconsistencyError):
        R.correct_window(store, ledger, 1, 2, CFG)

    for coord, blk in store.iter_blocks():
        old = before.get(coord)
        if old is None:
            assert not blk.w.any()  # over-allocated empties only
            continue
        assert np.abs(blk.d - old.d).max() <= 1e-9
        assert np.abs(blk.w - old.w).max() <= 1e-12
    # first entry's ledger pose was not advanced
    assert np.array_equal(
        ledger.entries[0].integrated_pose.translation, np.array([0.0, 0.0, 0.0])
    )


def test_correct_window_returns_sphere_to_next_center():
    rng = np.random.default_rng(37)
    store, ledger = make_volume_ledger(rng, n_entries=2)
    nxt = np.array([0.5, 0.0, 0.0])
    R.correct_window(store, ledger, 1, 2, CFG, next_center=nxt)
    assert np.array_equal(store.last_center, nxt)


def test_finalize_consistent_ledger_noop():
    rng = np.random.default_rng(41)
    store, ledger = make_volume_ledger(rng)
    assert R.finalize(store, ledger, CFG) == 0


def test_finalize_all_moved_matches_rebuild():
    rng = np.random.default_rng(43)
    store, ledger = make_volume_ledger(rng, n_entries=4)
    shift = Pose(np.eye(3), np.array([0.0, 0.12, 0.0]))
    R.apply_pose_update(
        ledger, R.PoseUpdateEvent(at_frame=99, anchor_poses={0: shift})
    )
    assert R.finalize(store, ledger, CFG, m=2) == 4
    assert all(d < R.EPS_MOVE for d in ledger.distances())

    fresh = V.TwoTierStore()
    V.stream(fresh, np.zeros(3), CFG)
    for entry in ledger.entries:
        V.stream(fresh, entry.target_pose.translation, CFG)
        V.integrate(fresh, entry.kf, entry.target_pose, CFG)
    dd, dc, dw = V.compare_volumes(store, fresh)
    assert dd <= 1e-9 and dc <= 1e-9 and dw <= 1e-12


def test_finalize_corrects_exactly_the_moved_half():
    rng = np.random.default_rng(47)
    store, ledger = make_volume_ledger(rng, n_entries=4)
    for entry in ledger.entries[2:]:
        entry.target_pose = compose(
            Pose(np.eye(3), np.array([0.0, 0.0, 0.05])), entry.target_pose
        )
    assert R.finalize(store, ledger, CFG, m=3) == 2


def test_weight_conserved_through_correction():
    # no weight leaks: after a correction the total weight equals what a
    # fresh integration at the current poses deposits
    rng = np.random.default_rng(53)
    store, ledger = make_volume_ledger(rng, n_entries=3)
    shift = Pose(np.eye(3), np.array([0.03, 0.0, 0.0]))
    R.apply_pose_update(
        ledger, R.PoseUpdateEvent(at_frame=9, anchor_poses={0: shift})
    )
    j = R.select_window(ledger, 3)
    assert j == 1
    R.correct_window(store, ledger, j, 3, CFG)

    fresh = V.TwoTierStore()
    V.stream(fresh, np.zeros(3), CFG)
    for entry in ledger.entries:
        V.stream(fresh, entry.integrated_pose.translation, CFG)
        V.integrate(fresh, entry.kf, entry.integrated_pose, CFG)
    total, want = V.total_weight(store), V.total_weight(fresh)
    assert abs(total - want) <= 1e-9 * max(want, 1.0)
