"""Integration ledger and on-the-fly surface correction.

Every keyframe integrated into the volume leaves a ledger entry holding the
pose it was integrated at (T_i) and its current target pose (T_i'), kept
anchor-relative so that a pose update for one anchor moves all keyframes
expressed against it.  Correction picks the consecutive window of keyframes
whose summed scaled pose distance is largest, de-integrates it at the old
poses and re-integrates at the new ones — consecutive keyframes share
streaming spheres, which is what keeps the relocation count low compared to
correcting the most-moved keyframes one by one.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedEventError, VolumeInconsistencyError
from .geometry import DEFAULT_DISTANCE_SCALE, Pose, compose, pose_distance
from .volume import deintegrate, garbage_collect, integrate, stream

# Combined pose distance below which an entry counts as unmoved; suppresses
# churn from numerically identical pose rebroadcasts.
EPS_MOVE = 1e-6

DEFAULT_M = 10


@dataclass
class LedgerEntry:
    kf: object
    kf_id: int
    integrated_pose: Pose
    target_pose: Pose
    anchor_id: int
    rel_pose: Pose


@dataclass
class PoseUpdateEvent:
    """An external pose correction: updated absolute anchor poses, plus any
    newly declared DVO keyframes, visible from a given input frame on."""

    at_frame: int
    anchor_poses: dict = field(default_factory=dict)
    dvo_kf_flags: set = field(default_factory=set)

    def __post_init__(self):
        if self.at_frame < 1:
            raise MalformedEventError(
                f"event frame index must be >= 1, got {self.at_frame}"
            )
        for aid, pose in self.anchor_poses.items():
            if not isinstance(pose, Pose):
                raise MalformedEventError(
                    f"anchor {aid} pose is not a valid rigid transform"
                )


class IntegrationLedger:
    """Ordered record of all integrated keyframes plus the anchor registry."""

    def __init__(self):
        self.entries = []
        self.anchors = {}

    @property
    def K(self):
        return len(self.entries)

    def declare_anchor(self, anchor_id, pose):
        self.anchors[anchor_id] = pose.copy()

    def anchor_pose(self, anchor_id):
        try:
            return self.anchors[anchor_id]
        except KeyError:
            raise MalformedEventError(
                f"anchor id {anchor_id} was never declared"
            ) from None

    def add(self, kf, kf_id, anchor_id, rel_pose, integrated_pose):
        target = compose(self.anchor_pose(anchor_id), rel_pose)
        self.entries.append(
            LedgerEntry(
                kf=kf,
                kf_id=kf_id,
                integrated_pose=integrated_pose.copy(),
                target_pose=target,
                anchor_id=anchor_id,
                rel_pose=rel_pose.copy(),
            )
        )
        return self.entries[-1]

    def distances(self, s=DEFAULT_DISTANCE_SCALE):
        return np.array(
            [
                pose_distance(e.integrated_pose, e.target_pose, s)
                for e in self.entries
            ]
        )


def apply_pose_update(ledger, event):
    """Merge updated anchor poses and recompute every affected entry's
    target pose; returns how many targets actually changed."""
    for aid, pose in event.anchor_poses.items():
        ledger.anchors[aid] = pose.copy()
    changed = 0
    for entry in ledger.entries:
        anchor = ledger.anchor_pose(entry.anchor_id)
        new_target = compose(anchor, entry.rel_pose)
        if not (
            np.array_equal(new_target.rotation, entry.target_pose.rotation)
            and np.array_equal(
                new_target.translation, entry.target_pose.translation
            )
        ):
            entry.target_pose = new_target
            changed += 1
    return changed


def select_window(ledger, m, s=DEFAULT_DISTANCE_SCALE):
    """Start index (1-based) of the length-min(m, K) consecutive window with
    the largest summed scaled pose distance; None when nothing moved.
    Ties resolve to the smallest start index."""
    if m < 1:
        raise ValueError(f"window length must be >= 1, got {m}")
    k = ledger.K
    if k == 0:
        return None
    length = min(m, k)
    dist = ledger.distances(s)
    # Accumulate shifted slices so every window is summed left to right;
    # prefix-sum differences would round differently and flip near-ties.
    sums = dist[: k - length + 1].copy()
    for off in range(1, length):
        sums += dist[off : off + k - length + 1]
    j0 = int(np.argmax(sums))
    if sums[j0] < EPS_MOVE:
        return None
    return j0 + 1


def select_topk(ledger, m, s=DEFAULT_DISTANCE_SCALE):
    """Baseline: the min(m, K) most-moved entries (1-based indices), in
    descending distance order; ties resolve to the smaller index."""
    if m < 1:
        raise ValueError(f"selection count must be >= 1, got {m}")
    dist = ledger.distances(s)
    order = np.argsort(-dist, kind="stable")
    return [int(i) + 1 for i in order[: min(m, ledger.K)]]


def _correct_entries(store, entries, cfg):
    """De-integrate a run of entries at their old poses, then re-integrate
    at the target poses, with regular streaming throughout.  All-or-nothing:
    an inconsistency during removal re-integrates what was already removed
    and re-raises."""
    if not entries:
        return 0
    stream(store, entries[0].integrated_pose.translation, cfg)
    removed = []
    try:
        for entry in entries:
            stream(store, entry.integrated_pose.translation, cfg)
            deintegrate(store, entry.kf, entry.integrated_pose, cfg)
            removed.append(entry)
    except VolumeInconsistencyError:
        for entry in removed:
            stream(store, entry.integrated_pose.translation, cfg)
            integrate(store, entry.kf, entry.integrated_pose, cfg)
        raise
    stream(store, entries[0].target_pose.translation, cfg)
    for entry in entries:
        stream(store, entry.target_pose.translation, cfg)
        integrate(store, entry.kf, entry.target_pose, cfg)
        entry.integrated_pose = entry.target_pose.copy()
    garbage_collect(store)
    return len(entries)


def correct_window(store, ledger, j_star, m, cfg, next_center=None):
    """Run one window correction starting at 1-based entry index j_star;
    returns the number of entries re-integrated.  When next_center is given
    the streaming sphere is returned there afterwards, ready for the next
    integration."""
    if not 1 <= j_star <= ledger.K:
        raise ValueError(f"window start {j_star} outside ledger of {ledger.K}")
    entries = ledger.entries[j_star - 1 : j_star - 1 + min(m, ledger.K)]
    n = _correct_entries(store, entries, cfg)
    if next_center is not None:
        stream(store, next_center, cfg)
    return n


def correct_topk(store, ledger, picks, cfg, next_center=None):
    """Baseline correction: re-integrate each picked entry (1-based indices)
    individually, in the given order; returns the number corrected.  Unlike
    a window run, every entry pays its own streaming round trip."""
    corrected = 0
    for j in picks:
        if not 1 <= j <= ledger.K:
            raise ValueError(f"entry index {j} outside ledger of {ledger.K}")
        corrected += _correct_entries(store, ledger.entries[j - 1 : j], cfg)
    if next_center is not None:
        stream(store, next_center, cfg)
    return corrected


def finalize(store, ledger, cfg, m=DEFAULT_M, s=DEFAULT_DISTANCE_SCALE):
    """Correct every entry that still differs from its target pose, in
    ledger order, processed in runs of m; returns the count corrected."""
    moved = [
        e
        for e, d in zip(ledger.entries, ledger.distances(s))
        if d > EPS_MOVE
    ]
    corrected = 0
    for start in range(0, len(moved), m):
        corrected += _correct_entries(store, moved[start : start + m], cfg)
    return corrected
