"""Keyframe fusion: collapse bursts of RGB-D frames into single keyframes.

Depth is fused with a running weighted average in the keyframe's view;
color is finalized once per keyframe as a blur-aware weighted median over
all member observations.  Keyframes keep their member color buffers only
until color finalization — afterwards a keyframe is just five planes
(depth, weight, RGB), which is where the memory saving over storing every
frame comes from.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter1d

from .errors import UndefinedOverlapError
from .geometry import (
    Intrinsics,
    Pose,
    compose,
    inverse,
    ray_grid,
    rotation_angle,
    transform,
)

DELTA_DISC = 0.1
DELTA_OCCL = 0.05
UNSHARP_SIGMA = 1.5
UNSHARP_GAIN = 0.5

KF_CONST = "KF_CONST"
KF_DVO = "KF_DVO"
KF_DIST = "KF_DIST"
KF_OVRLP = "KF_OVRLP"
STRATEGY_KINDS = (KF_CONST, KF_DVO, KF_DIST, KF_OVRLP)


@dataclass
class FrameObservation:
    """One registered RGB-D input frame with its current pose estimate."""

    index: int
    color: np.ndarray
    depth: np.ndarray
    pose: Pose

    def __post_init__(self):
        if self.index < 1:
            raise ValueError(f"frame index must be >= 1, got {self.index}")
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ValueError("depth must be a 2-d map")
        if self.color is not None:
            self.color = np.asarray(self.color)
            if self.color.shape[:2] != self.depth.shape:
                raise ValueError(
                    f"color {self.color.shape[:2]} and depth "
                    f"{self.depth.shape} dimensions differ"
                )
        bad = self.depth[np.isfinite(self.depth)]
        if bad.size and bad.min() < 0.0:
            raise ValueError("depth values must be >= 0 (0 = invalid)")


@dataclass(frozen=True)
class KeyframeStrategy:
    kind: str = KF_CONST
    kappa: int = 20
    delta_r: float = 0.35
    delta_t: float = 0.3
    overlap_min: float = 0.7

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.kappa < 1:
            raise ValueError(f"kappa must be >= 1, got {self.kappa}")
        if self.delta_r <= 0 or self.delta_t <= 0:
            raise ValueError("KF_DIST thresholds must be > 0")
        if not 0.0 < self.overlap_min < 1.0:
            raise ValueError(
                f"overlap_min must be in (0,1), got {self.overlap_min}"
            )


@dataclass
class _MemberObservation:
    """Per-member buffers kept until color finalization."""

    index: int
    color: np.ndarray  # deblurred, float, HxWx3 (or None)
    depth: np.ndarray
    pose: Pose
    blur_weight: float
    weight_map: np.ndarray


@dataclass
class Keyframe:
    intrinsics: Intrinsics
    pose: Pose
    anchor_id: int
    rel_pose: Pose
    depth: np.ndarray
    weight: np.ndarray
    color: np.ndarray = None
    color_valid: np.ndarray = None
    members: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    kf_id: int = -1

    @property
    def finalized(self):
        return self.observations is None


def new_keyframe(frame, intrinsics, anchor_id=0, anchor_pose=None):
    """Open a keyframe at the frame's arrival pose, expressed relative to
    its governing anchor."""
    if anchor_pose is None:
        anchor_pose = Pose.identity()
    shape = (intrinsics.height, intrinsics.width)
    if frame.depth.shape != shape:
        raise ValueError(
            f"frame depth {frame.depth.shape} does not match intrinsics {shape}"
        )
    return Keyframe(
        intrinsics=intrinsics,
        pose=frame.pose.copy(),
        anchor_id=anchor_id,
        rel_pose=compose(inverse(anchor_pose), frame.pose),
        depth=np.zeros(shape),
        weight=np.zeros(shape),
    )


# ---------------------------------------------------------------------------
# per-frame depth weighting


def normal_map(depth, intr):
    """Unit surface normals from central differences of unprojected points.

    Normals point along the viewing direction (away from the camera) for
    front-facing geometry.  Border pixels and pixels with any invalid
    neighbor get a zero normal.
    """
    h, w = depth.shape
    dir_x, dir_y = ray_grid(intr)
    px = dir_x * depth
    py = dir_y * depth
    pz = depth

    n = np.zeros((h, w, 3))
    if h < 3 or w < 3:
        return n
    c = np.s_[1:-1, 1:-1]
    du = np.stack(
        [
            px[1:-1, 2:] - px[1:-1, :-2],
            py[1:-1, 2:] - py[1:-1, :-2],
            pz[1:-1, 2:] - pz[1:-1, :-2],
        ],
        axis=-1,
    )
    dv = np.stack(
        [
            px[2:, 1:-1] - px[:-2, 1:-1],
            py[2:, 1:-1] - py[:-2, 1:-1],
            pz[2:, 1:-1] - pz[:-2, 1:-1],
        ],
        axis=-1,
    )
    cross = np.cross(du, dv)
    norm = np.linalg.norm(cross, axis=-1)
    ok = (
        (depth[c] > 0)
        & (depth[1:-1, 2:] > 0)
        & (depth[1:-1, :-2] > 0)
        & (depth[2:, 1:-1] > 0)
        & (depth[:-2, 1:-1] > 0)
        & (norm > 0)
    )
    interior = np.zeros_like(cross)
    interior[ok] = cross[ok] / norm[ok][:, None]
    n[c] = interior
    return n


def depth_sample_weight(depth, intr, normals=None):
    """Per-pixel fusion weight w_z = cos(theta) / Z^2, zero where invalid.

    theta is the angle between the surface normal and the viewing ray
    through the pixel; grazing or back-facing samples get zero weight.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if normals is None:
        normals = normal_map(depth, intr)
    dir_x, dir_y = ray_grid(intr)
    ray_norm = np.sqrt(dir_x ** 2 + dir_y ** 2 + 1.0)
    cos_theta = (
        normals[..., 0] * dir_x + normals[..., 1] * dir_y + normals[..., 2]
    ) / ray_norm
    w = np.zeros_like(depth)
    valid = (depth > 0) & np.isfinite(depth) & (cos_theta > 0)
    w[valid] = cos_theta[valid] / depth[valid] ** 2
    return w


def discontinuity_mask(depth, delta_disc=DELTA_DISC):
    """True where a pixel should be discarded: next to a depth jump larger
    than delta_disc, next to invalid depth, or itself invalid."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    valid = depth > 0
    mask = ~valid
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            if dv == 0 and du == 0:
                continue
            src = np.s_[
                max(dv, 0) : h + min(dv, 0), max(du, 0) : w + min(du, 0)
            ]
            dst = np.s_[
                max(-dv, 0) : h + min(-dv, 0), max(-du, 0) : w + min(-du, 0)
            ]
            nb_valid = valid[src]
            jump = np.abs(depth[dst] - depth[src]) > delta_disc
            mask[dst] |= valid[dst] & (~nb_valid | jump)
    return mask


# ---------------------------------------------------------------------------
# depth fusion


def fuse_depth(kf, frame, delta_disc=DELTA_DISC):
    """Warp one frame into the keyframe and apply the running weighted
    average per target pixel; the member's color buffers are retained for
    later color finalization."""
    if kf.finalized:
        raise ValueError("keyframe color already finalized; cannot add frames")
    intr = kf.intrinsics
    w_map = depth_sample_weight(frame.depth, intr)
    w_map[discontinuity_mask(frame.depth, delta_disc)] = 0.0
    valid = w_map > 0.0

    if valid.any():
        dir_x, dir_y = ray_grid(intr)
        z = frame.depth[valid]
        p_cam = np.stack([dir_x[valid] * z, dir_y[valid] * z, z], axis=1)
        rel = compose(inverse(kf.pose), frame.pose)
        p_star = transform(rel, p_cam)
        zs = p_star[:, 2]
        front = zs > 0
        p_star = p_star[front]
        zs = zs[front]
        ws = w_map[valid][front]
        u = np.floor(intr.fx * p_star[:, 0] / zs + intr.cx + 0.5)
        v = np.floor(intr.fy * p_star[:, 1] / zs + intr.cy + 0.5)
        inb = (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
        flat = (
            v[inb].astype(np.int64) * intr.width + u[inb].astype(np.int64)
        )
        acc_wz = np.zeros(intr.height * intr.width)
        acc_w = np.zeros(intr.height * intr.width)
        np.add.at(acc_wz, flat, ws[inb] * zs[inb])
        np.add.at(acc_w, flat, ws[inb])
        acc_wz = acc_wz.reshape(intr.height, intr.width)
        acc_w = acc_w.reshape(intr.height, intr.width)
        hit = acc_w > 0
        kf.depth[hit] = (
            kf.depth[hit] * kf.weight[hit] + acc_wz[hit]
        ) / (kf.weight[hit] + acc_w[hit])
        kf.weight[hit] += acc_w[hit]

    if frame.color is not None:
        gray = grayscale(frame.color)
        member_color = unsharp_mask(frame.color)
        blur_weight = blurriness(gray)
    else:
        member_color = None
        blur_weight = 1.0
    kf.members.append(frame.index)
    kf.observations.append(
        _MemberObservation(
            index=frame.index,
            color=member_color,
            depth=frame.depth.copy(),
            pose=frame.pose.copy(),
            blur_weight=blur_weight,
            weight_map=w_map,
        )
    )
    return kf


# ---------------------------------------------------------------------------
# color: deblurring, blur weighting, weighted-median fusion


def grayscale(image):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def blurriness(image):
    """Perceptual sharpness in [0,1] (1 = sharp) via the re-blur comparison
    scheme: blur the image strongly, compare how much the local gradients
    survive.  An image with no gradients at all counts as sharp."""
    f = np.asarray(image, dtype=np.float64)
    if f.ndim != 2:
        f = grayscale(f)

    scores = []
    for axis in (0, 1):
        if f.shape[axis] < 2:
            continue
        b = uniform_filter1d(f, size=9, axis=axis, mode="nearest")
        d_f = np.abs(np.diff(f, axis=axis))
        d_b = np.abs(np.diff(b, axis=axis))
        v = np.maximum(0.0, d_f - d_b)
        s_f = d_f.sum()
        if s_f > 0:
            scores.append((s_f - v.sum()) / s_f)
    if not scores:
        return 1.0
    blur = max(scores)
    return float(min(max(1.0 - blur, 0.0), 1.0))


def unsharp_mask(image, sigma=UNSHARP_SIGMA, gain=UNSHARP_GAIN):
    """Per-channel unsharp masking, clamped to the 8-bit range."""
    img = np.asarray(image, dtype=np.float64)
    if gain == 0.0:
        return img.copy()
    if img.ndim == 2:
        low = gaussian_filter(img, sigma, mode="nearest")
    else:
        low = np.empty_like(img)
        for ch in range(img.shape[2]):
            low[..., ch] = gaussian_filter(img[..., ch], sigma, mode="nearest")
    return np.clip(img + gain * (img - low), 0.0, 255.0)


def weighted_median(values, weights):
    """Smallest value whose cumulative weight reaches half the total; at an
    exact split the lower value wins."""
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if values.size == 0 or weights.sum() <= 0:
        raise ValueError("weighted median of no observations")
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    half = cum[-1] / 2.0
    return float(values[order][np.searchsorted(cum, half)])


def _bilinear(img, u, v):
    h, w = img.shape[:2]
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u0 = np.clip(u0, 0, w - 1)
    v0 = np.clip(v0, 0, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    top = img[v0, u0] * (1 - fu) + img[v0, u1] * fu
    bot = img[v1, u0] * (1 - fu) + img[v1, u1] * fu
    return top * (1 - fv) + bot * fv


def fuse_color(kf, delta_occl=DELTA_OCCL):
    """Finalize the keyframe color as the per-channel weighted median of
    all member observations, then drop the member buffers.

    Each valid keyframe pixel is warped into every member frame; a sample
    counts only when the projection lands in bounds, the member's own depth
    agrees with the warped depth within delta_occl, and its fusion weight is
    positive.  Sample weight is blur_weight * member w_z.  Pixels with no
    surviving sample are marked colorless (color_valid False, color 0).
    """
    if kf.finalized:
        raise ValueError("keyframe color already finalized")
    intr = kf.intrinsics
    h, w = kf.depth.shape
    kf.color = np.zeros((h, w, 3))
    kf.color_valid = np.zeros((h, w), dtype=bool)

    valid = kf.weight > 0.0
    members = [m for m in kf.observations if m.color is not None]
    if valid.any() and members:
        vv, uu = np.nonzero(valid)
        z = kf.depth[valid]
        dir_x, dir_y = ray_grid(intr)
        p_star = np.stack([dir_x[valid] * z, dir_y[valid] * z, z], axis=1)
        n_pix = p_star.shape[0]
        n_mem = len(members)

        chunk = max(1, 4_000_000 // n_mem)
        for s in range(0, n_pix, chunk):
            p = p_star[s : s + chunk]
            vals = np.zeros((n_mem, p.shape[0], 3))
            wts = np.zeros((n_mem, p.shape[0]))
            for m, obs in enumerate(members):
                rel = compose(inverse(obs.pose), kf.pose)
                q = transform(rel, p)
                qz = q[:, 2]
                front = qz > 0
                u = np.full(p.shape[0], -1.0)
                v = np.full(p.shape[0], -1.0)
                u[front] = intr.fx * q[front, 0] / qz[front] + intr.cx
                v[front] = intr.fy * q[front, 1] / qz[front] + intr.cy
                inb = (
                    front
                    & (u >= 0)
                    & (u <= intr.width - 1)
                    & (v >= 0)
                    & (v <= intr.height - 1)
                )
                if not inb.any():
                    continue
                un = np.floor(u[inb] + 0.5).astype(np.int64)
                vn = np.floor(v[inb] + 0.5).astype(np.int64)
                zn = obs.depth[vn, un]
                w_c = obs.blur_weight * obs.weight_map[vn, un]
                good = (
                    (zn > 0)
                    & (np.abs(zn - qz[inb]) <= delta_occl)
                    & (w_c > 0)
                )
                tgt = np.flatnonzero(inb)[good]
                vals[m, tgt] = _bilinear(obs.color, u[tgt], v[tgt])
                wts[m, tgt] = w_c[good]

            total = wts.sum(axis=0)
            has = total > 0
            if has.any():
                half = total[has] / 2.0
                med = np.empty((has.sum(), 3))
                for ch in range(3):
                    order = np.argsort(vals[:, has, ch], axis=0, kind="stable")
                    sw = np.take_along_axis(wts[:, has], order, axis=0)
                    cum = np.cumsum(sw, axis=0)
                    pick = (cum >= half[None, :]).argmax(axis=0)
                    sv = np.take_along_axis(vals[:, has, ch], order, axis=0)
                    med[:, ch] = np.take_along_axis(
                        sv, pick[None, :], axis=0
                    )[0]
                rows = vv[s : s + chunk][has]
                cols = uu[s : s + chunk][has]
                kf.color[rows, cols] = med
                kf.color_valid[rows, cols] = True

    kf.observations = None
    return kf


# ---------------------------------------------------------------------------
# keyframe boundary decisions


def overlap_ratio(kf, frame, delta_occl=DELTA_OCCL):
    """Fraction of the keyframe's valid pixels visible in the frame: the
    warp lands in bounds, the frame has depth there, and it agrees with the
    warped depth within delta_occl."""
    intr = kf.intrinsics
    valid = kf.weight > 0.0
    total = int(valid.sum())
    if total == 0:
        raise UndefinedOverlapError("keyframe has no valid depth pixels")
    z = kf.depth[valid]
    dir_x, dir_y = ray_grid(intr)
    p_star = np.stack([dir_x[valid] * z, dir_y[valid] * z, z], axis=1)
    rel = compose(inverse(frame.pose), kf.pose)
    q = transform(rel, p_star)
    qz = q[:, 2]
    front = qz > 0
    if not front.any():
        return 0.0
    u = np.floor(intr.fx * q[front, 0] / qz[front] + intr.cx + 0.5)
    v = np.floor(intr.fy * q[front, 1] / qz[front] + intr.cy + 0.5)
    inb = (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    if not inb.any():
        return 0.0
    zn = frame.depth[v[inb].astype(np.int64), u[inb].astype(np.int64)]
    agree = (zn > 0) & (np.abs(zn - qz[front][inb]) <= delta_occl)
    return float(agree.sum()) / total


def keyframe_decision(strategy, kf, frame, dvo_kf_flags=None):
    """True when a new keyframe must start before fusing this frame."""
    if not kf.members:
        return False
    if strategy.kind == KF_CONST:
        return len(kf.members) >= strategy.kappa
    if strategy.kind == KF_DVO:
        return bool(dvo_kf_flags) and frame.index in dvo_kf_flags
    if strategy.kind == KF_DIST:
        rel = compose(inverse(kf.pose), frame.pose)
        return (
            rotation_angle(rel.rotation) > strategy.delta_r
            or float(np.linalg.norm(rel.translation)) > strategy.delta_t
        )
    if strategy.kind == KF_OVRLP:
        return overlap_ratio(kf, frame) < strategy.overlap_min
    raise ValueError(f"unknown strategy kind {strategy.kind!r}")
