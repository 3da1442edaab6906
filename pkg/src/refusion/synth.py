"""Deterministic synthetic RGB-D sequences from analytic scenes.

Scenes are unions of signed-distance primitives (a hollow room shell,
spheres, boxes) with flat albedos.  Depth comes from sphere tracing the
scene field, color from Lambert shading under one fixed directional light.
Trajectories interpolate waypoint poses; a configurable drift accumulates
on the reported (SLAM-style) trajectory while frames are always rendered
at ground truth, and scheduled correction events walk anchor poses back
toward truth — emulating a pose-graph backend publishing updates.
"""

import numpy as np
from dataclasses import dataclass, field

from scipy.ndimage import gaussian_filter

from .geometry import (
    Intrinsics,
    Pose,
    compose,
    pose_interpolate,
    ray_grid,
    rotation_from_axis_angle,
)
from .reintegration import PoseUpdateEvent

SPHERE_TRACE_STEPS = 256
SPHERE_TRACE_TOL = 1e-5
Z_MAX_DEFAULT = 10.0
SIGMA0_DEFAULT = 0.0015  # depth noise grows as sigma0 * z^2
DEFAULT_ANCHOR_INTERVAL = 10
AMBIENT = 0.3
DIFFUSE = 0.7
LIGHT_DIR = np.array([0.35, -0.25, -0.9]) / np.linalg.norm([0.35, -0.25, -0.9])
_NORMAL_EPS = 1e-4

DEFAULT_INTRINSICS = Intrinsics(
    fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480
)


# ---------------------------------------------------------------------------
# signed-distance primitives


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class BoxSolid:
    center: tuple
    half_extents: tuple
    albedo: tuple

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class RoomShell:
    """A hollow box enclosing the scene: free space inside, solid walls."""

    center: tuple
    half_extents: tuple
    albedo: tuple

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return -(outside + inside)


@dataclass
class AnalyticScene:
    """Union of primitives; the scene surface is the min-field zero set."""

    primitives: list

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")

    def sdf(self, points):
        points = np.asarray(points, dtype=np.float64)
        dists = np.stack([prim.sdf(points) for prim in self.primitives])
        return dists.min(axis=0)

    def albedo_at(self, points):
        points = np.asarray(points, dtype=np.float64)
        dists = np.stack([prim.sdf(points) for prim in self.primitives])
        which = dists.argmin(axis=0)
        table = np.array([prim.albedo for prim in self.primitives], dtype=np.float64)
        return table[which]

    def normal_at(self, points):
        points = np.asarray(points, dtype=np.float64)
        n = np.empty_like(points)
        for axis in range(3):
            step = np.zeros(3)
            step[axis] = _NORMAL_EPS
            n[..., axis] = self.sdf(points + step) - self.sdf(points - step)
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        norm[norm == 0.0] = 1.0
        return n / norm


def demo_scene():
    """Desk-scale furnished room: shell, two spheres, one box."""
    return AnalyticScene(
        primitives=[
            RoomShell(center=(0.0, 0.0, 1.5), half_extents=(2.6, 2.2, 1.5),
                      albedo=(205.0, 195.0, 180.0)),
            Sphere(center=(1.1, 0.6, 0.5), radius=0.5, albedo=(60.0, 110.0, 200.0)),
            Sphere(center=(-1.0, -0.8, 0.35), radius=0.35, albedo=(200.0, 80.0, 70.0)),
            BoxSolid(center=(-0.2, 1.3, 0.4), half_extents=(0.5, 0.35, 0.4),
                     albedo=(90.0, 170.0, 90.0)),
        ]
    )


# ---------------------------------------------------------------------------
# trajectory plumbing


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose at eye, optical axis toward target, image
    x right / y down in the usual camera sense."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n == 0.0:
        raise ValueError("look_at target coincides with eye")
    z = fwd / n
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValueError("view direction is parallel to up")
    x /= nx
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def orbit_waypoints(n, radius=1.2, height=1.3, center=(0.0, 0.0), outward=True):
    """Poses on a horizontal circle, looking radially outward (at the walls)
    or inward across the room; the first waypoint repeats at the end so the
    path closes into a loop."""
    if n < 2:
        raise ValueError(f"need at least 2 waypoints, got {n}")
    cx, cy = center
    points = []
    for i in range(n + 1):
        ang = 2.0 * np.pi * (i % n) / n
        eye = np.array([cx + radius * np.cos(ang), cy + radius * np.sin(ang), height])
        if outward:
            target = np.array([cx + 2.0 * radius * np.cos(ang),
                               cy + 2.0 * radius * np.sin(ang), height])
        else:
            target = np.array([cx, cy, height])
        points.append(look_at_pose(eye, target))
    return points


@dataclass
class TrajectorySpec:
    """Waypoint path plus drift and correction behavior.

    ``drift_rate`` is (meters, radians) of pose error accumulated per frame
    along a seed-chosen fixed direction; ``correction_schedule`` lists
    (frame_index, fraction) pairs, each removing that fraction of the drift
    accumulated so far from every declared anchor.
    """

    waypoints: list
    frames_per_segment: int = 20
    drift_rate: tuple = (0.0, 0.0)
    correction_schedule: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise ValueError("need at least two waypoints")
        if self.frames_per_segment < 1:
            raise ValueError("frames_per_segment must be >= 1")
        if len(self.drift_rate) != 2 or min(self.drift_rate) < 0.0:
            raise ValueError("drift_rate must be (meters, radians), both >= 0")
        prev = 0
        for frame, fraction in self.correction_schedule:
            if frame <= prev:
                raise ValueError("correction frames must be increasing")
            if not 0.0 <= fraction <= 1.0:
                raise ValueError(f"correction fraction {fraction} outside [0, 1]")
            prev = frame

    @property
    def n_frames(self):
        return (len(self.waypoints) - 1) * self.frames_per_segment + 1

    def pose_at(self, index):
        """Ground-truth pose of 1-based frame ``index``."""
        g = (index - 1) / self.frames_per_segment
        seg = min(int(np.floor(g)), len(self.waypoints) - 2)
        alpha = g - seg
        return pose_interpolate(self.waypoints[seg], self.waypoints[seg + 1], alpha)


# ---------------------------------------------------------------------------
# rendering


def render_depth(scene, pose, intr, z_max=Z_MAX_DEFAULT,
                 steps=SPHERE_TRACE_STEPS, tol=SPHERE_TRACE_TOL):
    """Sphere-traced z-depth map; misses and beyond-range hits are 0."""
    dir_x, dir_y = ray_grid(intr)
    d_cam = np.stack([dir_x, dir_y, np.ones_like(dir_x)], axis=-1)
    norms = np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_cam = d_cam / norms
    d_world = d_cam @ pose.rotation.T
    flat_dir = d_world.reshape(-1, 3)
    origin = pose.translation

    n = flat_dir.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    alive = np.arange(n)
    # each ray may march at most this far before it must have left the scene
    t_cap = z_max * norms.reshape(-1)
    for _ in range(steps):
        p = origin + t[alive, None] * flat_dir[alive]
        s = scene.sdf(p)
        converged = s < tol
        hit[alive[converged]] = True
        t[alive] += np.maximum(s, 0.0)
        alive = alive[~converged & (t[alive] <= t_cap[alive])]
        if alive.size == 0:
            break

    zdir = d_cam[..., 2].reshape(-1)
    depth = np.where(hit, t * zdir, 0.0)
    depth[depth > z_max] = 0.0
    return depth.reshape(intr.height, intr.width)


def render_color(scene, pose, intr, depth, light_dir=LIGHT_DIR):
    """Flat-albedo Lambert shading of the hit points; invalid pixels black."""
    color = np.zeros((intr.height, intr.width, 3))
    valid = depth > 0.0
    if not valid.any():
        return color
    dir_x, dir_y = ray_grid(intr)
    z = depth[valid]
    p_cam = np.stack([dir_x[valid] * z, dir_y[valid] * z, z], axis=1)
    p_world = p_cam @ pose.rotation.T + pose.translation
    albedo = scene.albedo_at(p_world)
    normal = scene.normal_at(p_world)
    lambert = AMBIENT + DIFFUSE * np.maximum(0.0, normal @ (-light_dir))
    color[valid] = np.clip(albedo * lambert[:, None], 0.0, 255.0)
    return color


def add_noise(depth, seed, sigma0=SIGMA0_DEFAULT):
    """Depth-dependent Gaussian noise, sigma(z) = sigma0 * z^2.

    Invalid (zero) pixels stay invalid; samples that would cross zero are
    clamped invalid rather than reported as negative range.
    """
    noisy = depth.copy()
    if sigma0 == 0.0:
        return noisy
    rng = np.random.default_rng(seed)
    valid = depth > 0.0
    z = depth[valid]
    noisy[valid] = np.maximum(z + rng.standard_normal(z.shape) * sigma0 * z * z, 0.0)
    return noisy


# ---------------------------------------------------------------------------
# sequence assembly


@dataclass(frozen=True)
class RenderedFrame:
    index: int
    depth: np.ndarray
    color: np.ndarray


@dataclass
class SyntheticSequence:
    frames: list
    gt_poses: dict
    drifted_poses: dict
    events: list
    intrinsics: Intrinsics

    @property
    def n_frames(self):
        return len(self.frames)


def make_sequence(scene, spec, intr, seed=0, noise_sigma0=0.0, blur_sigma_max=0.0,
                  anchor_interval=DEFAULT_ANCHOR_INTERVAL, z_max=Z_MAX_DEFAULT,
                  render_color_images=True):
    """Render the sequence and fabricate the backend's event stream.

    Frames are rendered at ground truth.  The reported trajectory composes
    an accumulating drift onto truth; anchors are declared every
    ``anchor_interval`` frames at their drifted poses, and each scheduled
    correction interpolates every declared anchor back toward its true pose
    by the scheduled fraction.
    """
    rng = np.random.default_rng(seed)
    drift_t, drift_r = spec.drift_rate
    t_dir = rng.standard_normal(3)
    t_dir /= np.linalg.norm(t_dir)
    r_axis = rng.standard_normal(3)
    r_axis /= np.linalg.norm(r_axis)
    step = Pose(rotation_from_axis_angle(r_axis, drift_r), drift_t * t_dir)

    schedule = {frame: fraction for frame, fraction in spec.correction_schedule}
    frames = []
    gt_poses = {}
    drifted_poses = {}
    events = []
    anchor_true = {}
    anchor_believed = {}
    drift = Pose.identity()

    for index in range(1, spec.n_frames + 1):
        gt = spec.pose_at(index)
        if scene.sdf(gt.translation[None, :])[0] <= 0.0:
            raise ValueError(f"camera at frame {index} is not in free space")
        if index > 1:
            drift = compose(step, drift)
        drifted = compose(drift, gt)
        gt_poses[index] = gt
        drifted_poses[index] = drifted

        depth = render_depth(scene, gt, intr, z_max=z_max)
        if noise_sigma0 > 0.0:
            depth = add_noise(depth, seed=(seed, 7, index), sigma0=noise_sigma0)
        if render_color_images:
            color = render_color(scene, gt, intr, depth)
            if blur_sigma_max > 0.0:
                sigma = rng.uniform(0.0, blur_sigma_max)
                color = gaussian_filter(color, sigma=(sigma, sigma, 0.0))
        else:
            color = None
        frames.append(RenderedFrame(index=index, depth=depth, color=color))

        if (index - 1) % anchor_interval == 0:
            anchor_true[index] = gt
            anchor_believed[index] = drifted
            events.append(
                PoseUpdateEvent(
                    at_frame=index,
                    anchor_poses={index: drifted.copy()},
                    dvo_kf_flags={index},
                )
            )
        if index in schedule:
            fraction = schedule[index]
            updated = {}
            for aid in anchor_believed:
                corrected = pose_interpolate(
                    anchor_believed[aid], anchor_true[aid], fraction
                )
                anchor_believed[aid] = corrected
                updated[aid] = corrected.copy()
            events.append(
                PoseUpdateEvent(at_frame=index, anchor_poses=updated,
                                dvo_kf_flags=set())
            )

    return SyntheticSequence(
        frames=frames,
        gt_poses=gt_poses,
        drifted_poses=drifted_poses,
        events=events,
        intrinsics=intr,
    )
