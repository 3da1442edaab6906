"""Sparse voxel-hashed truncated signed-distance volume.

The volume is a collection of 8x8x8 voxel blocks addressed by integer block
coordinate and kept in a two-tier store: an *active* tier (stand-in for
device memory, holding every block whose center lies inside a sphere around
the camera) and a *host* tier for everything streamed out.  Integration and
de-integration recompute the set of touched blocks deterministically from
the keyframe and its pose, which is what makes de-integration an exact
inverse — no per-voxel journal is kept.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import StreamingContractError, VolumeInconsistencyError
from .geometry import Pose, ray_grid
from .kernels import fuse_block

BLOCK_SIDE = 8
BLOCK_VOXELS = BLOCK_SIDE ** 3

# Weights below this are zeroed after de-integration; it absorbs the double
# rounding left behind by the remove/re-add arithmetic.
EPS_W = 1e-9

# Rays are sampled from this camera depth onward when computing footprints;
# voxels closer to the image plane than a quarter voxel cannot matter.
_MIN_SAMPLE_Z_FACTOR = 0.25

_HASH_PRIMES = (73856093, 19349669, 83492791)

# Packing offset for block coordinates: each axis must fit in 21 bits.
_PACK_BIAS = 1 << 20
_PACK_SPAN = 1 << 21


@dataclass(frozen=True)
class VolumeConfig:
    """Geometry of the volume and of the simulated streaming sphere."""

    voxel_size: float = 0.01
    mu: float = 0.06
    stream_radius: float = 3.0
    hash_buckets: int = 1 << 16

    def __post_init__(self):
        if not self.voxel_size > 0.0:
            raise ValueError(f"voxel_size must be > 0, got {self.voxel_size}")
        if not self.mu >= 2.0 * self.voxel_size:
            raise ValueError(
                f"mu must be at least two voxels ({2.0 * self.voxel_size}), "
                f"got {self.mu}"
            )
        if not self.stream_radius > self.mu:
            raise ValueError(
                f"stream_radius must exceed mu={self.mu}, "
                f"got {self.stream_radius}"
            )
        if self.hash_buckets <= 0:
            raise ValueError(f"hash_buckets must be > 0, got {self.hash_buckets}")

    @property
    def block_span(self):
        return BLOCK_SIDE * self.voxel_size


class VoxelBlock:
    """One 8x8x8 brick of (D, W, C) voxels, flat arrays, x fastest."""

    __slots__ = ("coord", "d", "w", "c")

    def __init__(self, coord, d=None, w=None, c=None):
        self.coord = (int(coord[0]), int(coord[1]), int(coord[2]))
        self.d = np.zeros(BLOCK_VOXELS) if d is None else d
        self.w = np.zeros(BLOCK_VOXELS) if w is None else w
        self.c = np.zeros((BLOCK_VOXELS, 3)) if c is None else c

    def copy(self):
        return VoxelBlock(self.coord, self.d.copy(), self.w.copy(), self.c.copy())


def block_hash(coord, buckets):
    """Spatial hash: XOR of per-axis prime products, reduced mod buckets."""
    if buckets <= 0:
        raise ValueError(f"buckets must be > 0, got {buckets}")
    h = (
        int(coord[0]) * _HASH_PRIMES[0]
        ^ int(coord[1]) * _HASH_PRIMES[1]
        ^ int(coord[2]) * _HASH_PRIMES[2]
    )
    return h % buckets


class TwoTierStore:
    """Active/host block maps plus streaming cost counters.

    The two tiers are dicts keyed by block coordinate tuple; their key sets
    stay disjoint.  ``last_center`` is where :func:`stream` last positioned
    the active sphere (``None`` until the first call).
    """

    def __init__(self):
        self.active = {}
        self.host = {}
        self.blocks_streamed_in = 0
        self.blocks_streamed_out = 0
        self.sphere_relocations = 0
        self.last_center = None

    def block_count(self):
        return len(self.active) + len(self.host)

    def find(self, coord):
        b = self.active.get(coord)
        if b is None:
            b = self.host.get(coord)
        return b

    def iter_blocks(self):
        yield from self.active.items()
        yield from self.host.items()


@dataclass(frozen=True)
class IntegrationRecord:
    """What one integrate() call did; the correction ledger stores these."""

    kf: object
    pose: Pose
    new_blocks: frozenset = field(default_factory=frozenset)
    blocks_touched: int = 0
    voxels_updated: int = 0


def _pack_coords(bx, by, bz):
    kx = bx + _PACK_BIAS
    ky = by + _PACK_BIAS
    kz = bz + _PACK_BIAS
    return (kx << 42) | (ky << 21) | kz


def _unpack_coords(keys):
    kz = keys & (_PACK_SPAN - 1)
    ky = (keys >> 21) & (_PACK_SPAN - 1)
    kx = keys >> 42
    return kx - _PACK_BIAS, ky - _PACK_BIAS, kz - _PACK_BIAS


def keyframe_block_footprint(kf, pose, cfg):
    """Blocks a keyframe can touch, as a sorted list of coordinate tuples.

    Every valid depth ray is sampled through its truncation band
    [Z - mu, Z + mu] at voxel_size steps (both band ends included) and the
    samples are binned to block coordinates.  The result depends only on
    (kf, pose, cfg), so integrate and deintegrate walk identical block sets.
    """
    intr = kf.intrinsics
    depth = np.asarray(kf.depth, dtype=np.float64)
    weight = np.asarray(kf.weight, dtype=np.float64)
    dir_x, dir_y = ray_grid(intr)
    valid = (weight > 0.0) & np.isfinite(depth) & (depth > 0.0)
    if not valid.any():
        return []

    z = depth[valid]
    xn = dir_x[valid]
    yn = dir_y[valid]
    zlo = np.maximum(z - cfg.mu, _MIN_SAMPLE_Z_FACTOR * cfg.voxel_size)
    zhi = z + cfg.mu
    n_steps = int(np.ceil(2.0 * cfg.mu / cfg.voxel_size)) + 1
    steps = np.arange(n_steps) * cfg.voxel_size

    rot = pose.rotation
    t = pose.translation
    inv_span = 1.0 / cfg.block_span

    keys = []
    chunk = 131072
    for s in range(0, z.size, chunk):
        zs = np.minimum(zlo[s : s + chunk, None] + steps[None, :], zhi[s : s + chunk, None])
        px = xn[s : s + chunk, None] * zs
        py = yn[s : s + chunk, None] * zs
        wx = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * zs + t[0]
        wy = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * zs + t[1]
        wz = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * zs + t[2]
        bx = np.floor(wx * inv_span).astype(np.int64).ravel()
        by = np.floor(wy * inv_span).astype(np.int64).ravel()
        bz = np.floor(wz * inv_span).astype(np.int64).ravel()
        keys.append(np.unique(_pack_coords(bx, by, bz)))

    merged = np.unique(np.concatenate(keys))
    bx, by, bz = _unpack_coords(merged)
    return [
        (int(bx[i]), int(by[i]), int(bz[i])) for i in range(merged.size)
    ]


def _block_center(coord, cfg):
    span = cfg.block_span
    return (
        (coord[0] + 0.5) * span,
        (coord[1] + 0.5) * span,
        (coord[2] + 0.5) * span,
    )


def _center_distance(coord, center, cfg):
    cx, cy, cz = _block_center(coord, cfg)
    return float(np.sqrt(
        (cx - center[0]) ** 2 + (cy - center[1]) ** 2 + (cz - center[2]) ** 2
    ))


def allocate_blocks(store, kf, pose, cfg):
    """Ensure every block in the keyframe's footprint exists in the active
    tier; returns the set of coordinates that were newly created."""
    coords = keyframe_block_footprint(kf, pose, cfg)
    return _allocate_footprint(store, coords, cfg)


def _allocate_footprint(store, coords, cfg):
    if not coords:
        return set()
    if store.last_center is None:
        raise StreamingContractError(
            "stream() must position the active sphere before allocation"
        )
    new = set()
    for coord in coords:
        if coord in store.active:
            continue
        dist = _center_distance(coord, store.last_center, cfg)
        if coord in store.host:
            raise StreamingContractError(
                f"block {coord} needed for integration sits in the host tier "
                f"(center distance {dist:.3f} m vs sphere radius "
                f"{cfg.stream_radius} m); stream() was not positioned at the "
                "current camera"
            )
        if dist > cfg.stream_radius:
            raise StreamingContractError(
                f"block {coord} lies {dist:.3f} m from the streaming center, "
                f"outside the active sphere of radius {cfg.stream_radius} m"
            )
        store.active[coord] = VoxelBlock(coord)
        new.add(coord)
    return new


def _kernel_args(kf, pose, cfg):
    intr = kf.intrinsics
    depth = np.ascontiguousarray(kf.depth, dtype=np.float64)
    weight = np.ascontiguousarray(kf.weight, dtype=np.float64)
    if getattr(kf, "color", None) is not None:
        color = np.ascontiguousarray(kf.color, dtype=np.float64)
    else:
        color = np.zeros((intr.height, intr.width, 3))
    rot_wc = np.ascontiguousarray(pose.rotation.T, dtype=np.float64)
    t = pose.translation
    return (
        rot_wc,
        float(t[0]),
        float(t[1]),
        float(t[2]),
        float(intr.fx),
        float(intr.fy),
        float(intr.cx),
        float(intr.cy),
        int(intr.width),
        int(intr.height),
        depth,
        weight,
        color,
    )


def _fuse_one(block, coord, args, cfg, remove):
    span = cfg.block_span
    return fuse_block(
        block.d,
        block.w,
        block.c,
        coord[0] * span,
        coord[1] * span,
        coord[2] * span,
        cfg.voxel_size,
        *args,
        cfg.mu,
        EPS_W,
        remove,
    )


def integrate(store, kf, pose, cfg):
    """Fuse one keyframe into the volume with the running weighted average;
    returns a record suitable for the correction ledger."""
    coords = keyframe_block_footprint(kf, pose, cfg)
    new = _allocate_footprint(store, coords, cfg)
    args = _kernel_args(kf, pose, cfg)
    total = 0
    for coord in coords:
        n = _fuse_one(store.active[coord], coord, args, cfg, False)
        total += n
    return IntegrationRecord(
        kf=kf,
        pose=pose.copy(),
        new_blocks=frozenset(new),
        blocks_touched=len(coords),
        voxels_updated=total,
    )


def deintegrate(store, kf, pose, cfg):
    """Remove a previously integrated keyframe (same pose) from the volume.

    The touched blocks are recomputed from (kf, pose); blocks freed by
    garbage collection in the meantime are recreated empty, which is safe
    because a block still holding this keyframe's weight can never be
    all-zero.  If any voxel would go negative the blocks already processed
    are re-added and an inconsistency error is raised, so the volume is left
    as it was (up to double rounding).
    """
    coords = keyframe_block_footprint(kf, pose, cfg)
    _allocate_footprint(store, coords, cfg)
    args = _kernel_args(kf, pose, cfg)
    done = []
    for coord in coords:
        n = _fuse_one(store.active[coord], coord, args, cfg, True)
        if n < 0:
            for prev in done:
                _fuse_one(store.active[prev], prev, args, cfg, False)
            raise VolumeInconsistencyError(
                f"de-integration would drive a weight negative in block "
                f"{coord}; the keyframe was not integrated with this pose"
            )
        done.append(coord)


def _select_by_distance(tier, center, cfg, outside):
    if not tier:
        return []
    keys = list(tier.keys())
    centers = (np.array(keys, dtype=np.float64) + 0.5) * cfg.block_span
    dist = np.linalg.norm(centers - center, axis=1)
    mask = dist > cfg.stream_radius if outside else dist <= cfg.stream_radius
    return [keys[i] for i in np.flatnonzero(mask)]


def stream(store, center, cfg):
    """Move blocks so the active tier is exactly the sphere around center.

    Returns the per-call counter deltas.  A relocation is counted when the
    center moved more than one block span since the previous call.
    """
    center = np.asarray(center, dtype=np.float64).reshape(3)
    relocated = 0
    if store.last_center is not None:
        moved = float(np.linalg.norm(center - store.last_center))
        if moved > BLOCK_SIDE * cfg.voxel_size:
            relocated = 1
    store.last_center = center.copy()
    store.sphere_relocations += relocated

    out = _select_by_distance(store.active, center, cfg, outside=True)
    for coord in out:
        store.host[coord] = store.active.pop(coord)
    into = _select_by_distance(store.host, center, cfg, outside=False)
    for coord in into:
        store.active[coord] = store.host.pop(coord)

    store.blocks_streamed_out += len(out)
    store.blocks_streamed_in += len(into)
    return {
        "streamed_in": len(into),
        "streamed_out": len(out),
        "relocated": relocated,
    }


def garbage_collect(store):
    """Drop blocks whose every voxel is unobserved; returns the count."""
    freed = 0
    for tier in (store.active, store.host):
        dead = [coord for coord, blk in tier.items() if not blk.w.any()]
        for coord in dead:
            del tier[coord]
        freed += len(dead)
    return freed


def total_weight(store):
    return float(sum(blk.w.sum() for _, blk in store.iter_blocks()))


_MAGIC = b"SDFV1"


def save_volume(store, path, cfg):
    """Checkpoint the volume (both tiers) to a binary snapshot."""
    coords = sorted(
        list(store.active.keys()) + list(store.host.keys())
    )
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<ddq", cfg.voxel_size, cfg.mu, len(coords)))
        for coord in coords:
            blk = store.find(coord)
            fh.write(struct.pack("<iii", *coord))
            rec = np.empty((BLOCK_VOXELS, 5))
            rec[:, 0] = blk.d
            rec[:, 1] = blk.w
            rec[:, 2:] = blk.c
            fh.write(rec.astype("<f8").tobytes())


def load_volume(path):
    """Read a snapshot; returns (store, voxel_size, mu).

    Blocks land in the host tier with counters reset — call stream() to
    position the sphere before integrating anything.
    """
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _MAGIC:
            raise ValueError(f"not a volume snapshot: bad magic {magic!r}")
        voxel_size, mu, count = struct.unpack("<ddq", fh.read(24))
        store = TwoTierStore()
        for _ in range(count):
            coord = struct.unpack("<iii", fh.read(12))
            rec = np.frombuffer(
                fh.read(BLOCK_VOXELS * 5 * 8), dtype="<f8"
            ).reshape(BLOCK_VOXELS, 5)
            blk = VoxelBlock(
                coord,
                rec[:, 0].astype(np.float64),
                rec[:, 1].astype(np.float64),
                np.ascontiguousarray(rec[:, 2:], dtype=np.float64),
            )
            store.host[blk.coord] = blk
    return store, voxel_size, mu


def compare_volumes(a, b):
    """Largest voxelwise differences between two stores.

    Returns (max |dD|, max |dC|, max |dW|) over the union of blocks, with a
    missing block read as all zeros.  D and C are only compared where both
    volumes observed the voxel — where either weight is zero the distance
    and color carry no information.
    """
    coords = {c for c, _ in a.iter_blocks()} | {c for c, _ in b.iter_blocks()}
    zero = VoxelBlock((0, 0, 0))
    dd = dc = dw = 0.0
    for coord in coords:
        ba = a.find(coord) or zero
        bb = b.find(coord) or zero
        dw = max(dw, float(np.abs(ba.w - bb.w).max()))
        both = (ba.w > 0.0) & (bb.w > 0.0)
        if both.any():
            dd = max(dd, float(np.abs(ba.d[both] - bb.d[both]).max()))
            dc = max(dc, float(np.abs(ba.c[both] - bb.c[both]).max()))
    return dd, dc, dw
