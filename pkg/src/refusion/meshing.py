"""Triangle mesh extraction from the voxel volume.

Runs the classic 256-case marching-cubes construction over every cell whose
eight corner voxels have all been observed (``W > 0``), interpolating vertex
positions and colors along the cut edges to the ``D = 0`` crossing.  Cells
are anchored at voxel coordinates, so each cell is owned by exactly one
block; the corner samples that spill into the +x/+y/+z neighbor blocks are
gathered from whichever tier holds them, and a missing neighbor simply
leaves those corners unobserved.

Output order is deterministic: blocks are visited in sorted coordinate
order and cells in lexicographic order inside each block, so bit-identical
volumes produce identical meshes regardless of tier placement or dict
insertion history.
"""

import numpy as np
from dataclasses import dataclass, field

from .mc_tables import CASE_EDGES, CASE_TRIANGLES, EDGE_VERTEX_PAIRS
from .volume import BLOCK_SIDE

# Cube corner offsets, matching the case-table corner numbering: v0..v3 ring
# the z=0 face counter-clockwise, v4..v7 the z=1 face above them.
CORNER_OFFSETS = np.array(
    [
        (0, 0, 0),
        (1, 0, 0),
        (1, 1, 0),
        (0, 1, 0),
        (0, 0, 1),
        (1, 0, 1),
        (1, 1, 1),
        (0, 1, 1),
    ],
    dtype=np.int64,
)

# Block-coordinate offsets of the seven +axis neighbors a padded corner grid
# borrows from.
_NEIGHBOR_OFFSETS = [
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 1, 0),
    (1, 0, 1),
    (0, 1, 1),
    (1, 1, 1),
]

_PLY_VERTEX_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("red", "u1"),
        ("green", "u1"),
        ("blue", "u1"),
    ]
)
_PLY_FACE_DTYPE = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])


def _empty_vertices():
    return np.zeros((0, 3))


def _empty_colors():
    return np.zeros((0, 3))


def _empty_triangles():
    return np.zeros((0, 3), dtype=np.int64)


@dataclass
class TriangleMesh:
    """Indexed triangle soup with per-vertex colors.

    ``vertices`` is (N, 3) float64 world positions, ``colors`` their (N, 3)
    RGB values on the 0..255 scale, ``triangles`` (M, 3) int64 indices into
    the vertex array.
    """

    vertices: np.ndarray = field(default_factory=_empty_vertices)
    colors: np.ndarray = field(default_factory=_empty_colors)
    triangles: np.ndarray = field(default_factory=_empty_triangles)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    def validate(self):
        if self.vertices.shape != (self.n_vertices, 3):
            raise ValueError("vertices must be (N, 3)")
        if self.colors.shape != self.vertices.shape:
            raise ValueError("colors must match vertices shape")
        if self.triangles.shape != (self.n_triangles, 3):
            raise ValueError("triangles must be (M, 3)")
        if np.isnan(self.vertices).any():
            raise ValueError("vertices contain NaN")
        if self.n_triangles and (
            self.triangles.min() < 0 or self.triangles.max() >= self.n_vertices
        ):
            raise ValueError("triangle indices out of range")


def _padded_grids(store, blk):
    """Return 9x9x9 (D, W) and 9x9x9x3 C grids for cells anchored in blk.

    Index order is [z, y, x] to match the flat voxel layout (x fastest).
    Corners belonging to absent neighbor blocks keep W = 0.
    """
    side = BLOCK_SIDE
    n = side + 1
    d9 = np.zeros((n, n, n))
    w9 = np.zeros((n, n, n))
    c9 = np.zeros((n, n, n, 3))
    d9[:side, :side, :side] = blk.d.reshape(side, side, side)
    w9[:side, :side, :side] = blk.w.reshape(side, side, side)
    c9[:side, :side, :side] = blk.c.reshape(side, side, side, 3)
    bx, by, bz = blk.coord
    for dx, dy, dz in _NEIGHBOR_OFFSETS:
        nb = store.find((bx + dx, by + dy, bz + dz))
        if nb is None:
            continue
        dst = (
            side if dz else slice(0, side),
            side if dy else slice(0, side),
            side if dx else slice(0, side),
        )
        src = (
            0 if dz else slice(0, side),
            0 if dy else slice(0, side),
            0 if dx else slice(0, side),
        )
        d9[dst] = nb.d.reshape(side, side, side)[src]
        w9[dst] = nb.w.reshape(side, side, side)[src]
        c9[dst] = nb.c.reshape(side, side, side, 3)[src]
    return d9, w9, c9


def _block_cells(store, blk, cfg):
    """Polygonise one block; returns (vertices, colors, triangles) arrays."""
    side = BLOCK_SIDE
    d9, w9, c9 = _padded_grids(store, blk)

    # Per-corner sample stacks over the side^3 cells, [corner, z, y, x].
    corner_d = np.empty((8, side, side, side))
    corner_w = np.empty((8, side, side, side))
    for i, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        corner_d[i] = d9[oz : oz + side, oy : oy + side, ox : ox + side]
        corner_w[i] = w9[oz : oz + side, oy : oy + side, ox : ox + side]

    observed = (corner_w > 0.0).all(axis=0)
    cases = np.zeros((side, side, side), dtype=np.int64)
    for i in range(8):
        cases |= (corner_d[i] < 0.0).astype(np.int64) << i
    live = observed & (CASE_EDGES[cases] != 0)
    if not live.any():
        return None

    # Anchor voxel coordinates of the live cells, in [z, y, x] scan order.
    cz, cy, cx = np.nonzero(live)
    cases = cases[live]
    n_cells = cases.shape[0]
    cell_d = corner_d[:, live].T  # (n_cells, 8)
    cell_c = np.empty((n_cells, 8, 3))
    for i, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        cell_c[:, i] = c9[oz : oz + side, oy : oy + side, ox : ox + side][live]

    # Interpolation parameter along each of the 12 edges; midpoint when the
    # corner values are equal.  Lanes for uncut edges are never referenced.
    ea = EDGE_VERTEX_PAIRS[:, 0]
    eb = EDGE_VERTEX_PAIRS[:, 1]
    da = cell_d[:, ea]
    db = cell_d[:, eb]
    denom = da - db
    safe = np.where(denom == 0.0, 1.0, denom)
    t = np.where(denom == 0.0, 0.5, da / safe)  # (n_cells, 12)

    bx, by, bz = blk.coord
    anchor = np.stack(
        [cx + bx * side, cy + by * side, cz + bz * side], axis=1
    )  # (n_cells, 3) global voxel coords
    base_pos = (anchor[:, None, :] + 0.5) * cfg.voxel_size  # corner v0 centers
    offs = CORNER_OFFSETS.astype(np.float64) * cfg.voxel_size
    pa = base_pos + offs[ea][None, :, :]  # (n_cells, 12, 3)
    pb = base_pos + offs[eb][None, :, :]
    edge_pos = pa + t[:, :, None] * (pb - pa)
    edge_col = cell_c[:, ea] + t[:, :, None] * (cell_c[:, eb] - cell_c[:, ea])

    # One vertex per (cell, cut edge); triangles index them via the running
    # rank of each cut edge inside its cell.
    used = (CASE_EDGES[cases][:, None] >> np.arange(12)) & 1  # (n_cells, 12)
    used = used.astype(bool)
    rank = np.cumsum(used, axis=1) - 1
    counts = used.sum(axis=1)
    base = np.concatenate([[0], np.cumsum(counts)[:-1]])

    tri_edges = CASE_TRIANGLES[cases]  # (n_cells, 16)
    slot = tri_edges >= 0
    cell_of_slot = np.broadcast_to(np.arange(n_cells)[:, None], slot.shape)[slot]
    edge_of_slot = tri_edges[slot]
    tri_idx = (base[cell_of_slot] + rank[cell_of_slot, edge_of_slot]).reshape(-1, 3)

    return edge_pos[used], edge_col[used], tri_idx


def marching_cubes(store, cfg):
    """Extract the D = 0 iso-surface from both tiers of the volume.

    Emits triangles for every cell whose eight corners are observed and
    whose corner distances straddle zero; corners in absent neighbor blocks
    count as unobserved, so the surface never extends past the data.
    Vertices are not shared between cells (see :func:`weld`).
    """
    all_coords = sorted(
        list(store.active.keys()) + list(store.host.keys())
    )
    verts, cols, tris = [], [], []
    offset = 0
    for coord in all_coords:
        out = _block_cells(store, store.find(coord), cfg)
        if out is None:
            continue
        v, c, t = out
        verts.append(v)
        cols.append(c)
        tris.append(t + offset)
        offset += v.shape[0]
    if not verts:
        return TriangleMesh()
    return TriangleMesh(
        vertices=np.concatenate(verts),
        colors=np.concatenate(cols),
        triangles=np.concatenate(tris),
    )


def weld(mesh, tol=1e-7):
    """Merge vertices that coincide within ``tol`` (meters).

    Positions are quantized to the tolerance grid; the lowest-indexed vertex
    of each group keeps its exact coordinates and color.  Triangles that
    collapse to fewer than three distinct vertices are dropped.
    """
    if tol <= 0.0:
        raise ValueError(f"tol must be > 0, got {tol}")
    if mesh.n_vertices == 0:
        return TriangleMesh()
    keys = np.round(mesh.vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(
        keys, axis=0, return_index=True, return_inverse=True
    )
    inverse = inverse.reshape(-1)
    tris = inverse[mesh.triangles]
    keep = (
        (tris[:, 0] != tris[:, 1])
        & (tris[:, 1] != tris[:, 2])
        & (tris[:, 0] != tris[:, 2])
    )
    return TriangleMesh(
        vertices=mesh.vertices[first],
        colors=mesh.colors[first],
        triangles=tris[keep],
    )


def save_ply(mesh, path):
    """Write the mesh as binary little-endian PLY (xyz float32, rgb uint8)."""
    mesh.validate()
    header = "\n".join(
        [
            "ply",
            "format binary_little_endian 1.0",
            f"element vertex {mesh.n_vertices}",
            "property float x",
            "property float y",
            "property float z",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
            f"element face {mesh.n_triangles}",
            "property list uchar int vertex_indices",
            "end_header",
            "",
        ]
    )
    vrec = np.empty(mesh.n_vertices, dtype=_PLY_VERTEX_DTYPE)
    vrec["x"] = mesh.vertices[:, 0].astype(np.float32)
    vrec["y"] = mesh.vertices[:, 1].astype(np.float32)
    vrec["z"] = mesh.vertices[:, 2].astype(np.float32)
    rgb = np.clip(np.rint(mesh.colors), 0, 255).astype(np.uint8)
    vrec["red"] = rgb[:, 0]
    vrec["green"] = rgb[:, 1]
    vrec["blue"] = rgb[:, 2]
    frec = np.empty(mesh.n_triangles, dtype=_PLY_FACE_DTYPE)
    frec["n"] = 3
    frec["idx"] = mesh.triangles.astype(np.int32)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vrec.tobytes())
        fh.write(frec.tobytes())


def save_obj(mesh, path):
    """Write the mesh as a Wavefront OBJ file (positions only)."""
    mesh.validate()
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {float(x)!r} {float(y)!r} {float(z)!r}")
    for a, b, c in mesh.triangles + 1:
        lines.append(f"f {int(a)} {int(b)} {int(c)}")
    lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
