# cython: boundscheck=False, wraparound=False, initializedcheck=False, language_level=3
"""Compiled compute kernels.

Bit-for-bit twins of ``_kernels_py``: same expressions, same evaluation
order, IEEE double throughout.  Built with plain -O2 (no fast-math, no FMA
contraction) so results match the numpy backend exactly.
"""

from libc.math cimport INFINITY, floor

BACKEND_NAME = "compiled"


def fuse_block(
    double[::1] d,
    double[::1] w,
    double[:, ::1] c,
    double ox,
    double oy,
    double oz,
    double voxel_size,
    double[:, ::1] rot,
    double tx,
    double ty,
    double tz,
    double fx,
    double fy,
    double cx,
    double cy,
    int width,
    int height,
    double[:, ::1] kf_depth,
    double[:, ::1] kf_weight,
    double[:, :, ::1] kf_color,
    double mu,
    double eps_w,
    bint remove,
):
    """See ``_kernels_py.fuse_block``; removal is check-then-apply so a
    weight-consistency failure leaves the block untouched."""
    cdef double r00 = rot[0, 0], r01 = rot[0, 1], r02 = rot[0, 2]
    cdef double r10 = rot[1, 0], r11 = rot[1, 1], r12 = rot[1, 2]
    cdef double r20 = rot[2, 0], r21 = rot[2, 1], r22 = rot[2, 2]
    cdef int l, lx, ly, lz, iu, iv, count = 0
    cdef bint apply_phase
    cdef double vx, vy, vz, dx0, dy0, dz0, px, py, pz, uf, vf
    cdef double zk, wk, dd, wl, wn

    apply_phase = not remove
    while True:
        for l in range(512):
            lx = l & 7
            ly = (l >> 3) & 7
            lz = l >> 6
            vx = ox + (lx + 0.5) * voxel_size
            vy = oy + (ly + 0.5) * voxel_size
            vz = oz + (lz + 0.5) * voxel_size
            dx0 = vx - tx
            dy0 = vy - ty
            dz0 = vz - tz
            pz = r20 * dx0 + r21 * dy0 + r22 * dz0
            if pz <= 0.0:
                continue
            px = r00 * dx0 + r01 * dy0 + r02 * dz0
            py = r10 * dx0 + r11 * dy0 + r12 * dz0
            uf = floor(fx * px / pz + cx + 0.5)
            vf = floor(fy * py / pz + cy + 0.5)
            if uf < 0 or uf >= width or vf < 0 or vf >= height:
                continue
            iu = <int>uf
            iv = <int>vf
            zk = kf_depth[iv, iu]
            wk = kf_weight[iv, iu]
            if not (wk > 0.0):
                continue
            dd = zk - pz
            if not (dd <= mu and dd >= -mu):
                continue
            wl = w[l]
            if remove:
                wn = wl - wk
                if not apply_phase:
                    if wn < -eps_w:
                        return -1
                    continue
                if wn < eps_w:
                    d[l] = 0.0
                    c[l, 0] = 0.0
                    c[l, 1] = 0.0
                    c[l, 2] = 0.0
                    w[l] = 0.0
                else:
                    d[l] = (d[l] * wl - dd * wk) / wn
                    c[l, 0] = (c[l, 0] * wl - kf_color[iv, iu, 0] * wk) / wn
                    c[l, 1] = (c[l, 1] * wl - kf_color[iv, iu, 1] * wk) / wn
                    c[l, 2] = (c[l, 2] * wl - kf_color[iv, iu, 2] * wk) / wn
                    w[l] = wn
            else:
                wn = wl + wk
                d[l] = (d[l] * wl + dd * wk) / wn
                c[l, 0] = (c[l, 0] * wl + kf_color[iv, iu, 0] * wk) / wn
                c[l, 1] = (c[l, 1] * wl + kf_color[iv, iu, 1] * wk) / wn
                c[l, 2] = (c[l, 2] * wl + kf_color[iv, iu, 2] * wk) / wn
                w[l] = wn
            count += 1
        if apply_phase:
            return count
        apply_phase = True


def nn_min_d2(double[:, ::1] q, double[:, ::1] pts, double[::1] out):
    """See ``_kernels_py.nn_min_d2``; the pairwise squared distance groups
    as (dx*dx + dy*dy) + dz*dz to match the numpy reduction bit for bit."""
    cdef Py_ssize_t i, j, n = q.shape[0], m = pts.shape[0]
    cdef double qx, qy, qz, dx, dy, dz, d2, best
    for i in range(n):
        qx = q[i, 0]
        qy = q[i, 1]
        qz = q[i, 2]
        best = INFINITY
        for j in range(m):
            dx = qx - pts[j, 0]
            dy = qy - pts[j, 1]
            dz = qz - pts[j, 2]
            d2 = dx * dx + dy * dy
            d2 = d2 + dz * dz
            if d2 < best:
                best = d2
        out[i] = best
