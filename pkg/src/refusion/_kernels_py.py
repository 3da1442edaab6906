"""Pure-numpy compute kernels.

`fuse_block` is the hot inner loop of volume (de-)integration and
`nn_min_d2` the linear-scan leg of nearest-neighbor queries.  The compiled
twins in ``_kernels_cy.pyx`` evaluate the exact same expressions in the
same order, so both backends produce bit-identical results; keep any change
here mirrored there.
"""

import numpy as np

BACKEND_NAME = "python"

_L = np.arange(512)
_OFF_X = (_L % 8 + 0.5).astype(np.float64)
_OFF_Y = (_L // 8 % 8 + 0.5).astype(np.float64)
_OFF_Z = (_L // 64 + 0.5).astype(np.float64)


def fuse_block(
    d,
    w,
    c,
    ox,
    oy,
    oz,
    voxel_size,
    rot,
    tx,
    ty,
    tz,
    fx,
    fy,
    cx,
    cy,
    width,
    height,
    kf_depth,
    kf_weight,
    kf_color,
    mu,
    eps_w,
    remove,
):
    """Integrate (or de-integrate) one 8x8x8 block against a keyframe.

    ``rot`` is the world-to-camera rotation, ``(tx, ty, tz)`` the camera
    center in world coordinates.  Voxel arrays are flat, x-fastest.  Returns
    the number of voxels updated, or -1 when a removal would drive a weight
    negative (nothing is written in that case).
    """
    vx = ox + _OFF_X * voxel_size
    vy = oy + _OFF_Y * voxel_size
    vz = oz + _OFF_Z * voxel_size
    dx0 = vx - tx
    dy0 = vy - ty
    dz0 = vz - tz
    pz = rot[2, 0] * dx0 + rot[2, 1] * dy0 + rot[2, 2] * dz0
    sel = pz > 0.0
    if not sel.any():
        return 0
    px = rot[0, 0] * dx0[sel] + rot[0, 1] * dy0[sel] + rot[0, 2] * dz0[sel]
    py = rot[1, 0] * dx0[sel] + rot[1, 1] * dy0[sel] + rot[1, 2] * dz0[sel]
    pzs = pz[sel]
    uf = np.floor(fx * px / pzs + cx + 0.5)
    vf = np.floor(fy * py / pzs + cy + 0.5)
    inb = (uf >= 0) & (uf < width) & (vf >= 0) & (vf < height)
    if not inb.any():
        return 0
    idx = np.flatnonzero(sel)[inb]
    flat = vf[inb].astype(np.int64) * width + uf[inb].astype(np.int64)
    zk = kf_depth.reshape(-1)[flat]
    wk = kf_weight.reshape(-1)[flat]
    pzs = pzs[inb]
    dd = zk - pzs
    band = (wk > 0.0) & (dd <= mu) & (dd >= -mu)
    if not band.any():
        return 0
    idx = idx[band]
    dd = dd[band]
    wk = wk[band]
    ck = kf_color.reshape(-1, 3)[flat[band]]

    wl = w[idx]
    if remove:
        wn = wl - wk
        if np.any(wn < -eps_w):
            return -1
        reset = wn < eps_w
        upd = ~reset
        i_u = idx[upd]
        d[i_u] = (d[i_u] * wl[upd] - dd[upd] * wk[upd]) / wn[upd]
        c[i_u] = (c[i_u] * wl[upd, None] - ck[upd] * wk[upd, None]) / wn[upd, None]
        w[i_u] = wn[upd]
        i_r = idx[reset]
        d[i_r] = 0.0
        c[i_r] = 0.0
        w[i_r] = 0.0
    else:
        wn = wl + wk
        d[idx] = (d[idx] * wl + dd * wk) / wn
        c[idx] = (c[idx] * wl[:, None] + ck * wk[:, None]) / wn[:, None]
        w[idx] = wn
    return int(idx.size)


def nn_min_d2(q, pts, out):
    """Squared distance from each query to its nearest point, written into
    ``out``.  Each pair's distance is (qx-px)^2 + (qy-py)^2 + (qz-pz)^2 in
    double precision; min is exact, so chunk sizes cannot change the bits.
    All inputs must be finite.
    """
    for qlo in range(0, q.shape[0], 256):
        qs = q[qlo : qlo + 256]
        part = np.full(qs.shape[0], np.inf)
        for plo in range(0, pts.shape[0], 2048):
            ps = pts[plo : plo + 2048]
            d2 = ((qs[:, None, :] - ps[None, :, :]) ** 2).sum(axis=-1)
            np.minimum(part, d2.min(axis=1), out=part)
        out[qlo : qlo + 256] = part
