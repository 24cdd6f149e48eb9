"""Fused single-pass render kernels (numba) with hand-derived reverse pass.

These kernels compute exactly the compositing expression of field.render_view
and its vector-Jacobian products against the activated density/albedo grids.
The torch autograd path in field.py is the reference implementation; the two
are cross-checked in the test suite. Kernels are sequential, so gradient
accumulation order is fixed and results are bit-reproducible.

All kernels operate on activated grids; mapping gradients back through the
softplus/sigmoid activations happens in the caller.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_W_EPS = 1e-12  # below this compositing weight a sample's color is skipped


@njit(cache=True)
def _trilinear_setup(px, py, pz, bmin, inv_vox, nx, ny, nz):
    u = (px - bmin[0]) * inv_vox[0]
    v = (py - bmin[1]) * inv_vox[1]
    w = (pz - bmin[2]) * inv_vox[2]
    if u < 0.0:
        u = 0.0
    if v < 0.0:
        v = 0.0
    if w < 0.0:
        w = 0.0
    if u > nx - 1.0:
        u = nx - 1.0
    if v > ny - 1.0:
        v = ny - 1.0
    if w > nz - 1.0:
        w = nz - 1.0
    i0 = int(u)
    j0 = int(v)
    k0 = int(w)
    if i0 > nx - 2:
        i0 = nx - 2
    if j0 > ny - 2:
        j0 = ny - 2
    if k0 > nz - 2:
        k0 = nz - 2
    fu = u - i0
    fv = v - j0
    fw = w - k0
    return i0, j0, k0, fu, fv, fw


@njit(cache=True)
def _interp_scalar(D, i0, j0, k0, fu, fv, fw):
    return ((1 - fu) * ((1 - fv) * ((1 - fw) * D[i0, j0, k0] + fw * D[i0, j0, k0 + 1])
                        + fv * ((1 - fw) * D[i0, j0 + 1, k0] + fw * D[i0, j0 + 1, k0 + 1]))
            + fu * ((1 - fv) * ((1 - fw) * D[i0 + 1, j0, k0] + fw * D[i0 + 1, j0, k0 + 1])
                    + fv * ((1 - fw) * D[i0 + 1, j0 + 1, k0] + fw * D[i0 + 1, j0 + 1, k0 + 1])))


@njit(cache=True)
def _scatter_scalar(G, i0, j0, k0, fu, fv, fw, val):
    G[i0, j0, k0] += (1 - fu) * (1 - fv) * (1 - fw) * val
    G[i0, j0, k0 + 1] += (1 - fu) * (1 - fv) * fw * val
    G[i0, j0 + 1, k0] += (1 - fu) * fv * (1 - fw) * val
    G[i0, j0 + 1, k0 + 1] += (1 - fu) * fv * fw * val
    G[i0 + 1, j0, k0] += fu * (1 - fv) * (1 - fw) * val
    G[i0 + 1, j0, k0 + 1] += fu * (1 - fv) * fw * val
    G[i0 + 1, j0 + 1, k0] += fu * fv * (1 - fw) * val
    G[i0 + 1, j0 + 1, k0 + 1] += fu * fv * fw * val


@njit(cache=True)
def _probe_density(D, px, py, pz, bmin, bmax, inv_vox, nx, ny, nz):
    """Density at an arbitrary point: exactly zero outside the box."""
    if (px < bmin[0] or px > bmax[0] or py < bmin[1] or py > bmax[1]
            or pz < bmin[2] or pz > bmax[2]):
        return 0.0
    i0, j0, k0, fu, fv, fw = _trilinear_setup(px, py, pz, bmin, inv_vox, nx, ny, nz)
    return _interp_scalar(D, i0, j0, k0, fu, fv, fw)


@njit(cache=True)
def _normal_at(D, px, py, pz, bmin, bmax, inv_vox, h, nx, ny, nz, out):
    """-grad(density)/|grad| with one-voxel central differences; returns |grad|.

    out[0:3] receives the raw (unnormalized) negative gradient direction so the
    backward pass can redo the normalization Jacobian.
    """
    gx = (_probe_density(D, px + h[0], py, pz, bmin, bmax, inv_vox, nx, ny, nz)
          - _probe_density(D, px - h[0], py, pz, bmin, bmax, inv_vox, nx, ny, nz)) / (2.0 * h[0])
    gy = (_probe_density(D, px, py + h[1], pz, bmin, bmax, inv_vox, nx, ny, nz)
          - _probe_density(D, px, py - h[1], pz, bmin, bmax, inv_vox, nx, ny, nz)) / (2.0 * h[1])
    gz = (_probe_density(D, px, py, pz + h[2], bmin, bmax, inv_vox, nx, ny, nz)
          - _probe_density(D, px, py, pz - h[2], bmin, bmax, inv_vox, nx, ny, nz)) / (2.0 * h[2])
    out[0] = gx
    out[1] = gy
    out[2] = gz
    return np.sqrt(gx * gx + gy * gy + gz * gz)


@njit(cache=True)
def forward_kernel(D, A, use_albedo, origin, dirs, tmin, delta, jit, bg,
                   bmin, bmax, inv_vox, h, want_weights,
                   rgb, dep, msk, weights_out):
    nx, ny, nz = D.shape
    R, N = jit.shape
    grad_eps = 1e-8
    for r in range(R):
        dl = delta[r]
        T = 1.0
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        depn = 0.0
        if dl > 0.0:
            for i in range(N):
                t = tmin[r] + (i + jit[r, i]) * dl
                px = origin[0] + dirs[r, 0] * t
                py = origin[1] + dirs[r, 1] * t
                pz = origin[2] + dirs[r, 2] * t
                i0, j0, k0, fu, fv, fw = _trilinear_setup(px, py, pz, bmin, inv_vox, nx, ny, nz)
                sig = _interp_scalar(D, i0, j0, k0, fu, fv, fw)
                e = np.exp(-sig * dl)
                wgt = T * (1.0 - e)
                if wgt > _W_EPS:
                    if use_albedo:
                        c0 = _interp_scalar(A[:, :, :, 0], i0, j0, k0, fu, fv, fw)
                        c1 = _interp_scalar(A[:, :, :, 1], i0, j0, k0, fu, fv, fw)
                        c2 = _interp_scalar(A[:, :, :, 2], i0, j0, k0, fu, fv, fw)
                    else:
                        gvec = np.empty(3, dtype=D.dtype)
                        mag = _normal_at(D, px, py, pz, bmin, bmax, inv_vox, h, nx, ny, nz, gvec)
                        if mag >= grad_eps:
                            c0 = 0.5 * (1.0 - gvec[0] / mag)
                            c1 = 0.5 * (1.0 - gvec[1] / mag)
                            c2 = 0.5 * (1.0 - gvec[2] / mag)
                        else:
                            c0 = 0.5
                            c1 = 0.5
                            c2 = 0.5
                    acc0 += wgt * c0
                    acc1 += wgt * c1
                    acc2 += wgt * c2
                    depn += wgt * t
                if want_weights:
                    weights_out[r, i] = wgt
                T *= e
        m = 1.0 - T
        msk[r] = m
        mc = m if m > 1e-6 else 1e-6
        dep[r] = depn / mc
        rgb[r, 0] = acc0 + (1.0 - m) * bg[0]
        rgb[r, 1] = acc1 + (1.0 - m) * bg[1]
        rgb[r, 2] = acc2 + (1.0 - m) * bg[2]


@njit(cache=True)
def backward_kernel(D, A, use_albedo, origin, dirs, tmin, delta, jit, bg,
                    bmin, bmax, inv_vox, h, u_rgb, u_dep, u_msk, gD, gA):
    """Accumulate d(loss)/d(activated grids) given upstream image gradients.

    Replays the forward per ray, storing per-sample state, then walks samples
    back-to-front with a suffix accumulator:
        dL/ds_i = a_i * T_{i+1} - sum_{j>i} a_j * w_j,   s_i = sigma_i * delta
    where a_i = dL/dw_i collects the color, depth and mask contributions.
    """
    nx, ny, nz = D.shape
    R, N = jit.shape
    grad_eps = 1e-8
    Ts = np.empty(N + 1, dtype=D.dtype)
    sig_arr = np.empty(N, dtype=D.dtype)
    w_arr = np.empty(N, dtype=D.dtype)
    c_arr = np.empty((N, 3), dtype=D.dtype)
    g_arr = np.empty((N, 3), dtype=D.dtype)
    for r in range(R):
        dl = delta[r]
        if dl <= 0.0:
            continue
        T = 1.0
        depn = 0.0
        Ts[0] = 1.0
        for i in range(N):
            t = tmin[r] + (i + jit[r, i]) * dl
            px = origin[0] + dirs[r, 0] * t
            py = origin[1] + dirs[r, 1] * t
            pz = origin[2] + dirs[r, 2] * t
            i0, j0, k0, fu, fv, fw = _trilinear_setup(px, py, pz, bmin, inv_vox, nx, ny, nz)
            sig = _interp_scalar(D, i0, j0, k0, fu, fv, fw)
            e = np.exp(-sig * dl)
            wgt = T * (1.0 - e)
            sig_arr[i] = sig
            w_arr[i] = wgt
            if wgt > _W_EPS:
                if use_albedo:
                    c_arr[i, 0] = _interp_scalar(A[:, :, :, 0], i0, j0, k0, fu, fv, fw)
                    c_arr[i, 1] = _interp_scalar(A[:, :, :, 1], i0, j0, k0, fu, fv, fw)
                    c_arr[i, 2] = _interp_scalar(A[:, :, :, 2], i0, j0, k0, fu, fv, fw)
                else:
                    gvec = np.empty(3, dtype=D.dtype)
                    mag = _normal_at(D, px, py, pz, bmin, bmax, inv_vox, h, nx, ny, nz, gvec)
                    g_arr[i, 0] = gvec[0]
                    g_arr[i, 1] = gvec[1]
                    g_arr[i, 2] = gvec[2]
                    if mag >= grad_eps:
                        c_arr[i, 0] = 0.5 * (1.0 - gvec[0] / mag)
                        c_arr[i, 1] = 0.5 * (1.0 - gvec[1] / mag)
                        c_arr[i, 2] = 0.5 * (1.0 - gvec[2] / mag)
                    else:
                        c_arr[i, 0] = 0.5
                        c_arr[i, 1] = 0.5
                        c_arr[i, 2] = 0.5
                depn += wgt * (tmin[r] + (i + jit[r, i]) * dl)
            T *= e
            Ts[i + 1] = T
        m = 1.0 - T
        mc = m if m > 1e-6 else 1e-6
        u_depnum = u_dep[r] / mc
        # d(rgb)/dM = -bg, d(depth)/dM = -depn/M^2 (when M above the clamp)
        u_w = u_msk[r] - (u_rgb[r, 0] * bg[0] + u_rgb[r, 1] * bg[1] + u_rgb[r, 2] * bg[2])
        if m > 1e-6:
            u_w -= u_dep[r] * depn / (mc * mc)
        suf = 0.0
        for i in range(N - 1, -1, -1):
            wgt = w_arr[i]
            t = tmin[r] + (i + jit[r, i]) * dl
            a_i = u_w
            if wgt > _W_EPS:
                a_i += (u_rgb[r, 0] * c_arr[i, 0] + u_rgb[r, 1] * c_arr[i, 1]
                        + u_rgb[r, 2] * c_arr[i, 2]) + u_depnum * t
            dls = a_i * Ts[i + 1] - suf
            suf += a_i * wgt
            dsig = dls * dl
            px = origin[0] + dirs[r, 0] * t
            py = origin[1] + dirs[r, 1] * t
            pz = origin[2] + dirs[r, 2] * t
            i0, j0, k0, fu, fv, fw = _trilinear_setup(px, py, pz, bmin, inv_vox, nx, ny, nz)
            _scatter_scalar(gD, i0, j0, k0, fu, fv, fw, dsig)
            if wgt > _W_EPS:
                if use_albedo:
                    _scatter_scalar(gA[:, :, :, 0], i0, j0, k0, fu, fv, fw, wgt * u_rgb[r, 0])
                    _scatter_scalar(gA[:, :, :, 1], i0, j0, k0, fu, fv, fw, wgt * u_rgb[r, 1])
                    _scatter_scalar(gA[:, :, :, 2], i0, j0, k0, fu, fv, fw, wgt * u_rgb[r, 2])
                else:
                    gx = g_arr[i, 0]
                    gy = g_arr[i, 1]
                    gz = g_arr[i, 2]
                    mag = np.sqrt(gx * gx + gy * gy + gz * gz)
                    if mag >= grad_eps:
                        # dL/dn = 0.5 * w * u_rgb; n = -g/|g|
                        dn0 = 0.5 * wgt * u_rgb[r, 0]
                        dn1 = 0.5 * wgt * u_rgb[r, 1]
                        dn2 = 0.5 * wgt * u_rgb[r, 2]
                        inv = 1.0 / mag
                        ux = gx * inv
                        uy = gy * inv
                        uz = gz * inv
                        dot = dn0 * ux + dn1 * uy + dn2 * uz
                        dg0 = -(dn0 - dot * ux) * inv
                        dg1 = -(dn1 - dot * uy) * inv
                        dg2 = -(dn2 - dot * uz) * inv
                        _scatter_probe_pair(gD, px, py, pz, 0, dg0 / (2.0 * h[0]),
                                            bmin, bmax, inv_vox, h, nx, ny, nz)
                        _scatter_probe_pair(gD, px, py, pz, 1, dg1 / (2.0 * h[1]),
                                            bmin, bmax, inv_vox, h, nx, ny, nz)
                        _scatter_probe_pair(gD, px, py, pz, 2, dg2 / (2.0 * h[2]),
                                            bmin, bmax, inv_vox, h, nx, ny, nz)


@njit(cache=True)
def _scatter_probe_pair(gD, px, py, pz, axis, val, bmin, bmax, inv_vox, h, nx, ny, nz):
    """Scatter +val at the +h probe and -val at the -h probe of one axis."""
    if axis == 0:
        pxp, pyp, pzp = px + h[0], py, pz
        pxm, pym, pzm = px - h[0], py, pz
    elif axis == 1:
        pxp, pyp, pzp = px, py + h[1], pz
        pxm, pym, pzm = px, py - h[1], pz
    else:
        pxp, pyp, pzp = px, py, pz + h[2]
        pxm, pym, pzm = px, py, pz - h[2]
    if (bmin[0] <= pxp <= bmax[0] and bmin[1] <= pyp <= bmax[1] and bmin[2] <= pzp <= bmax[2]):
        i0, j0, k0, fu, fv, fw = _trilinear_setup(pxp, pyp, pzp, bmin, inv_vox, nx, ny, nz)
        _scatter_scalar(gD, i0, j0, k0, fu, fv, fw, val)
    if (bmin[0] <= pxm <= bmax[0] and bmin[1] <= pym <= bmax[1] and bmin[2] <= pzm <= bmax[2]):
        i0, j0, k0, fu, fv, fw = _trilinear_setup(pxm, pym, pzm, bmin, inv_vox, nx, ny, nz)
        _scatter_scalar(gD, i0, j0, k0, fu, fv, fw, -val)
