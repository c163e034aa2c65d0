"""3D convolution via im2col GEMM, plus the stride-2 transposed variant.

Column layout is [Cin*k^3, P] with P = Do*Ho*Wo, built per batch item from
strided window views so each copied run is contiguous along W. The weight
matrix [Cout, Cin*k^3] then produces the output as a single GEMM with no
output transpose. Columns are cached on the tape for the weight-gradient
GEMM; the input gradient scatters back through col2im.

Transposed convolution is restricted to kernel 2 / stride 2 (the only shape
the decoder uses): each of the 8 kernel taps owns a disjoint interleaved
slice of the output, so forward and backward are 8 small GEMMs plus strided
assignment, with no overlap handling.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, _record


def _conv_out_extent(n, k, stride, padding):
    span = n + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv3d: extent {n} with kernel {k}, stride {stride}, padding {padding} "
            "does not tile evenly")
    return span // stride + 1


def _window_view(xp, k, stride, out_dhw):
    # [Cin, k, k, k, Do, Ho, Wo] sliding-window view over the padded input
    cin = xp.shape[0]
    do, ho, wo = out_dhw
    sc, sd, sh, sw = xp.strides
    return as_strided(xp, (cin, k, k, k, do, ho, wo),
                      (sc, sd, sh, sw, sd * stride, sh * stride, sw * stride))


def _im2col(xp, k, stride, out_dhw):
    v = _window_view(xp, k, stride, out_dhw)
    return v.reshape(xp.shape[0] * k * k * k, out_dhw[0] * out_dhw[1] * out_dhw[2])


def _col2im(dcols, padded_shape, k, stride, out_dhw, dtype):
    gp = np.zeros(padded_shape, dtype=dtype)
    do, ho, wo = out_dhw
    view = _window_view(gp, k, stride, out_dhw)
    src = dcols.reshape(padded_shape[0], k, k, k, do, ho, wo)
    if stride >= k:
        view[...] = src  # windows are disjoint, plain scatter
    else:
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    view[:, kd, kh, kw] += src[:, kd, kh, kw]
    return gp


def conv3d(x, w, b=None, stride=1, padding=0):
    """x [B,Cin,D,H,W] conv w [Cout,Cin,k,k,k] (+ optional b [Cout])."""
    xd, wd = x.data, w.data
    if xd.ndim != 5 or wd.ndim != 5:
        raise ShapeError(f"conv3d: expected 5-D x and w, got {xd.shape} and {wd.shape}")
    bsz, cin, d, h, wdim = xd.shape
    cout, wcin, k, k2, k3 = wd.shape
    if not (k == k2 == k3):
        raise ShapeError(f"conv3d: kernel must be cubic, got {wd.shape}")
    if wcin != cin:
        raise ShapeError(f"conv3d: x has {cin} channels, w expects {wcin}")
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {b.data.shape}, expected ({cout},)")
    if xd.dtype != wd.dtype:
        raise ShapeError(f"conv3d: dtype mismatch {xd.dtype} vs {wd.dtype}")
    out_dhw = tuple(_conv_out_extent(n, k, stride, padding) for n in (d, h, wdim))
    npix = out_dhw[0] * out_dhw[1] * out_dhw[2]

    w_mat = wd.reshape(cout, cin * k * k * k)
    pointwise = (k == 1 and stride == 1 and padding == 0)
    out_data = np.empty((bsz, cout) + out_dhw, dtype=xd.dtype)
    cols_cache = []
    for bi in range(bsz):
        if pointwise:
            cols = xd[bi].reshape(cin, npix)
        else:
            xp = xd[bi]
            if padding:
                xp = np.pad(xp, ((0, 0),) + ((padding, padding),) * 3)
            cols = _im2col(xp, k, stride, out_dhw)
        cols_cache.append(cols)
        np.matmul(w_mat, cols, out=out_data[bi].reshape(cout, npix))
    if b is not None:
        out_data += b.data.reshape(1, cout, 1, 1, 1)
    out = Tensor(out_data)

    padded_shape = (cin, d + 2 * padding, h + 2 * padding, wdim + 2 * padding)

    def bwd():
        g = out.grad
        g_mats = [g[bi].reshape(cout, npix) for bi in range(bsz)]
        if b is not None and b.requires_grad:
            b.accum_grad(g.sum(axis=(0, 2, 3, 4)), own=True)
        if w.requires_grad:
            dw = np.zeros_like(w_mat)
            for bi in range(bsz):
                dw += np.matmul(g_mats[bi], cols_cache[bi].T)
            w.accum_grad(dw.reshape(wd.shape), own=True)
        if x.requires_grad:
            dx = np.empty_like(xd)
            for bi in range(bsz):
                dcols = np.matmul(w_mat.T, g_mats[bi])
                if pointwise:
                    dx[bi] = dcols.reshape(cin, *out_dhw)
                else:
                    gp = _col2im(dcols, padded_shape, k, stride, out_dhw, xd.dtype)
                    if padding:
                        gp = gp[:, padding:padding + d, padding:padding + h,
                                padding:padding + wdim]
                    dx[bi] = gp
            x.accum_grad(dx, own=True)

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd)


def conv3d_transpose(x, w, b=None):
    """Stride-2 kernel-2 transposed conv: x [B,Cin,D,H,W], w [Cin,Cout,2,2,2].

    Output extent is exactly doubled; tap (kd,kh,kw) fills out[..., kd::2, kh::2, kw::2].
    """
    xd, wd = x.data, w.data
    if xd.ndim != 5 or wd.ndim != 5 or wd.shape[2:] != (2, 2, 2):
        raise ShapeError(f"conv3d_transpose: got x {xd.shape}, w {wd.shape}, need kernel (2,2,2)")
    bsz, cin, d, h, wdim = xd.shape
    wcin, cout = wd.shape[:2]
    if wcin != cin:
        raise ShapeError(f"conv3d_transpose: x has {cin} channels, w expects {wcin}")
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"conv3d_transpose: bias shape {b.data.shape}, expected ({cout},)")
    if xd.dtype != wd.dtype:
        raise ShapeError(f"conv3d_transpose: dtype mismatch {xd.dtype} vs {wd.dtype}")

    npix = d * h * wdim
    out_data = np.empty((bsz, cout, 2 * d, 2 * h, 2 * wdim), dtype=xd.dtype)
    for bi in range(bsz):
        x_mat = xd[bi].reshape(cin, npix)
        for kd in range(2):
            for kh in range(2):
                for kw in range(2):
                    tap = np.matmul(wd[:, :, kd, kh, kw].T, x_mat)
                    out_data[bi, :, kd::2, kh::2, kw::2] = tap.reshape(cout, d, h, wdim)
    if b is not None:
        out_data += b.data.reshape(1, cout, 1, 1, 1)
    out = Tensor(out_data)

    def bwd():
        g = out.grad
        if b is not None and b.requires_grad:
            b.accum_grad(g.sum(axis=(0, 2, 3, 4)), own=True)
        need_dw = w.requires_grad
        need_dx = x.requires_grad
        dw = np.zeros_like(wd) if need_dw else None
        dx = np.zeros_like(xd) if need_dx else None
        for bi in range(bsz):
            x_mat = xd[bi].reshape(cin, npix)
            for kd in range(2):
                for kh in range(2):
                    for kw in range(2):
                        g_tap = np.ascontiguousarray(
                            g[bi, :, kd::2, kh::2, kw::2]).reshape(cout, npix)
                        if need_dw:
                            dw[:, :, kd, kh, kw] += np.matmul(x_mat, g_tap.T)
                        if need_dx:
                            dx[bi] += np.matmul(wd[:, :, kd, kh, kw], g_tap).reshape(
                                cin, d, h, wdim)
        if need_dw:
            w.accum_grad(dw)
        if need_dx:
            x.accum_grad(dx)

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, bwd)
