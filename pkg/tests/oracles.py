"""Independent reference implementations used to cross-check the engine.

Everything here is written for clarity, not speed: explicit loops, no shared
code with src/. Tests compare engine outputs against these on small inputs.
"""

import numpy as np


def conv3d_loops(x, w, b=None, stride=1, padding=0):
    """Direct sextuple-loop 3D convolution. x [B,Cin,D,H,W], w [Cout,Cin,k,k,k]."""
    bsz, cin, d, h, wdim = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    do = (d + 2 * padding - k) // stride + 1
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wdim + 2 * padding - k) // stride + 1
    out = np.zeros((bsz, cout, do, ho, wo), dtype=np.float64)
    for bi in range(bsz):
        for co in range(cout):
            for zi in range(do):
                for yi in range(ho):
                    for xi in range(wo):
                        patch = xp[bi, :, zi * stride: zi * stride + k,
                                   yi * stride: yi * stride + k,
                                   xi * stride: xi * stride + k]
                        out[bi, co, zi, yi, xi] = np.sum(
                            patch.astype(np.float64) * w[co].astype(np.float64))
            if b is not None:
                out[bi, co] += float(b[co])
    return out.astype(x.dtype)


def conv3d_transpose_loops(x, w, b=None):
    """Scatter-form transposed conv, kernel 2 stride 2. w [Cin,Cout,2,2,2]."""
    bsz, cin, d, h, wdim = x.shape
    cout = w.shape[1]
    out = np.zeros((bsz, cout, 2 * d, 2 * h, 2 * wdim), dtype=np.float64)
    for bi in range(bsz):
        for ci in range(cin):
            for zi in range(d):
                for yi in range(h):
                    for xi in range(wdim):
                        v = float(x[bi, ci, zi, yi, xi])
                        for kd in range(2):
                            for kh in range(2):
                                for kw in range(2):
                                    out[bi, :, 2 * zi + kd, 2 * yi + kh, 2 * xi + kw] += \
                                        v * w[ci, :, kd, kh, kw].astype(np.float64)
    if b is not None:
        out += b.reshape(1, cout, 1, 1, 1).astype(np.float64)
    return out.astype(x.dtype)


def matmul_loops(a, b):
    """Triple-loop matrix product for 2-D inputs."""
    m, n = a.shape
    n2, p = b.shape
    assert n == n2
    out = np.zeros((m, p), dtype=np.float64)
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for t in range(n):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def softmax_rows(x):
    """Row softmax of a 2-D array, straight from the definition."""
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(x.shape[0]):
        row = x[i].astype(np.float64)
        e = np.exp(row - row.max())
        out[i] = e / e.sum()
    return out


def segment_softmax_rows(scores, seg):
    """Softmax of scores normalised within each segment id. scores [E], seg [E]."""
    scores = scores.astype(np.float64)
    out = np.zeros_like(scores)
    for s in np.unique(seg):
        m = seg == s
        e = np.exp(scores[m] - scores[m].max())
        out[m] = e / e.sum()
    return out


def dice_binary(a, b):
    """2|A∩B| / (|A|+|B|); both empty -> 1, exactly one empty -> 0."""
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def iou_binary(a, b):
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    union = na + nb - inter
    return inter / union


def boundary_voxels(mask):
    """Foreground voxels with at least one 6-neighbour outside the mask.

    Neighbours beyond the array edge count as background, so surface voxels
    touching the volume border are boundary.
    """
    m = mask.astype(bool)
    pad = np.pad(m, 1)
    keep = np.zeros_like(m)
    d, h, w = m.shape
    for zi in range(d):
        for yi in range(h):
            for xi in range(w):
                if not m[zi, yi, xi]:
                    continue
                z, y, x = zi + 1, yi + 1, xi + 1
                if not (pad[z - 1, y, x] and pad[z + 1, y, x] and
                        pad[z, y - 1, x] and pad[z, y + 1, x] and
                        pad[z, y, x - 1] and pad[z, y, x + 1]):
                    keep[zi, yi, xi] = True
    return np.argwhere(keep)


def pairwise_distances(pts_a, pts_b, spacing):
    """All-pairs physical distances, same float expression as the engine:

    coordinates scaled per axis first, squared differences summed in
    (d, h, w) order, then a single sqrt.
    """
    sp = np.asarray(spacing, dtype=np.float64)
    pa = pts_a.astype(np.float64) * sp
    pb = pts_b.astype(np.float64) * sp
    out = np.empty((len(pa), len(pb)), dtype=np.float64)
    for i in range(len(pa)):
        dd = pa[i, 0] - pb[:, 0]
        dh = pa[i, 1] - pb[:, 1]
        dw = pa[i, 2] - pb[:, 2]
        out[i] = np.sqrt(dd * dd + dh * dh + dw * dw)
    return out


def hausdorff_ref(mask_a, mask_b, spacing, mode):
    """Brute-force boundary Hausdorff measures.

    mode "hd_max": max over both directed max-min distances.
    mode "hd95": max of directed 95th percentiles of min distances.
    mode "hd95_all_pairs": 95th percentile of all pairwise distances.
    Empty handling: both empty -> 0.0, exactly one empty -> inf.
    """
    pa = boundary_voxels(mask_a)
    pb = boundary_voxels(mask_b)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return float("inf")
    dmat = pairwise_distances(pa, pb, spacing)
    if mode == "hd95_all_pairs":
        return float(np.percentile(dmat.reshape(-1), 95, method="linear"))
    mins_ab = dmat.min(axis=1)
    mins_ba = dmat.min(axis=0)
    if mode == "hd_max":
        return float(max(mins_ab.max(), mins_ba.max()))
    if mode == "hd95":
        return float(max(np.percentile(mins_ab, 95, method="linear"),
                         np.percentile(mins_ba, 95, method="linear")))
    raise ValueError(mode)


def adamw_step_ref(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """One decoupled-weight-decay Adam step, scalar-math reference."""
    p = p.astype(np.float64).copy()
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    p = p - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)
    return p, m, v
