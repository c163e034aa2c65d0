"""Sliding-window full-volume inference and morphological cleanup.

Tiling: per axis, tile starts run 0, stride, 2*stride, ... with stride =
max(1, floor(roi*(1-overlap))), and the final start clamped to
extent - roi so the last tile ends exactly at the volume edge. Every
voxel is covered by at least one tile.

Blending: per-tile logits are accumulated into float64 volume buffers
weighted either by 1 (constant) or by a separable Gaussian centred in the
tile (sigma = roi/8 per axis), then divided by the accumulated weight.
The Gaussian never reaches zero, so the weighted mean is a convex
combination of tile outputs at every voxel.

Post-processing (labels in {0,1,2,3}): 6-connected components of the
whole-tumour composite smaller than min_component_voxels are cleared, one
pass of 6-neighbourhood binary closing runs per composite coarse-to-fine
(WT, TC, ET), and nesting ET <= TC <= WT is re-imposed by intersection.
The closing treats out-of-volume voxels as foreground during its erosion
half, so it never strips in-volume border voxels; with that convention
the whole pipeline is idempotent.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .metrics import region_composites
from .tensor import ShapeError


@dataclass(frozen=True)
class TilePlan:
    """Axis-aligned tiling of a volume by roi-sized windows."""

    roi: tuple
    starts: tuple  # three tuples of per-axis start coordinates

    @property
    def n_tiles(self):
        return (len(self.starts[0]) * len(self.starts[1])
                * len(self.starts[2]))

    def tiles(self):
        """All (z, y, x) tile origins in deterministic scan order."""
        for z in self.starts[0]:
            for y in self.starts[1]:
                for x in self.starts[2]:
                    yield (z, y, x)


def _axis_starts(extent, roi, overlap):
    stride = max(1, int(np.floor(roi * (1.0 - overlap))))
    starts = list(range(0, extent - roi + 1, stride))
    if starts[-1] != extent - roi:
        starts.append(extent - roi)
    return tuple(starts)


def plan_tiles(volume_extents, roi, overlap):
    """Tile plan covering volume_extents with roi windows. See module doc."""
    if len(volume_extents) != 3 or len(roi) != 3:
        raise ShapeError(
            f"need 3 extents and 3 roi values, got {volume_extents!r}, "
            f"{roi!r}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    for ext, r in zip(volume_extents, roi):
        if r < 1:
            raise ValueError(f"roi extents must be >= 1, got {roi!r}")
        if r > ext:
            raise ShapeError(
                f"roi {roi!r} exceeds volume extents {volume_extents!r}; "
                f"pad the volume first")
    starts = tuple(_axis_starts(ext, r, overlap)
                   for ext, r in zip(volume_extents, roi))
    return TilePlan(roi=tuple(roi), starts=starts)


def _gaussian_tile_weights(roi, dtype=np.float64):
    ws = []
    for n in roi:
        center = (n - 1) / 2.0
        sigma = n / 8.0
        idx = np.arange(n, dtype=dtype)
        ws.append(np.exp(-0.5 * ((idx - center) / sigma) ** 2))
    return ws[0][:, None, None] * ws[1][None, :, None] * ws[2][None, None, :]


def sliding_window_infer(volume, model, plan, sw_batch=2,
                         blending="gaussian"):
    """Blend per-tile model logits into full-volume logits.

    volume: [C, D, H, W] float32. Returns [n_classes, D, H, W] float32.
    Tiles are evaluated in scan order, sw_batch at a time, against frozen
    weights; accumulation runs in float64.
    """
    if volume.ndim != 4:
        raise ShapeError(f"volume must be [C, D, H, W], got {volume.shape}")
    if sw_batch < 1:
        raise ValueError(f"sw_batch must be >= 1, got {sw_batch}")
    if blending == "gaussian":
        tile_w = _gaussian_tile_weights(plan.roi)
    elif blending == "constant":
        tile_w = np.ones(plan.roi, dtype=np.float64)
    else:
        raise ValueError(
            f"blending must be 'gaussian' or 'constant', got {blending!r}")

    spatial = volume.shape[1:]
    n_classes = model.config.n_classes
    acc = np.zeros((n_classes,) + spatial, dtype=np.float64)
    wsum = np.zeros(spatial, dtype=np.float64)
    origins = list(plan.tiles())
    rz, ry, rx = plan.roi
    for i in range(0, len(origins), sw_batch):
        group = origins[i:i + sw_batch]
        batch = np.stack([
            volume[:, z:z + rz, y:y + ry, x:x + rx] for z, y, x in group])
        with T.no_grad():
            logits, _ = model.forward(T.Tensor(batch))
        out = logits.data.astype(np.float64)
        for bi, (z, y, x) in enumerate(group):
            acc[:, z:z + rz, y:y + ry, x:x + rx] += out[bi] * tile_w
            wsum[z:z + rz, y:y + ry, x:x + rx] += tile_w
    assert wsum.min() > 0, "tile plan left voxels uncovered"
    return (acc / wsum).astype(np.float32)


# ---------------------------------------------------------- morphology


_NEIGHBOR_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                     (0, -1, 0), (0, 0, 1), (0, 0, -1))


def connected_components(mask):
    """6-connected component labels (int32, 0 = background) and sizes."""
    m = np.ascontiguousarray(mask, dtype=bool)
    comp = np.zeros(m.shape, dtype=np.int32)
    sizes = [0]  # index 0 is background
    d, h, w = m.shape
    for start in np.argwhere(m):
        sz, sy, sx = (int(v) for v in start)
        if comp[sz, sy, sx]:
            continue
        label = len(sizes)
        sizes.append(0)
        queue = deque([(sz, sy, sx)])
        comp[sz, sy, sx] = label
        while queue:
            z, y, x = queue.popleft()
            sizes[label] += 1
            for dz, dy, dx in _NEIGHBOR_OFFSETS:
                nz, ny, nx = z + dz, y + dy, x + dx
                if (0 <= nz < d and 0 <= ny < h and 0 <= nx < w
                        and m[nz, ny, nx] and not comp[nz, ny, nx]):
                    comp[nz, ny, nx] = label
                    queue.append((nz, ny, nx))
    return comp, np.asarray(sizes, dtype=np.int64)


def _shift_or(acc, m):
    acc[1:] |= m[:-1]
    acc[:-1] |= m[1:]
    acc[:, 1:] |= m[:, :-1]
    acc[:, :-1] |= m[:, 1:]
    acc[:, :, 1:] |= m[:, :, :-1]
    acc[:, :, :-1] |= m[:, :, 1:]
    return acc


def _dilate6(m):
    return _shift_or(m.copy(), m)


def _erode6_border_true(m):
    # out-of-volume counts as foreground, so border voxels survive erosion
    pad = np.pad(m, 1, constant_values=True)
    return (pad[1:-1, 1:-1, 1:-1]
            & pad[:-2, 1:-1, 1:-1] & pad[2:, 1:-1, 1:-1]
            & pad[1:-1, :-2, 1:-1] & pad[1:-1, 2:, 1:-1]
            & pad[1:-1, 1:-1, :-2] & pad[1:-1, 1:-1, 2:])


def _close6(m):
    return _erode6_border_true(_dilate6(m))


def remove_small_components(mask, min_voxels):
    """Zero out 6-connected components smaller than min_voxels."""
    if min_voxels <= 1:
        return mask.copy()
    comp, sizes = connected_components(mask)
    keep = sizes >= min_voxels
    keep[0] = False
    return keep[comp]


def postprocess(labels, min_component_voxels=10):
    """Morphological cleanup of a predicted label volume.

    Tiny whole-tumour components vanish, each composite gets one binary
    closing pass, nesting is re-imposed, and labels are rebuilt from the
    nested composites (WT-only voxels -> 2, TC-only -> 1, ET -> 3).
    """
    comps = region_composites(labels)
    wt = remove_small_components(comps["WT"], min_component_voxels)
    tc = comps["TC"] & wt
    et = comps["ET"] & wt
    wt = _close6(wt)
    tc = _close6(tc) & wt
    et = _close6(et) & tc
    out = np.zeros(labels.shape, dtype=np.uint8)
    out[wt] = 2
    out[tc] = 1
    out[et] = 3
    return out
