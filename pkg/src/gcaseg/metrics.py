"""Segmentation quality metrics: overlap scores, boundary distances, reports.

Conventions once, up front, because every downstream consumer depends on
them being stable:

- Dice and IoU treat two empty masks as a perfect match (1.0) and exactly
  one empty mask as a total miss (0.0). This keeps aggregates NaN-free.
- Boundary voxels are foreground voxels with at least one 6-neighbour
  outside the mask; voxels on the volume border count their out-of-bounds
  neighbours as background, so they are boundary.
- Hausdorff distances are physical (mm): voxel coordinates are scaled per
  axis by the spacing before any distance is computed. The per-pair float
  expression is fixed (scaled coords, squared differences summed in
  (d, h, w) order, one sqrt) so independent reimplementations agree
  bit-for-bit.
- hd95 has two variants. "standard" takes, for each boundary voxel of one
  mask, the distance to the nearest boundary voxel of the other, then the
  95th percentile of those nearest-distances, symmetrized by max.
  "all_pairs" takes the 95th percentile over the pooled set of all
  pairwise boundary distances; it is kept behind the flag for comparison
  experiments, not as a default.
- Percentiles interpolate linearly between order statistics.
- Distances over an empty mask are undefined: the low-level functions
  raise EmptyMaskError, and evaluate_case converts that into a missing
  value plus a flag instead of aborting the batch.

CSV serialization writes one row per (case, region) with the header
``case_id,fold,region,dice,iou,hd95,hd_max,flags``. Floats are serialized
with repr (shortest round-trip form); missing distances are empty fields.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

REGION_ORDER = ("ET", "TC", "WT")
REGION_LABELS = {"ET": (3,), "TC": (1, 3), "WT": (1, 2, 3)}

CSV_HEADER = "case_id,fold,region,dice,iou,hd95,hd_max,flags"

# Rows per block when streaming the pairwise-distance matrix. Results are
# bitwise independent of this value; it only bounds peak memory.
_CHUNK_ROWS = 4096


class EmptyMaskError(ValueError):
    """Raised when a distance metric is asked about an empty mask."""


def _as_mask(m, name):
    arr = np.asarray(m)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be a 3-D volume, got shape {arr.shape}")
    return arr.astype(bool)


def _check_same_shape(pred, gt):
    if pred.shape != gt.shape:
        raise ShapeError(
            f"mask shapes differ: pred {pred.shape} vs gt {gt.shape}")


def dice(pred, gt):
    """Overlap score 2|A∩B| / (|A|+|B|) of two binary volumes."""
    pred = _as_mask(pred, "pred")
    gt = _as_mask(gt, "gt")
    _check_same_shape(pred, gt)
    na, nb = int(pred.sum()), int(gt.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (na + nb)


def iou(pred, gt):
    """Jaccard index |A∩B| / |A∪B|; empty-mask conventions match dice."""
    pred = _as_mask(pred, "pred")
    gt = _as_mask(gt, "gt")
    _check_same_shape(pred, gt)
    na, nb = int(pred.sum()), int(gt.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    union = na + nb - inter
    return inter / union


def dice_from_pr(precision, recall):
    """Harmonic-mean form 2PR/(P+R); equals dice() on the same masks."""
    p = float(precision)
    r = float(recall)
    if not (0.0 <= p <= 1.0) or not (0.0 <= r <= 1.0):
        raise ValueError(
            f"precision and recall must lie in [0, 1], got {p} and {r}")
    if p == 0.0 and r == 0.0:
        return 0.0
    return 2.0 * p * r / (p + r)


def boundary_points(mask):
    """Coordinates [N, 3] of foreground voxels with a 6-neighbour outside.

    The volume border counts as outside, so foreground touching the edge is
    boundary. Rows come out in C-scan order.
    """
    m = _as_mask(mask, "mask")
    pad = np.pad(m, 1)
    core = (pad[:-2, 1:-1, 1:-1] & pad[2:, 1:-1, 1:-1]
            & pad[1:-1, :-2, 1:-1] & pad[1:-1, 2:, 1:-1]
            & pad[1:-1, 1:-1, :-2] & pad[1:-1, 1:-1, 2:])
    return np.argwhere(m & ~core)


def _check_spacing(spacing):
    sp = np.asarray(spacing, dtype=np.float64)
    if sp.shape != (3,):
        raise ShapeError(f"spacing must have 3 entries, got {spacing!r}")
    if not np.all(sp > 0):
        raise ValueError(f"spacing must be positive, got {spacing!r}")
    return sp


def _boundary_sets_mm(pred, gt, spacing):
    """Scaled boundary coordinate sets, raising if either mask is empty."""
    pred = _as_mask(pred, "pred")
    gt = _as_mask(gt, "gt")
    _check_same_shape(pred, gt)
    sp = _check_spacing(spacing)
    pa = boundary_points(pred)
    pb = boundary_points(gt)
    if len(pa) == 0 or len(pb) == 0:
        which = ("both masks" if len(pa) == 0 and len(pb) == 0
                 else "pred mask" if len(pa) == 0 else "gt mask")
        raise EmptyMaskError(
            f"{which} empty: boundary distances are undefined")
    return pa.astype(np.float64) * sp, pb.astype(np.float64) * sp


def _chunk_distances(block, pb):
    dd = block[:, 0:1] - pb[None, :, 0]
    dh = block[:, 1:2] - pb[None, :, 1]
    dw = block[:, 2:3] - pb[None, :, 2]
    return np.sqrt(dd * dd + dh * dh + dw * dw)


def _directed_min_distances(pa, pb):
    """Nearest-boundary distance arrays (a→b, b→a), streamed in row blocks."""
    mins_ab = np.empty(len(pa), dtype=np.float64)
    mins_ba = np.full(len(pb), np.inf, dtype=np.float64)
    for start in range(0, len(pa), _CHUNK_ROWS):
        block = pa[start:start + _CHUNK_ROWS]
        dmat = _chunk_distances(block, pb)
        mins_ab[start:start + len(block)] = dmat.min(axis=1)
        np.minimum(mins_ba, dmat.min(axis=0), out=mins_ba)
    return mins_ab, mins_ba


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0), variant="standard"):
    """95th-percentile boundary distance in mm. See module docstring."""
    pa, pb = _boundary_sets_mm(pred, gt, spacing)
    if variant == "all_pairs":
        dmat = np.empty((len(pa), len(pb)), dtype=np.float64)
        for start in range(0, len(pa), _CHUNK_ROWS):
            block = pa[start:start + _CHUNK_ROWS]
            dmat[start:start + len(block)] = _chunk_distances(block, pb)
        return float(np.percentile(dmat.reshape(-1), 95, method="linear"))
    if variant != "standard":
        raise ValueError(
            f"variant must be 'standard' or 'all_pairs', got {variant!r}")
    mins_ab, mins_ba = _directed_min_distances(pa, pb)
    return float(max(np.percentile(mins_ab, 95, method="linear"),
                     np.percentile(mins_ba, 95, method="linear")))


def hd_max(pred, gt, spacing=(1.0, 1.0, 1.0)):
    """Exact symmetric Hausdorff distance over boundary sets, in mm."""
    pa, pb = _boundary_sets_mm(pred, gt, spacing)
    mins_ab, mins_ba = _directed_min_distances(pa, pb)
    return float(max(mins_ab.max(), mins_ba.max()))


def region_composites(labels):
    """Nested evaluation masks from a label volume in {0, 1, 2, 3}.

    ET is label 3 alone, TC adds label 1, WT adds label 2, so
    ET ⊆ TC ⊆ WT by construction.
    """
    arr = np.asarray(labels)
    if arr.ndim != 3:
        raise ShapeError(f"labels must be a 3-D volume, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() > 3):
        raise ValueError(
            f"labels must lie in {{0, 1, 2, 3}}, found values spanning "
            f"[{arr.min()}, {arr.max()}]")
    out = {}
    for region in REGION_ORDER:
        mask = np.zeros(arr.shape, dtype=bool)
        for lab in REGION_LABELS[region]:
            mask |= arr == lab
        out[region] = mask
    return out


@dataclass
class CaseRow:
    """One (case, region) record. hd fields are None when undefined."""

    case_id: str
    fold: int
    region: str
    dice: float
    iou: float
    hd95: float | None
    hd_max: float | None
    flags: str


def evaluate_case(pred_labels, gt_labels, spacing=(1.0, 1.0, 1.0),
                  case_id="case", fold=0):
    """All metrics for all three composites of one case.

    An empty mask never aborts the batch: the affected distance fields come
    back as None and the row's flags record which side was empty.
    """
    pred_regions = region_composites(pred_labels)
    gt_regions = region_composites(gt_labels)
    rows = []
    for region in REGION_ORDER:
        pm, gm = pred_regions[region], gt_regions[region]
        d = dice(pm, gm)
        j = iou(pm, gm)
        pe, ge = not pm.any(), not gm.any()
        if pe or ge:
            flags = ("empty_both" if pe and ge
                     else "empty_pred" if pe else "empty_gt")
            rows.append(CaseRow(case_id, fold, region, d, j, None, None, flags))
            continue
        pa, pb = _boundary_sets_mm(pm, gm, spacing)
        mins_ab, mins_ba = _directed_min_distances(pa, pb)
        h95 = float(max(np.percentile(mins_ab, 95, method="linear"),
                        np.percentile(mins_ba, 95, method="linear")))
        hmax = float(max(mins_ab.max(), mins_ba.max()))
        rows.append(CaseRow(case_id, fold, region, d, j, h95, hmax, ""))
    return rows


def _fmt(value):
    return "" if value is None else repr(float(value))


class MetricsReport:
    """Accumulates per-case rows and reduces them to means.

    Aggregation is the arithmetic mean over cases, per region, optionally
    restricted to one fold. Distance means skip missing values and report
    how many were missing.
    """

    def __init__(self):
        self.rows = []

    def add_case(self, pred_labels, gt_labels, spacing=(1.0, 1.0, 1.0),
                 case_id="case", fold=0):
        rows = evaluate_case(pred_labels, gt_labels, spacing,
                             case_id=case_id, fold=fold)
        self.rows.extend(rows)
        return rows

    def _selected(self, fold):
        return [r for r in self.rows if fold is None or r.fold == fold]

    def aggregate(self, fold=None):
        """Per-region means: {region: {dice, iou, hd95, hd_max, n_cases, n_hd_missing}}."""
        out = {}
        rows = self._selected(fold)
        for region in REGION_ORDER:
            rr = [r for r in rows if r.region == region]
            if not rr:
                continue
            present = [r for r in rr if r.hd95 is not None]
            out[region] = {
                "dice": float(np.mean([r.dice for r in rr])),
                "iou": float(np.mean([r.iou for r in rr])),
                "hd95": (float(np.mean([r.hd95 for r in present]))
                         if present else None),
                "hd_max": (float(np.mean([r.hd_max for r in present]))
                           if present else None),
                "n_cases": len(rr),
                "n_hd_missing": len(rr) - len(present),
            }
        return out

    def macro_average(self, fold=None):
        """Mean over regions of the per-region means (hd over defined ones)."""
        agg = self.aggregate(fold)
        if not agg:
            return {}
        out = {}
        for key in ("dice", "iou", "hd95", "hd_max"):
            vals = [a[key] for a in agg.values() if a[key] is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out

    def csv_lines(self):
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(",".join([
                r.case_id, str(r.fold), r.region,
                _fmt(r.dice), _fmt(r.iou), _fmt(r.hd95), _fmt(r.hd_max),
                r.flags,
            ]))
        return lines

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.csv_lines()) + "\n")
