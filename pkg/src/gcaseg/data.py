"""Synthetic multi-modal cases, preprocessing, augmentation, fold splits.

A Case bundles four co-registered modality volumes (fixed channel order
T1, T1ce, T2, FLAIR), an integer label volume in {0, 1, 2, 3}, and the
voxel spacing in mm per (D, H, W) axis.

The synthetic generator is a stand-in for gated clinical data and never
pretends otherwise: a brain ellipsoid with zeroed surround, containing a
three-shell tumour (necrotic core, label 1, inside an enhancing rim,
label 3, inside an edema ellipsoid, label 2). Per-tissue intensity means
are fixed constants chosen so T1ce is brightest on the rim and FLAIR on
the edema; Gaussian noise (sigma 0.1) is added inside the brain only.

Pipeline order is crop -> znormalize -> augment. Augmentation draws, in
this fixed order: three per-axis flip coins, one in-plane quarter-turn
count, four per-channel brightness scales. The caller owns seed
derivation; trainers use (seed, crc32(case_id), epoch) streams so results
do not depend on worker scheduling.

On-disk layout: ``<root>/<case_id>/{t1,t1ce,t2,flair,seg}.nii`` plus a
``manifest.txt`` at the root listing case ids one per line.
"""

import os
from dataclasses import dataclass

import numpy as np

from .nifti import read_volume, write_volume
from .tensor import ShapeError

MODALITIES = ("t1", "t1ce", "t2", "flair")
SYNTH_SIZES = (16, 32, 64)

# Mean intensity per modality (rows) and tissue (columns: brain, necrotic
# core, edema, enhancing rim). Invented constants; the contrast pattern,
# not the absolute scale, is what downstream code relies on.
TISSUE_MEANS = {
    "t1":    (1.0, 0.7, 0.8, 0.9),
    "t1ce":  (1.0, 0.6, 0.9, 1.8),
    "t2":    (1.0, 1.3, 1.4, 1.1),
    "flair": (1.0, 1.1, 1.8, 1.2),
}
NOISE_SIGMA = 0.1


@dataclass
class Case:
    """One subject: stacked modalities, labels, physical spacing."""

    id: str
    image: np.ndarray    # [4, D, H, W] float32
    labels: np.ndarray   # [D, H, W] uint8, values in {0,1,2,3}
    spacing: tuple

    def validate(self):
        if self.image.ndim != 4 or self.image.shape[0] != len(MODALITIES):
            raise ShapeError(
                f"image must be [4, D, H, W], got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise ShapeError(
                f"labels shape {self.labels.shape} does not match image "
                f"spatial shape {self.image.shape[1:]}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"labels must be integers, got "
                             f"{self.labels.dtype}")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() > 3):
            raise ValueError("labels must lie in {0, 1, 2, 3}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive reals, "
                             f"got {self.spacing!r}")
        return self


@dataclass
class SplitPlan:
    """Deterministic fold assignment: shuffle sorted ids by seed, deal
    round-robin. A pure function of (id set, seed); input order never
    matters."""

    n_folds: int = 5
    fold: int = 4
    seed: int = 42

    def validate(self):
        if self.n_folds < 2:
            raise ValueError(f"n_folds must be >= 2, got {self.n_folds}")
        if not 0 <= self.fold < self.n_folds:
            raise ValueError(
                f"fold must lie in [0, {self.n_folds}), got {self.fold}")
        return self

    def assignment(self, case_ids):
        self.validate()
        ids = sorted(case_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("case ids must be unique")
        if len(ids) < self.n_folds:
            raise ValueError(
                f"{len(ids)} cases cannot fill {self.n_folds} folds")
        perm = np.random.default_rng(self.seed).permutation(len(ids))
        return {ids[int(p)]: i % self.n_folds for i, p in enumerate(perm)}


def split_folds(case_ids, plan):
    """(train_ids, val_ids) for plan.fold, both sorted."""
    assign = plan.assignment(case_ids)
    val = sorted(i for i, f in assign.items() if f == plan.fold)
    train = sorted(i for i, f in assign.items() if f != plan.fold)
    return train, val


# ------------------------------------------------------------- synthesis


def _ellipsoid(shape, center, semi_axes):
    grid = np.indices(shape, dtype=np.float64)
    acc = np.zeros(shape, dtype=np.float64)
    for ax in range(3):
        acc += ((grid[ax] - center[ax]) / semi_axes[ax]) ** 2
    return acc <= 1.0


def generate_synthetic_case(seed, size=32, spacing=(1.0, 1.0, 1.0)):
    """Deterministic phantom case for a given seed. size is the cubic extent."""
    if size not in SYNTH_SIZES:
        raise ValueError(f"size must be one of {SYNTH_SIZES}, got {size}")
    shape = (size, size, size)
    # Rare degenerate draws (an ellipsoid shell covering no voxel centre)
    # are retried on a derived stream, keeping the result a pure function
    # of the seed.
    for attempt in range(64):
        rng = np.random.default_rng([seed, attempt])
        labels = _draw_labels(rng, shape)
        if all((labels == lab).any() for lab in (1, 2, 3)):
            break
    else:
        raise RuntimeError("synthetic tumour construction failed to nest")

    brain = _ellipsoid(shape, np.full(3, (size - 1) / 2.0),
                       np.full(3, 0.45 * size))
    image = np.zeros((len(MODALITIES),) + shape, dtype=np.float32)
    # tissue index per voxel: 0 brain, 1..3 tumour labels; surround stays 0
    for ci, mod in enumerate(MODALITIES):
        means = TISSUE_MEANS[mod]
        chan = np.where(brain, means[0], 0.0)
        for lab in (1, 2, 3):
            chan = np.where(labels == lab, means[lab], chan)
        noise = rng.normal(0.0, NOISE_SIGMA, size=shape)
        chan = np.where(brain, chan + noise, 0.0)
        image[ci] = chan.astype(np.float32)
    labels = np.where(brain, labels, 0).astype(np.uint8)
    return Case(id=f"case_{seed:04d}", image=image, labels=labels,
                spacing=tuple(float(s) for s in spacing)).validate()


def _draw_labels(rng, shape):
    size = shape[0]
    # Rim and core are concentric scaled copies of the edema ellipsoid, so
    # label nesting holds by construction. Semi-axes around 0.3 * size keep
    # the tumour at roughly 10-16% of the volume: small enough to leave the
    # localization problem real, large enough that every class contributes
    # hundreds of voxels to the loss at the 32-voxel working extent.
    semi = rng.uniform(0.24 * size, 0.34 * size, size=3)
    lo = np.ceil(semi + 0.08 * size)
    hi = size - 1 - lo
    center = np.array([rng.uniform(lo[i], hi[i]) for i in range(3)])
    edema = _ellipsoid(shape, center, semi)
    rim = _ellipsoid(shape, center, semi * 0.75)
    core = _ellipsoid(shape, center, semi * 0.45)
    labels = np.zeros(shape, dtype=np.uint8)
    labels[edema] = 2
    labels[rim & ~core] = 3
    labels[core] = 1
    return labels


# ------------------------------------------------------------ file layout


def save_case(root, case):
    """Write one case directory plus its five .nii files."""
    case.validate()
    cdir = os.path.join(root, case.id)
    os.makedirs(cdir, exist_ok=True)
    for ci, mod in enumerate(MODALITIES):
        write_volume(os.path.join(cdir, f"{mod}.nii"),
                     case.image[ci], case.spacing)
    write_volume(os.path.join(cdir, "seg.nii"), case.labels, case.spacing)


def load_case(root, case_id):
    cdir = os.path.join(root, case_id)
    channels = []
    spacing = None
    for mod in MODALITIES:
        vol, sp = read_volume(os.path.join(cdir, f"{mod}.nii"))
        if spacing is not None and sp != spacing:
            raise ValueError(
                f"{case_id}: modality {mod} spacing {sp} disagrees with "
                f"{spacing}")
        spacing = sp
        channels.append(vol.astype(np.float32))
    labels, sp = read_volume(os.path.join(cdir, "seg.nii"))
    if sp != spacing:
        raise ValueError(f"{case_id}: seg spacing {sp} disagrees with "
                         f"{spacing}")
    return Case(id=case_id, image=np.stack(channels), spacing=spacing,
                labels=labels.astype(np.uint8)).validate()


def write_manifest(root, case_ids):
    with open(os.path.join(root, "manifest.txt"), "w", encoding="utf-8") as fh:
        for cid in case_ids:
            fh.write(cid + "\n")


def read_manifest(root):
    path = os.path.join(root, "manifest.txt")
    with open(path, "r", encoding="utf-8") as fh:
        ids = [line.strip() for line in fh if line.strip()]
    if not ids:
        raise ValueError(f"manifest {path} lists no cases")
    return ids


def generate_dataset(root, n_cases, size=32, spacing=(1.0, 1.0, 1.0),
                     base_seed=0):
    """Generate n_cases phantoms under root and write the manifest."""
    ids = []
    for i in range(n_cases):
        case = generate_synthetic_case(base_seed + i, size, spacing)
        save_case(root, case)
        ids.append(case.id)
    write_manifest(root, ids)
    return ids


# ---------------------------------------------------------- preprocessing


def znormalize(image):
    """Per-channel z-score over the nonzero mask; background stays zero.

    The mask is voxels where any channel is nonzero. Statistics and the
    transform both apply to mask voxels only, which makes the operation
    idempotent (a second pass sees mean 0 / std 1 on the same mask).
    """
    if image.ndim != 4:
        raise ShapeError(f"image must be [C, D, H, W], got {image.shape}")
    mask = (image != 0).any(axis=0)
    out = image.astype(np.float32, copy=True)
    if not mask.any():
        return out
    for ci in range(image.shape[0]):
        vals = image[ci][mask].astype(np.float64)
        mean = vals.mean()
        std = max(vals.std(), 1e-8)
        out[ci][mask] = ((vals - mean) / std).astype(np.float32)
    return out


def _windows(in_extent, out_extent):
    """Source and destination slices for one axis of a centred crop/pad."""
    if in_extent >= out_extent:
        start = (in_extent - out_extent) // 2
        return slice(start, start + out_extent), slice(0, out_extent)
    pad = (out_extent - in_extent) // 2
    return slice(0, in_extent), slice(pad, pad + in_extent)


def crop_or_pad_array(arr, roi):
    """Centre crop/pad the trailing 3 axes of arr to roi, zero-filling."""
    if len(roi) != 3 or any(r < 1 for r in roi):
        raise ValueError(f"roi must be 3 extents >= 1, got {roi!r}")
    spatial = arr.shape[-3:]
    pairs = [_windows(spatial[i], roi[i]) for i in range(3)]
    out = np.zeros(arr.shape[:-3] + tuple(roi), dtype=arr.dtype)
    src = (Ellipsis,) + tuple(p[0] for p in pairs)
    dst = (Ellipsis,) + tuple(p[1] for p in pairs)
    out[dst] = arr[src]
    return out


def crop_or_pad(case, roi):
    """Centre crop (when larger) or zero-pad (when smaller) to roi."""
    case.validate()
    return Case(id=case.id,
                image=crop_or_pad_array(case.image, roi),
                labels=crop_or_pad_array(case.labels, roi),
                spacing=case.spacing)


# ----------------------------------------------------------- augmentation


def augment(case, seed, rotate=True, brightness=True):
    """Random flips, one in-plane quarter turn, per-channel brightness.

    Image and labels receive the identical spatial transform; brightness
    touches the image only. Draw order is fixed (flips, rotation,
    brightness) so a seed fully determines the transform.
    """
    case.validate()
    d, h, w = case.labels.shape
    if rotate and not (d == h == w):
        raise ShapeError(
            f"in-plane rotation needs cubic extents, got {(d, h, w)}")
    rng = np.random.default_rng(seed)
    flips = [bool(rng.random() < 0.5) for _ in range(3)]
    k = int(rng.integers(0, 4)) if rotate else 0
    scales = rng.uniform(0.9, 1.1, size=len(MODALITIES)) if brightness \
        else np.ones(len(MODALITIES))

    image, labels = case.image, case.labels
    for ax, flip in enumerate(flips):
        if flip:
            image = np.flip(image, axis=1 + ax)
            labels = np.flip(labels, axis=ax)
    if k:
        image = np.rot90(image, k, axes=(2, 3))
        labels = np.rot90(labels, k, axes=(1, 2))
    image = np.ascontiguousarray(image)
    if brightness:
        image = image * scales[:, None, None, None].astype(np.float32)
    return Case(id=case.id, image=image,
                labels=np.ascontiguousarray(labels), spacing=case.spacing)


def binarize(labels):
    """Foreground mask (labels > 0) as uint8."""
    return (np.asarray(labels) > 0).astype(np.uint8)


def with_mask_channel(image, labels):
    """Append the binarized label mask as an extra input channel.

    Off by default everywhere; it feeds label-derived signal into the
    input, so it exists only behind an explicit config flag.
    """
    if image.ndim != 4:
        raise ShapeError(f"image must be [C, D, H, W], got {image.shape}")
    mask = binarize(labels).astype(image.dtype)[None]
    return np.concatenate([image, mask], axis=0)
