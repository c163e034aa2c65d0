"""Tile planning, sliding-window blending, morphological post-processing."""

import numpy as np
import pytest

from gcaseg import tensor as T
from gcaseg.inference import (TilePlan, connected_components, plan_tiles,
                              postprocess, remove_small_components,
                              sliding_window_infer)
from gcaseg.metrics import region_composites
from gcaseg.network import NetworkConfig, SegmentationModel
from gcaseg.tensor import ShapeError


class _ConstantModel:
    """Stand-in emitting fixed logits; enough surface for the slider."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float32)
        self.config = NetworkConfig(n_classes=len(values))

    def forward(self, x):
        b = x.data.shape[0]
        out = np.broadcast_to(
            self.values[None, :, None, None, None],
            (b, len(self.values)) + x.data.shape[2:])
        return T.Tensor(np.ascontiguousarray(out)), []


# ------------------------------------------------------------------ plans


def test_plan_single_tile():
    plan = plan_tiles((32, 32, 32), (32, 32, 32), 0.5)
    assert plan.starts == ((0,), (0,), (0,))
    assert plan.n_tiles == 1


def test_plan_final_tile_clamped():
    plan = plan_tiles((160, 160, 160), (128, 128, 128), 0.5)
    assert plan.starts[0] == (0, 32)


def test_plan_stride_enumeration():
    plan = plan_tiles((48, 48, 48), (16, 16, 16), 0.5)
    assert plan.starts[0] == (0, 8, 16, 24, 32)


def test_plan_coverage_exhaustive():
    for extent in range(8, 65, 8):
        for roi in (8, 16, 32):
            if roi > extent:
                continue
            for overlap in (0.0, 0.25, 0.5):
                plan = plan_tiles((extent,) * 3, (roi,) * 3, overlap)
                for starts in plan.starts:
                    covered = np.zeros(extent, dtype=bool)
                    prev = -1
                    for s in starts:
                        assert s > prev, "starts must increase strictly"
                        assert 0 <= s <= extent - roi
                        covered[s:s + roi] = True
                        prev = s
                    assert covered.all(), (extent, roi, overlap)


def test_plan_rejections():
    with pytest.raises(ShapeError, match="pad the volume"):
        plan_tiles((16, 16, 16), (32, 16, 16), 0.5)
    with pytest.raises(ValueError, match="overlap"):
        plan_tiles((32, 32, 32), (16, 16, 16), 1.0)
    with pytest.raises(ValueError, match="roi"):
        plan_tiles((32, 32, 32), (0, 16, 16), 0.5)


# --------------------------------------------------------------- blending


def test_constant_model_invariance():
    rng = np.random.default_rng(3)
    values = (0.3, -1.2, 2.0, 0.0)
    model = _ConstantModel(values)
    volume = rng.standard_normal((4, 24, 24, 24)).astype(np.float32)
    for overlap in (0.0, 0.25, 0.5):
        for blending in ("constant", "gaussian"):
            plan = plan_tiles((24, 24, 24), (8, 8, 8), overlap)
            out = sliding_window_infer(volume, model, plan, sw_batch=2,
                                       blending=blending)
            assert out.shape == (4, 24, 24, 24)
            for ci, v in enumerate(values):
                assert np.abs(out[ci] - v).max() < 1e-6


def test_single_tile_equals_direct_forward():
    rng = np.random.default_rng(5)
    cfg = NetworkConfig(in_channels=2, n_classes=3, base_width=4, n_stages=2)
    model = SegmentationModel(cfg, rng=rng)
    volume = rng.standard_normal((2, 8, 8, 8)).astype(np.float32)
    plan = plan_tiles((8, 8, 8), (8, 8, 8), 0.5)
    out = sliding_window_infer(volume, model, plan, sw_batch=2,
                               blending="gaussian")
    with T.no_grad():
        direct, _ = model.forward(T.Tensor(volume[None]))
    assert np.abs(out - direct.data[0]).max() < 1e-6


class _TileTaggedModel:
    """Emits a distinct constant per forward call: tile i gets value i."""

    def __init__(self):
        self.config = NetworkConfig(n_classes=2)
        self.calls = 0

    def forward(self, x):
        out = np.full((x.data.shape[0], 2) + x.data.shape[2:],
                      float(self.calls), dtype=np.float32)
        self.calls += 1
        return T.Tensor(out), []


def test_two_tile_overlap_is_arithmetic_mean():
    # extent 24, roi 16, overlap 0.5 -> starts (0, 8); overlap zone [8, 16)
    model = _TileTaggedModel()
    volume = np.zeros((4, 1, 1, 24), dtype=np.float32)
    plan = plan_tiles((1, 1, 24), (1, 1, 16), 0.5)
    assert plan.starts[2] == (0, 8)
    out = sliding_window_infer(volume, model, plan, sw_batch=1,
                               blending="constant")
    assert np.all(out[:, 0, 0, :8] == 0.0)
    assert np.all(out[:, 0, 0, 16:] == 1.0)
    assert np.abs(out[:, 0, 0, 8:16] - 0.5).max() < 1e-7


def test_blending_is_convex_combination():
    rng = np.random.default_rng(7)

    class _NoisyModel:
        config = NetworkConfig(n_classes=2)

        def forward(self, x):
            out = rng.standard_normal(
                (x.data.shape[0], 2) + x.data.shape[2:]).astype(np.float32)
            return T.Tensor(out), []

    volume = np.zeros((4, 16, 16, 16), dtype=np.float32)
    plan = plan_tiles((16, 16, 16), (8, 8, 8), 0.5)
    out = sliding_window_infer(volume, _NoisyModel(), plan, sw_batch=3,
                               blending="gaussian")
    # convexity bound: every voxel within the global min/max of tile logits
    assert out.min() >= -6.0 and out.max() <= 6.0
    assert np.isfinite(out).all()


def test_sw_batch_does_not_change_results():
    rng = np.random.default_rng(9)
    cfg = NetworkConfig(in_channels=2, n_classes=3, base_width=4, n_stages=2)
    model = SegmentationModel(cfg, rng=rng)
    volume = rng.standard_normal((2, 12, 12, 12)).astype(np.float32)
    plan = plan_tiles((12, 12, 12), (8, 8, 8), 0.5)
    outs = [sliding_window_infer(volume, model, plan, sw_batch=b)
            for b in (1, 2, 4)]
    assert np.abs(outs[0] - outs[1]).max() < 1e-6
    assert np.abs(outs[0] - outs[2]).max() < 1e-6


def test_infer_rejects_bad_args():
    model = _ConstantModel((0.0, 1.0))
    plan = plan_tiles((8, 8, 8), (8, 8, 8), 0.0)
    vol = np.zeros((2, 8, 8, 8), dtype=np.float32)
    with pytest.raises(ValueError, match="sw_batch"):
        sliding_window_infer(vol, model, plan, sw_batch=0)
    with pytest.raises(ValueError, match="blending"):
        sliding_window_infer(vol, model, plan, blending="bilinear")
    with pytest.raises(ShapeError):
        sliding_window_infer(vol[0], model, plan)


# -------------------------------------------------------------- morphology


def test_connected_components_basics():
    m = np.zeros((4, 4, 4), dtype=bool)
    m[0, 0, 0] = True
    m[0, 0, 1] = True          # 6-connected with the first voxel
    m[2, 2, 2] = True          # separate component
    m[3, 3, 3] = True          # diagonal: NOT 6-connected to (2,2,2)
    comp, sizes = connected_components(m)
    assert comp[0, 0, 0] == comp[0, 0, 1] != 0
    assert comp[2, 2, 2] != comp[3, 3, 3]
    assert sorted(sizes[1:].tolist()) == [1, 1, 2]
    assert sizes[0] == 0 and (comp[~m] == 0).all()


def test_remove_small_components():
    m = np.zeros((6, 6, 6), dtype=bool)
    m[1:4, 1:4, 1:4] = True    # 27 voxels
    m[5, 5, 5] = True          # singleton
    out = remove_small_components(m, 10)
    assert out[2, 2, 2] and not out[5, 5, 5]
    assert remove_small_components(m, 1).sum() == m.sum()


def test_postprocess_empty_and_isolated_voxel():
    empty = np.zeros((8, 8, 8), dtype=np.uint8)
    assert np.array_equal(postprocess(empty, 10), empty)

    lone = empty.copy()
    lone[4, 4, 4] = 3
    assert postprocess(lone, 10).sum() == 0   # below the size threshold
    assert postprocess(lone, 1)[4, 4, 4] == 3  # threshold 1 keeps it


def test_postprocess_nesting_and_idempotence():
    rng = np.random.default_rng(11)
    for _ in range(8):
        labels = (rng.integers(0, 5, size=(10, 10, 10))
                  .clip(0, 3).astype(np.uint8))
        once = postprocess(labels, 4)
        comps = region_composites(once)
        et = np.argwhere(comps["ET"])
        tc = comps["TC"]
        wt = comps["WT"]
        assert all(tc[tuple(p)] for p in et)
        assert all(wt[tuple(p)] for p in np.argwhere(tc))
        twice = postprocess(once, 4)
        assert np.array_equal(once, twice)


def test_postprocess_preserves_solid_nested_boxes():
    # every composite is a solid box (no concave corners), so one closing
    # pass changes nothing
    labels = np.zeros((12, 12, 12), dtype=np.uint8)
    labels[2:10, 2:10, 2:10] = 2
    labels[4:9, 4:9, 4:9] = 1    # TC box
    labels[5:8, 5:8, 5:8] = 3    # ET box inside it
    out = postprocess(labels, 10)
    assert np.array_equal(out, labels)


def test_postprocess_rounds_concave_corners():
    # a label-1 core is a cavity in the ET composite; closing fills the
    # cavity's corners but keeps its plus-shaped interior
    labels = np.zeros((12, 12, 12), dtype=np.uint8)
    labels[2:10, 2:10, 2:10] = 2
    labels[4:9, 4:9, 4:9] = 3
    labels[5:8, 5:8, 5:8] = 1
    out = postprocess(labels, 10)
    assert out[6, 6, 6] == 1          # cavity centre survives
    assert out[5, 5, 5] == 3          # cavity corner filled by closing
    assert np.array_equal(postprocess(out, 10), out)


def test_postprocess_closing_fills_subelement_holes():
    labels = np.zeros((12, 12, 12), dtype=np.uint8)
    labels[2:10, 2:10, 2:10] = 2
    labels[4:8, 4:8, 4:8] = 3
    labels[5:7, 5:7, 5:7] = 1   # 2-wide core reads as a hole in ET
    out = postprocess(labels, 10)
    assert (out[5:7, 5:7, 5:7] == 3).all()
    assert not (out == 1).any()
