"""Config parsing, validation, and the recipe-key compatibility contract."""

import numpy as np
import pytest

from gcaseg.config import (MEDNEXT_SIZES, TrainConfig, load_config,
                           loss_config_from, network_config_from,
                           parse_config_text)

# every key from the training-parameter table, spelled exactly
RECIPE_KEYS = [
    "is_debugging", "all_samples_as_train", "fold", "seed", "max_epochs",
    "mednext_size", "mednext_ksize", "mednext_ckpt", "deep_sup",
    "batch_size", "sw_batch_size", "num_workers", "roi_x", "roi_y", "roi_z",
    "infer_overlap", "aug_type", "loss_type", "mean_batch", "lr",
    "weight_decay", "lr_scheduler", "n_gpus", "pin_memory",
    "check_val_every_n_epoch", "precision", "amp_backend",
    "accumulate_grad_batches",
]


def test_defaults_validate():
    cfg = TrainConfig().validate()
    assert cfg.roi == (32, 32, 32)
    assert cfg.mednext_size == "B" and cfg.loss_type == 3
    assert cfg.lr == 3e-4 and cfg.precision == 32


def test_recipe_keys_all_known():
    for key in RECIPE_KEYS:
        assert key in {f for f in TrainConfig.__dataclass_fields__}


def test_resolved_text_round_trip():
    cfg = TrainConfig(fold=2, seed=7, max_epochs=10, mednext_size="S",
                      lr=1e-3, weight_decay=0.0, aug_type=0, deep_sup=False,
                      infer_overlap=0.25, mednext_ckpt="runs/last.ckpt")
    cfg.validate()
    again = parse_config_text(cfg.resolved_text())
    assert again == cfg


def test_parse_skips_blanks_comments_and_takes_last_duplicate():
    text = "\n# recipe\nseed=1\n\nseed = 9\n  # trailing comment line\n"
    cfg = parse_config_text(text)
    assert cfg.seed == 9


def test_parse_value_coercions():
    cfg = parse_config_text("deep_sup=false\nmean_batch=1\nlr=3e-4\n"
                            "mednext_ckpt=None\n")
    assert cfg.deep_sup is False and cfg.mean_batch is True
    assert cfg.lr == 3e-4 and cfg.mednext_ckpt is None
    cfg = parse_config_text("mednext_ckpt=runs/best.ckpt\n")
    assert cfg.mednext_ckpt == "runs/best.ckpt"


@pytest.mark.parametrize("line,match", [
    ("precision=16", "mixed precision is deliberately not implemented"),
    ("n_gpus=2", "single CPU process"),
    ("amp_backend=apex", "amp_backend"),
    ("lr_scheduler=step", "lr_scheduler"),
    ("mednext_size=L", "mednext_size"),
    ("loss_type=0", "loss_type"),
    ("aug_type=2", "aug_type"),
    ("infer_overlap=1.0", "infer_overlap"),
    ("fold=5", "fold"),
    ("mednext_ksize=4", "odd"),
    ("roi_x=30", "multiple of"),
    ("max_epochs=0", "max_epochs"),
    ("warmup_fraction=1.5", "warmup_fraction"),
    ("blending=linear", "blending"),
])
def test_validation_rejections(line, match):
    with pytest.raises(ValueError, match=match):
        parse_config_text(line + "\n")


@pytest.mark.parametrize("text,match", [
    ("nonsense_key=1\n", "unknown config key"),
    ("just a word\n", "expected key=value"),
    ("deep_sup=maybe\n", "expects True or False"),
    ("seed=4.5\n", "expects an integer"),
    ("lr=fast\n", "expects a number"),
])
def test_parse_rejections(text, match):
    with pytest.raises(ValueError, match=match):
        parse_config_text(text)


def test_load_config_from_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("fold=1\nseed=3\nmax_epochs=2\n", encoding="utf-8")
    cfg = load_config(path)
    assert (cfg.fold, cfg.seed, cfg.max_epochs) == (1, 3, 2)


def test_network_config_mapping():
    for size, (width, blocks) in MEDNEXT_SIZES.items():
        net = network_config_from(TrainConfig(mednext_size=size).validate())
        assert net.base_width == width and net.blocks_per_stage == blocks
        assert net.in_channels == 4 and net.n_classes == 4
    net = network_config_from(
        TrainConfig(binary_mask_channel=True).validate())
    assert net.in_channels == 5


def test_loss_config_mapping():
    expected = {1: (1.0, 0.0), 2: (0.0, 1.0), 3: (1.0, 1.0)}
    for lt, (w_ce, w_dice) in expected.items():
        lc = loss_config_from(TrainConfig(loss_type=lt).validate())
        assert (lc.w_ce, lc.w_dice) == (w_ce, w_dice)
        assert lc.mean_batch is True


def test_float_serialization_is_shortest_round_trip():
    cfg = TrainConfig(lr=0.1 + 0.2)  # 0.30000000000000004
    lines = dict(ln.split("=", 1) for ln in cfg.resolved_lines())
    assert lines["lr"] == repr(0.1 + 0.2)
    assert float(lines["lr"]) == cfg.lr
