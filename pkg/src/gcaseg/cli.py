"""Command-line interface: synth, train, eval, infer, gradcheck.

Conventions shared by every command: the resolved configuration (all
flags, defaults filled in) is printed to stderr before any work starts,
machine-readable output (CSV) goes to stdout, and exit codes are stable
for scripting: 0 success, 1 usage error, 2 data error, 3 numerical
failure.

eval scores a prediction directory against a dataset directory. A case
listed in the manifest but missing from the prediction directory is
scored as an all-background prediction (its rows carry the empty_pred
or empty_both flag) and the command exits 2 after writing the full CSV,
so partial runs are visible but still inspectable.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import load_config, network_config_from, parse_config_text
from .data import MODALITIES, generate_dataset, read_manifest, znormalize
from .inference import plan_tiles, postprocess, sliding_window_infer
from .metrics import MetricsReport
from .network import SegmentationModel, predict_labels
from .nifti import NiftiError, read_volume, write_volume
from .tensor import ShapeError
from .training import Trainer, TrainingError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def _log(msg):
    print(f"[gcaseg] {msg}", file=sys.stderr)


def _banner(command, pairs):
    _log(f"command: {command}")
    for key, value in pairs:
        _log(f"  {key}={value}")


def _parse_spacing(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            f"spacing must be three comma-separated numbers, got {text!r}")
    try:
        spacing = tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"spacing must be numeric, got {text!r}") from None
    if any(s <= 0 for s in spacing):
        raise argparse.ArgumentTypeError(f"spacing must be positive: {text!r}")
    return spacing


# ------------------------------------------------------------------ synth


def _cmd_synth(args):
    _banner("synth", [("out", args.out), ("cases", args.cases),
                      ("size", args.size), ("seed", args.seed),
                      ("spacing", ",".join(map(str, args.spacing))),
                      ("force", args.force)])
    if args.cases < 0:
        _log("error: --cases must be >= 0")
        return EXIT_USAGE
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        _log(f"error: {out} is not empty; pass --force to write anyway")
        return EXIT_DATA
    out.mkdir(parents=True, exist_ok=True)
    ids = generate_dataset(out, args.cases, size=args.size,
                           spacing=args.spacing, base_seed=args.seed)
    _log(f"wrote {len(ids)} cases to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ train


def _cmd_train(args):
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        _log(f"error: config file {args.config} not found")
        return EXIT_DATA
    except ValueError as err:
        _log(f"error: bad config: {err}")
        return EXIT_USAGE
    _banner("train", [("config", args.config), ("data", args.data),
                      ("out", args.out), ("resume", args.resume)])
    for line in cfg.resolved_lines():
        _log(f"  {line}")
    try:
        trainer = Trainer(cfg, args.data, args.out)
        if args.resume is not None:
            trainer.resume(args.resume)
            _log(f"resumed from {args.resume} at epoch {trainer.epoch}")
        trainer.fit()
    except (FileNotFoundError, NiftiError, CheckpointError) as err:
        _log(f"error: {err}")
        return EXIT_DATA
    except TrainingError as err:
        _log(f"error: {err}")
        return EXIT_NUMERICAL
    except ValueError as err:
        _log(f"error: {err}")
        return EXIT_DATA
    best = "n/a" if trainer.best_dice is None else repr(trainer.best_dice)
    _log(f"finished {trainer.epoch} epochs; best mean val dice {best}")
    _log(f"run log: {Path(args.out) / 'run_log.csv'}")
    return EXIT_OK


# ------------------------------------------------------------------- eval


def _cmd_eval(args):
    _banner("eval", [("pred", args.pred), ("gt", args.gt),
                     ("spacing", args.spacing and ",".join(map(str, args.spacing))),
                     ("out", args.out), ("fold", args.fold)])
    try:
        case_ids = read_manifest(args.gt)
    except (FileNotFoundError, ValueError) as err:
        _log(f"error: {err}")
        return EXIT_DATA
    report = MetricsReport()
    missing = []
    for cid in case_ids:
        try:
            gt, gt_spacing = read_volume(Path(args.gt) / cid / "seg.nii")
        except (FileNotFoundError, NiftiError) as err:
            _log(f"error: ground truth for {cid}: {err}")
            return EXIT_DATA
        spacing = args.spacing if args.spacing is not None else gt_spacing
        pred_path = Path(args.pred) / f"{cid}.nii"
        if pred_path.exists():
            try:
                pred, _ = read_volume(pred_path)
            except NiftiError as err:
                _log(f"error: prediction for {cid}: {err}")
                return EXIT_DATA
        else:
            missing.append(cid)
            pred = np.zeros_like(gt)
        report.add_case(pred.astype(np.uint8), gt.astype(np.uint8),
                        spacing, case_id=cid, fold=args.fold)
    csv_text = "\n".join(report.csv_lines()) + "\n"
    sys.stdout.write(csv_text)
    out_path = Path(args.out) if args.out else Path(args.pred) / "metrics.csv"
    out_path.write_text(csv_text, encoding="utf-8")
    _log(f"wrote {out_path}")
    for region, stats in report.aggregate().items():
        _log(f"  {region}: dice {stats['dice']:.4f} iou {stats['iou']:.4f} "
             f"(n={stats['n_cases']}, hd missing {stats['n_hd_missing']})")
    if missing:
        _log(f"error: {len(missing)} case(s) missing from {args.pred}: "
             f"{', '.join(missing[:5])}")
        return EXIT_DATA
    return EXIT_OK


# ------------------------------------------------------------------ infer


def _resolve_infer_inputs(paths):
    """Each input is a case directory or a dataset root with a manifest."""
    cases = []
    for raw in paths:
        p = Path(raw)
        if (p / "manifest.txt").exists():
            cases.extend((cid, p / cid) for cid in read_manifest(p))
        elif p.is_dir():
            cases.append((p.name, p))
        else:
            raise FileNotFoundError(f"input {p} is not a directory")
    return cases


def _load_image(case_dir):
    channels, spacing = [], None
    for mod in MODALITIES:
        vol, sp = read_volume(case_dir / f"{mod}.nii")
        if spacing is not None and sp != spacing:
            raise NiftiError(
                f"{case_dir.name}: modality {mod} spacing {sp} disagrees "
                f"with {spacing}")
        spacing = sp
        channels.append(vol.astype(np.float32))
    return np.stack(channels), spacing


def _cmd_infer(args):
    _banner("infer", [("ckpt", args.ckpt), ("in", ";".join(args.inputs)),
                      ("out", args.out), ("overlap", args.overlap)])
    try:
        arrays, text = load_checkpoint(args.ckpt)
        cfg = parse_config_text(text["config"])
    except (FileNotFoundError, CheckpointError, KeyError, ValueError) as err:
        _log(f"error: cannot load checkpoint: {err}")
        return EXIT_DATA
    for line in cfg.resolved_lines():
        _log(f"  {line}")
    model = SegmentationModel(network_config_from(cfg))
    model.load_parameters({k[len("param/"):]: a for k, a in arrays.items()
                           if k.startswith("param/")})
    overlap = cfg.infer_overlap if args.overlap is None else args.overlap
    try:
        cases = _resolve_infer_inputs(args.inputs)
    except (FileNotFoundError, ValueError) as err:
        _log(f"error: {err}")
        return EXIT_DATA
    if not cases:
        _log("error: no input cases")
        return EXIT_DATA
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cid, case_dir in cases:
        try:
            image, spacing = _load_image(case_dir)
        except (FileNotFoundError, NiftiError) as err:
            _log(f"error: {cid}: {err}")
            return EXIT_DATA
        image = znormalize(image)
        try:
            plan = plan_tiles(image.shape[1:], cfg.roi, overlap)
        except ShapeError as err:
            _log(f"error: {cid}: {err}")
            return EXIT_DATA
        n = plan.n_tiles
        _log(f"{cid}: {n} tile{'s' if n != 1 else ''}"
             f"{' (single-tile path)' if n == 1 else ''}")
        logits = sliding_window_infer(image, model, plan,
                                      sw_batch=cfg.sw_batch_size,
                                      blending=cfg.blending)
        if not np.isfinite(logits).all():
            _log(f"error: {cid}: non-finite logits")
            return EXIT_NUMERICAL
        labels = predict_labels(logits[None])[0]
        labels = postprocess(labels, cfg.min_component_voxels)
        write_volume(out / f"{cid}.nii", labels, spacing)
        _log(f"{cid}: wrote {out / f'{cid}.nii'}")
    return EXIT_OK


# -------------------------------------------------------------- gradcheck


def _cmd_gradcheck(args):
    from . import gradcheck as gc

    _banner("gradcheck", [("scope", args.scope), ("seed", args.seed),
                          ("tol", args.tol)])
    suites = {"ops": gc.op_cases, "gca": gc.gca_cases,
              "end2end": gc.end2end_cases}
    cases = suites[args.scope]()
    worst_name, worst = "", 0.0
    failed = 0
    for case in cases:
        err = case.run(seed=args.seed)
        status = "ok" if err < args.tol else "FAIL"
        if err >= args.tol:
            failed += 1
        if err > worst:
            worst_name, worst = case.name, err
        _log(f"  {status}  {case.name}: max rel err {err:.3e}")
    _log(f"{args.scope}: {len(cases) - failed}/{len(cases)} within "
         f"{args.tol:g}; worst {worst_name} at {worst:.3e}")
    return EXIT_OK if failed == 0 else EXIT_NUMERICAL


# ------------------------------------------------------------------- main


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gcaseg",
        description="3D tumor segmentation with graph cross attention: "
                    "synthetic data, training, evaluation, inference.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spacing", type=_parse_spacing, default=(1.0, 1.0, 1.0))
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from (same resolved config)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score predictions against a dataset")
    p.add_argument("--pred", required=True,
                   help="directory holding <case_id>.nii label volumes")
    p.add_argument("--gt", required=True,
                   help="dataset directory with manifest.txt and seg.nii")
    p.add_argument("--spacing", type=_parse_spacing, default=None,
                   help="override voxel spacing d,h,w in mm")
    p.add_argument("--out", default=None,
                   help="CSV path (default: <pred>/metrics.csv)")
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="predict labels for case directories")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inputs", nargs="+", required=True,
                   help="case directories or dataset roots")
    p.add_argument("--out", required=True)
    p.add_argument("--overlap", type=float, default=None,
                   help="tile overlap in [0,1) (default: from checkpoint)")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--scope", choices=("ops", "gca", "end2end"),
                   default="ops")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # argparse exits 2 on usage problems; remap to the documented code
        return EXIT_USAGE if err.code not in (0, None) else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
