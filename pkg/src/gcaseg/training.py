"""Training loop: optimizer, schedule, accumulation, validation, run log.

The optimizer is decoupled-weight-decay Adam (beta1 0.9, beta2 0.999,
eps 1e-8): p <- p - lr_t * (m_hat / (sqrt(v_hat) + eps) + wd * p). The
learning rate follows a cosine-with-warmup schedule over the total
optimizer-step count. Micro-batch losses inside one accumulation window
are averaged (each scaled by 1/window size before backward), and a
partial window at epoch end still flushes, so no gradient is dropped on
small datasets.

Determinism contract: single process, single thread. The per-epoch case
order is drawn from default_rng([seed, epoch]) and each augmentation from
default_rng([seed, crc32(case_id), epoch]), so reruns and checkpoint
resumes are bitwise reproducible without serializing generator state.
Wall-clock and memory probes are injectable for the same reason: with a
fixed clock the emitted run log is bitwise stable.

Run log CSV columns: epoch, train_loss, val_loss, val_dice_et,
val_dice_tc, val_dice_wt, val_dice_mean, lr, epoch_seconds,
peak_rss_bytes. Epochs are 1-based; epochs without validation leave the
val fields empty. The file is rewritten in full after every epoch.

Checkpoints (last.ckpt each epoch, best.ckpt on improved mean validation
Dice over ET/TC/WT) carry parameters, optimizer moments, counters, the
resolved config, and the run log rows, which is exactly the state needed
for a bitwise resume.
"""

import math
import resource
import sys
import time
from dataclasses import replace
from pathlib import Path
from zlib import crc32

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import loss_config_from, network_config_from
from .data import SplitPlan, augment, crop_or_pad, load_case, read_manifest, \
    split_folds, znormalize
from .inference import plan_tiles, sliding_window_infer
from .losses import combined_loss
from .metrics import REGION_LABELS, REGION_ORDER, dice
from .network import SegmentationModel, predict_labels
from .tensor import Tape, Tensor, backward

RUN_LOG_HEADER = ("epoch,train_loss,val_loss,val_dice_et,val_dice_tc,"
                  "val_dice_wt,val_dice_mean,lr,epoch_seconds,"
                  "peak_rss_bytes")

LAST_CKPT = "last.ckpt"
BEST_CKPT = "best.ckpt"
RUN_LOG = "run_log.csv"


class TrainingError(RuntimeError):
    """Raised when training cannot continue (non-finite loss, bad state)."""


def peak_rss_bytes():
    """Lifetime peak resident set size of this process, in bytes."""
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # ru_maxrss is KiB on Linux, bytes on macOS
    return peak if sys.platform == "darwin" else peak * 1024


def cosine_warmup_lr(step, total_steps, warmup_steps, base_lr):
    """Linear 0 -> base_lr over warmup, then cosine base_lr -> 0.

    step may exceed total_steps; the result is floored at 0.
    """
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= warmup_steps < total_steps:
        raise ValueError(
            f"warmup_steps must lie in [0, total_steps), got "
            f"{warmup_steps} with total_steps {total_steps}")
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    frac = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return max(0.0, base_lr * 0.5 * (1.0 + math.cos(math.pi * frac)))


class AdamW:
    """Decoupled-weight-decay Adam over a name -> Parameter mapping.

    Moments live in the parameter dtype. A parameter whose grad is None
    this step is skipped entirely (its moments do not decay), matching
    the usual convention for branches absent from the recorded graph.
    The shared step counter t equals each updated parameter's own step
    count because graph participation is constant for a fixed patch
    size: a parameter either receives a gradient every step or never.
    """

    def __init__(self, params, lr=3e-4, weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr_t=None):
        if lr_t is None:
            lr_t = self.lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr_t * (update + self.weight_decay * p.data)


def _fmt(value):
    return "" if value is None else repr(float(value))


class Trainer:
    """Owns the model, optimizer, data splits, and the run log.

    clock and rss_fn exist so tests can make the emitted log bitwise
    deterministic; real runs use the defaults.
    """

    def __init__(self, cfg, data_root, out_dir,
                 clock=time.perf_counter, rss_fn=peak_rss_bytes):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._clock = clock
        self._rss = rss_fn

        case_ids = read_manifest(data_root)
        if not case_ids:
            raise TrainingError(f"manifest at {data_root} lists no cases")
        if cfg.all_samples_as_train:
            self.train_ids, self.val_ids = sorted(case_ids), []
        else:
            plan = SplitPlan(n_folds=5, fold=cfg.fold, seed=cfg.seed)
            self.train_ids, self.val_ids = split_folds(case_ids, plan)
        self.max_epochs = cfg.max_epochs
        if cfg.is_debugging:
            self.train_ids = self.train_ids[:2]
            self.val_ids = self.val_ids[:2]
            self.max_epochs = min(self.max_epochs, 2)
        if not self.train_ids:
            raise TrainingError("training split is empty")

        # images are normalized once up front; augmentation multiplies
        # normalized intensities and background stays exactly zero
        self.cases = {}
        for cid in [*self.train_ids, *self.val_ids]:
            case = load_case(data_root, cid)
            self.cases[cid] = replace(case, image=znormalize(case.image))

        self.model = SegmentationModel(
            network_config_from(cfg), rng=np.random.default_rng(cfg.seed))
        self.loss_cfg = loss_config_from(cfg)
        self.opt = AdamW(self.model.parameters(), lr=cfg.lr,
                         weight_decay=cfg.weight_decay)
        if cfg.mednext_ckpt is not None:
            arrays, _ = load_checkpoint(cfg.mednext_ckpt)
            self.model.load_parameters({
                k[len("param/"):]: a for k, a in arrays.items()
                if k.startswith("param/")})

        n_batches = math.ceil(len(self.train_ids) / cfg.batch_size)
        steps_per_epoch = math.ceil(n_batches / cfg.accumulate_grad_batches)
        self.total_steps = self.max_epochs * steps_per_epoch
        self.warmup_steps = min(
            max(1, int(cfg.warmup_fraction * self.total_steps)),
            self.total_steps - 1)

        self.epoch = 0          # completed epochs
        self.global_step = 0    # completed optimizer steps
        self.best_dice = None
        self.last_lr = None
        self.rows = []

    # ------------------------------------------------------------ state

    def run_log_text(self):
        return "\n".join([RUN_LOG_HEADER, *self.rows]) + "\n"

    def _state(self):
        arrays = {"epoch": np.array(self.epoch, dtype=np.int64),
                  "global_step": np.array(self.global_step, dtype=np.int64),
                  "adam/t": np.array(self.opt.t, dtype=np.int64),
                  "best_dice": np.array(
                      math.nan if self.best_dice is None else self.best_dice,
                      dtype=np.float64)}
        for name, p in self.model.parameters().items():
            arrays[f"param/{name}"] = p.data
        for name, m in self.opt.m.items():
            arrays[f"adam/m/{name}"] = m
        for name, v in self.opt.v.items():
            arrays[f"adam/v/{name}"] = v
        text = {"config": self.cfg.resolved_text(),
                "run_log": self.run_log_text()}
        return arrays, text

    def save(self, path):
        arrays, text = self._state()
        save_checkpoint(path, arrays, text)

    def resume(self, path):
        """Restore a checkpoint written by this trainer.

        The stored resolved config must match the current one exactly;
        anything else silently breaks the schedule and the bitwise
        reproducibility contract.
        """
        arrays, text = load_checkpoint(path)
        stored = text.get("config", "")
        if stored != self.cfg.resolved_text():
            raise TrainingError(
                f"checkpoint at {path} was written under a different "
                f"resolved config; refusing to resume")
        prefixed = {"param/": {}, "adam/m/": {}, "adam/v/": {}}
        for key, arr in arrays.items():
            for prefix, bucket in prefixed.items():
                if key.startswith(prefix):
                    bucket[key[len(prefix):]] = arr
        self.model.load_parameters(prefixed["param/"])
        names = set(self.opt.params)
        for attr, prefix in (("m", "adam/m/"), ("v", "adam/v/")):
            bucket = prefixed[prefix]
            if set(bucket) != names:
                raise TrainingError(
                    f"checkpoint at {path} has a different optimizer "
                    f"state layout")
            for name in names:
                target = getattr(self.opt, attr)[name]
                target[...] = bucket[name].astype(target.dtype)
        self.opt.t = int(arrays["adam/t"])
        self.epoch = int(arrays["epoch"])
        self.global_step = int(arrays["global_step"])
        best = float(arrays["best_dice"])
        self.best_dice = None if math.isnan(best) else best
        lines = text["run_log"].splitlines()
        if not lines or lines[0] != RUN_LOG_HEADER:
            raise TrainingError(f"checkpoint at {path} has a malformed run log")
        self.rows = lines[1:]
        return self

    # ------------------------------------------------------------- loop

    def _batches(self, epoch):
        order = np.random.default_rng(
            [self.cfg.seed, epoch]).permutation(len(self.train_ids))
        ids = [self.train_ids[i] for i in order]
        bs = self.cfg.batch_size
        for b in range(0, len(ids), bs):
            yield ids[b:b + bs]

    def _prepare(self, cid, epoch):
        case = self.cases[cid]
        if self.cfg.aug_type == 1:
            case = augment(case, [self.cfg.seed, crc32(cid.encode()), epoch])
        return crop_or_pad(case, self.cfg.roi)

    def _train_epoch(self, epoch):
        cfg = self.cfg
        chunks = list(self._batches(epoch))
        n_batches = len(chunks)
        accum = cfg.accumulate_grad_batches
        losses = []
        for b, chunk in enumerate(chunks):
            prepared = [self._prepare(cid, epoch) for cid in chunk]
            x = np.stack([c.image for c in prepared])
            y = np.stack([c.labels for c in prepared])
            window_end = min((b // accum) * accum + accum, n_batches)
            n_window = window_end - (b // accum) * accum
            with Tape():
                logits, aux = self.model.forward(Tensor(x))
                loss = combined_loss(logits, aux, y, self.loss_cfg)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingError(
                        f"non-finite training loss {value} at epoch "
                        f"{epoch}, batch {b} (cases {chunk})")
                backward(T.scale(loss, 1.0 / n_window))
            losses.append(value)
            if b == window_end - 1:
                lr_t = cosine_warmup_lr(self.global_step, self.total_steps,
                                        self.warmup_steps, cfg.lr)
                self.opt.step(lr_t)
                self.model.zero_grad()
                self.global_step += 1
                self.last_lr = lr_t
        return sum(losses) / len(losses)

    def _validate(self):
        cfg = self.cfg
        dices = {region: [] for region in REGION_ORDER}
        vlosses = []
        for cid in self.val_ids:
            case = self.cases[cid]
            plan = plan_tiles(case.image.shape[1:], cfg.roi,
                              cfg.infer_overlap)
            logits = sliding_window_infer(
                case.image, self.model, plan,
                sw_batch=cfg.sw_batch_size, blending=cfg.blending)
            pred = predict_labels(logits[None])[0]
            for region in REGION_ORDER:
                members = REGION_LABELS[region]
                dices[region].append(dice(np.isin(pred, members),
                                          np.isin(case.labels, members)))
            # single-scale loss on the blended logits; deep supervision
            # has no meaning for stitched full-volume output
            with T.no_grad():
                vloss = combined_loss(Tensor(logits[None]), [],
                                      case.labels[None], self.loss_cfg)
            vlosses.append(float(vloss.data))
        region_means = {r: sum(v) / len(v) for r, v in dices.items()}
        return {"val_loss": sum(vlosses) / len(vlosses),
                "et": region_means["ET"],
                "tc": region_means["TC"],
                "wt": region_means["WT"],
                "mean": sum(region_means.values()) / len(region_means)}

    def fit(self, stop_after_epoch=None):
        """Run epochs until max_epochs (or stop_after_epoch, if earlier).

        stop_after_epoch leaves a resumable last.ckpt behind; calling fit
        again, or resuming in a fresh process, continues the schedule.
        """
        cfg = self.cfg
        last_epoch = self.max_epochs
        if stop_after_epoch is not None:
            last_epoch = min(last_epoch, stop_after_epoch)
        while self.epoch < last_epoch:
            epoch = self.epoch + 1
            t0 = self._clock()
            train_loss = self._train_epoch(epoch)
            val = None
            if self.val_ids and epoch % cfg.check_val_every_n_epoch == 0:
                val = self._validate()
            seconds = self._clock() - t0
            rss = int(self._rss())
            self.epoch = epoch
            if val is None:
                row = (f"{epoch},{_fmt(train_loss)},,,,,,"
                       f"{_fmt(self.last_lr)},{_fmt(seconds)},{rss}")
            else:
                row = (f"{epoch},{_fmt(train_loss)},{_fmt(val['val_loss'])},"
                       f"{_fmt(val['et'])},{_fmt(val['tc'])},"
                       f"{_fmt(val['wt'])},{_fmt(val['mean'])},"
                       f"{_fmt(self.last_lr)},{_fmt(seconds)},{rss}")
            self.rows.append(row)
            (self.out_dir / RUN_LOG).write_text(self.run_log_text(),
                                                encoding="utf-8")
            if val is not None and (self.best_dice is None
                                    or val["mean"] > self.best_dice):
                self.best_dice = val["mean"]
                self.save(self.out_dir / BEST_CKPT)
            self.save(self.out_dir / LAST_CKPT)
        return self


def train(cfg, data_root, out_dir, resume_from=None,
          clock=time.perf_counter, rss_fn=peak_rss_bytes):
    """Run the full loop; returns the finished Trainer."""
    trainer = Trainer(cfg, data_root, out_dir, clock=clock, rss_fn=rss_fn)
    if resume_from is not None:
        trainer.resume(resume_from)
    return trainer.fit()
