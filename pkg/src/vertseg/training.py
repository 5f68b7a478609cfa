"""Loss, learning-rate schedule, optimiser loop, checkpointing, and
training-history capture.

The schedule ramps linearly from the start anchor to the peak over the
first 10% of epochs, then decays exponentially to hit the final anchor
exactly at the last epoch. Loss is binary cross-entropy plus smooth Dice,
applied to the final mask with an equal-weight auxiliary term on network
1's mask (deep supervision; configurable).
"""

from __future__ import annotations

import io
import json
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import augment, normalize_intensity, sample_rng
from .network import (ARCHITECTURES, WEIGHT_SCHEMA_VERSION, _array_bytes,
                      _write_entry, config_from_dict, config_to_dict)

PRED_CLAMP = 1e-7
DICE_SMOOTH = 1.0


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite; carries epoch and step."""

    def __init__(self, epoch, step, value):
        super().__init__(
            f"non-finite loss ({value}) at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 160
    batch_size: int = 8
    lr_start: float = 1e-5
    lr_peak: float = 4.8e-4
    lr_final: float = 1.52e-4
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    w_bce: float = 1.0
    w_dice: float = 1.0
    supervise_mask1: bool = True
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not (0.0 < self.lr_start < self.lr_peak):
            raise ValueError("need 0 < lr_start < lr_peak")
        if not (0.0 < self.lr_final < self.lr_peak):
            raise ValueError("need 0 < lr_final < lr_peak")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")

    def schedule_fields(self):
        """Fields a resumed run must not change (schedule consistency)."""
        return {k: getattr(self, k) for k in
                ("epochs", "batch_size", "lr_start", "lr_peak", "lr_final",
                 "warmup_fraction", "w_bce", "w_dice", "supervise_mask1", "seed")}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def warmup_end_epoch(cfg):
    return int(math.ceil(cfg.warmup_fraction * cfg.epochs))


def lr_at(epoch, cfg):
    """Learning rate at an epoch: linear ramp to the peak, then exponential
    decay reaching the final anchor exactly at the last epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    we = warmup_end_epoch(cfg)
    last = cfg.epochs - 1
    if epoch == 0:
        return cfg.lr_start
    if epoch == we:
        return cfg.lr_peak
    if epoch == last:
        return cfg.lr_final
    if epoch < we:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * epoch / we
    # we < epoch < last; geometric interpolation between the two anchors
    frac = (epoch - we) / (last - we)
    return cfg.lr_peak * (cfg.lr_final / cfg.lr_peak) ** frac


# -- loss -------------------------------------------------------------------


def _per_sample_flat(t):
    n = t.shape[0] if t.ndim >= 3 else 1
    return t.reshape(n, int(np.prod(t.shape) // n))


def bce_dice_loss(pred, target, weights=(1.0, 1.0)):
    """w_bce * BCE + w_dice * (1 - smooth Dice), averaged over the batch.

    Predictions are clamped to [1e-7, 1 - 1e-7]; targets must be binary and
    shape-matched. The leading axis is the batch when rank >= 3; a rank-2
    input is one sample.
    """
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    tgt = np.asarray(target.data if isinstance(target, Tensor) else target,
                     dtype=float)
    if pred.shape != tgt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {tgt.shape}")
    if not np.isin(tgt, (0.0, 1.0)).all():
        raise ValueError("target mask must contain only 0 and 1")
    w_bce, w_dice = weights

    p = _per_sample_flat(pred.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP))
    g = _per_sample_flat(Tensor(tgt)).data

    bce = -(Tensor(g) * p.log() + Tensor(1.0 - g) * (1.0 - p).log()).mean()
    inter = (p * Tensor(g)).sum(axis=1)
    denom = p.sum(axis=1) + g.sum(axis=1)
    dice = 1.0 - ((inter * 2.0 + DICE_SMOOTH) / (denom + DICE_SMOOTH)).mean()
    return bce * w_bce + dice * w_dice


# -- optimiser -----------------------------------------------------------------


class Adam:
    """Adaptive-moment optimiser over a parameter list."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self):
        state = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m{i}"] = m
            state[f"v{i}"] = v
        return state

    def load_state_arrays(self, state):
        self.t = int(state["t"])
        for i in range(len(self.params)):
            self.m[i] = np.asarray(state[f"m{i}"], dtype=float).copy()
            self.v[i] = np.asarray(state[f"v{i}"], dtype=float).copy()


# -- history ---------------------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "train_f1",
                   "valid_loss", "valid_f1", "wall_time")


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)
    schedule: dict = field(default_factory=dict)
    best_epoch: int = -1
    best_valid_f1: float = -1.0
    best_state: dict | None = None

    def record(self, **kwargs):
        self.rows.append({k: kwargs[k] for k in HISTORY_COLUMNS})

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(HISTORY_COLUMNS) + "\n")
            for row in self.rows:
                fh.write(",".join(_fmt(row[c]) for c in HISTORY_COLUMNS) + "\n")
        return path

    @classmethod
    def from_csv(cls, path):
        hist = cls()
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            assert tuple(header) == HISTORY_COLUMNS
            for line in fh:
                vals = line.strip().split(",")
                row = dict(zip(HISTORY_COLUMNS, map(float, vals)))
                row["epoch"] = int(row["epoch"])
                hist.rows.append(row)
        return hist


def _fmt(v):
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


# -- training loop ------------------------------------------------------------------


def _batch_arrays(samples, mode, cfg, augment_cfg, epoch):
    """Normalise (and in train mode augment) samples into NCHW arrays."""
    imgs, masks = [], []
    for s in samples:
        rng = sample_rng(cfg.seed, s.volume_id, s.slice_index, epoch)
        img = normalize_intensity(s.image, mode=mode, rng=rng)
        work = s
        if mode == "train" and augment_cfg is not None:
            work = augment(replace(s, image=img), augment_cfg, rng)
            img = work.image
        imgs.append(img[None])
        masks.append(work.mask[None].astype(float))
    return np.stack(imgs), np.stack(masks)


def _f1_from_counts(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return (2 * tp / denom) if denom > 0 else 0.0


def evaluate_split(model, samples, cfg, batch_size=None):
    """Mean loss and pooled F1 of the final mask over a sample list."""
    batch_size = batch_size or cfg.batch_size
    was_training = model.training
    model.eval()
    losses = []
    tp = fp = fn = 0
    try:
        with ad.no_grad():
            for i in range(0, len(samples), batch_size):
                chunk = samples[i:i + batch_size]
                x, y = _batch_arrays(chunk, "eval", cfg, None, 0)
                _, m2 = model(Tensor(x))
                losses.append(float(bce_dice_loss(
                    m2, y, (cfg.w_bce, cfg.w_dice)).data))
                pred = m2.data >= cfg.threshold
                gt = y >= 0.5
                tp += int(np.sum(pred & gt))
                fp += int(np.sum(pred & ~gt))
                fn += int(np.sum(~pred & gt))
    finally:
        model.train(was_training)
    return float(np.mean(losses)), _f1_from_counts(tp, fp, fn)


def train(model, data, cfg, *, augment_cfg=None, start_epoch=0,
          optimizer=None, history=None, stop_epoch=None):
    """Optimise `model` on `data` = {'train': [...], 'valid': [...]}.

    Runs epochs [start_epoch, stop_epoch or cfg.epochs); per-epoch metrics
    are recorded and the best-valid-F1 weights are retained on the history.
    Raises TrainingDiverged on a non-finite loss.
    """
    train_samples = list(data.get("train", ()))
    if not train_samples:
        raise ValueError("training set is empty")
    valid_samples = list(data.get("valid", ())) or train_samples

    if history is None:
        history = TrainHistory(schedule=cfg.schedule_fields())
    elif history.schedule and history.schedule != cfg.schedule_fields():
        diffs = [k for k, v in cfg.schedule_fields().items()
                 if history.schedule.get(k) != v]
        raise ValueError(
            "resume rejected: schedule fields changed: " + ", ".join(diffs))

    optimizer = optimizer or Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    stop_epoch = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    model.train()

    for epoch in range(start_epoch, stop_epoch):
        t0 = time.time()
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng(
            np.random.SeedSequence([abs(cfg.seed), epoch, 0xB0BA])
        ).permutation(len(train_samples))
        epoch_losses = []
        tp = fp = fn = 0
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = [train_samples[i] for i in order[lo:lo + cfg.batch_size]]
            x, y = _batch_arrays(chunk, "train", cfg, augment_cfg, epoch)
            mask1, mask2 = model(Tensor(x))
            loss = bce_dice_loss(mask2, y, (cfg.w_bce, cfg.w_dice))
            if cfg.supervise_mask1:
                loss = loss + bce_dice_loss(mask1, y, (cfg.w_bce, cfg.w_dice))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, step, value)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            epoch_losses.append(value)
            pred = mask2.data >= cfg.threshold
            gt = y >= 0.5
            tp += int(np.sum(pred & gt))
            fp += int(np.sum(pred & ~gt))
            fn += int(np.sum(~pred & gt))

        valid_loss, valid_f1 = evaluate_split(model, valid_samples, cfg)
        history.record(epoch=epoch, lr=lr,
                       train_loss=float(np.mean(epoch_losses)),
                       train_f1=_f1_from_counts(tp, fp, fn),
                       valid_loss=valid_loss, valid_f1=valid_f1,
                       wall_time=time.time() - t0)
        if valid_f1 > history.best_valid_f1:
            history.best_valid_f1 = valid_f1
            history.best_epoch = epoch
            history.best_state = {k: v.copy() for k, v in model.state_dict().items()}
    return model, history


# -- checkpointing -------------------------------------------------------------------


def checkpoint(path, model, optimizer, history, cfg, next_epoch):
    """Single-file checkpoint: manifest + model state + optimiser moments +
    history rows. Resuming continues the same schedule and RNG streams
    (both are pure functions of (config, epoch))."""
    manifest = {
        "schema_version": WEIGHT_SCHEMA_VERSION,
        "kind": "checkpoint",
        "architecture": model.architecture,
        "model_config": config_to_dict(model.config),
        "train_config": cfg.to_dict(),
        "next_epoch": int(next_epoch),
        "history": {
            "rows": history.rows,
            "schedule": history.schedule,
            "best_epoch": history.best_epoch,
            "best_valid_f1": history.best_valid_f1,
        },
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=2,
                                                     sort_keys=True))
        state = model.state_dict()
        for name in sorted(state):
            _write_entry(zf, f"model/{name}.npy", _array_bytes(state[name]))
        for name, arr in optimizer.state_arrays().items():
            _write_entry(zf, f"optim/{name}.npy", _array_bytes(arr))
        if history.best_state is not None:
            for name in sorted(history.best_state):
                _write_entry(zf, f"best/{name}.npy",
                             _array_bytes(history.best_state[name]))
    return path


@dataclass
class Checkpoint:
    model: object
    history: TrainHistory
    next_epoch: int
    optimizer: Adam
    config: TrainConfig

    def __iter__(self):  # (model, history, next_epoch) unpacking
        return iter((self.model, self.history, self.next_epoch))


def resume(path):
    """Load a checkpoint: returns (model, history, next_epoch) plus the
    restored optimiser and train config as attributes."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json").decode())
            entries = {name: zf.read(name) for name in zf.namelist()}
    except (FileNotFoundError, zipfile.BadZipFile, KeyError) as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("kind") != "checkpoint":
        raise ValueError(f"{path} is not a training checkpoint")

    model = ARCHITECTURES[manifest["architecture"]](
        config_from_dict(manifest["model_config"]))
    model_state = {}
    optim_state = {}
    best_state = {}
    for name, payload in entries.items():
        if name == "manifest.json":
            continue
        arr = np.load(io.BytesIO(payload))
        scope, key = name.split("/", 1)
        key = key[:-len(".npy")]
        if scope == "model":
            model_state[key] = arr
        elif scope == "optim":
            optim_state[key] = arr
        elif scope == "best":
            best_state[key] = arr
    model.load_state_dict(model_state)

    cfg = TrainConfig.from_dict(manifest["train_config"])
    optimizer = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    optimizer.load_state_arrays(optim_state)

    h = manifest["history"]
    history = TrainHistory(rows=h["rows"], schedule=h["schedule"],
                           best_epoch=h["best_epoch"],
                           best_valid_f1=h["best_valid_f1"],
                           best_state=best_state or None)
    return Checkpoint(model=model, history=history,
                      next_epoch=manifest["next_epoch"],
                      optimizer=optimizer, config=cfg)
