"""Natural training, PGD adversarial training and free training.

All trainers share one loop: shuffled minibatches, optional augmentation, a
per-step batch transform (identity, a PGD attack against the current weights,
or the persistent free-training perturbation) and a momentum SGD update of
the trainable blocks only.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, GradientCounter, pgd, project
from .autodiff import Tape, Tensor, UsageError, make_rng
from .datasets import Dataset, augment, iterate_minibatches


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 64
    lr_schedule: list = field(default_factory=lambda: [(0, 0.01)])
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment: bool = False
    aug_pad: int = 4
    aug_flip: bool = False
    attack: AttackConfig | None = None
    adv_fraction: float = 1.0
    eps_warmup: int = 0
    replay: int = 1
    free_step: float | None = None
    free_reset_per_batch: bool = False
    free_update_delta: bool = True
    seed: int = 0
    bn_update: bool = True
    log_every: int = 50

    def __post_init__(self):
        self.lr_schedule = [tuple(p) for p in self.lr_schedule]
        its = [i for i, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise UsageError("lr schedule iterations must be strictly increasing")
        if self.replay < 1:
            raise UsageError("replay m must be >= 1")
        if self.iterations < 0:
            raise UsageError("iterations must be >= 0")

    def lr_at(self, it: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if it >= start:
                lr = value
        return lr


@dataclass
class LogRow:
    iteration: int
    lr: float
    clean_loss: float
    adv_loss: float | None
    train_acc: float


@dataclass
class TrainResult:
    log: list[LogRow]
    wall_clock_s: float
    attack_gradients: int
    weight_updates: int

    def write_csv(self, path, run_id: str) -> None:
        write_metric_log(path, run_id, self.log)


def write_metric_log(path, run_id: str, rows: list[LogRow], append: bool = True) -> None:
    import os
    new = not os.path.exists(path) or not append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["run_id", "iteration", "lr", "clean_loss", "adv_loss", "train_acc"])
        for r in rows:
            w.writerow([run_id, r.iteration, repr(r.lr), repr(r.clean_loss),
                        "" if r.adv_loss is None else repr(r.adv_loss), repr(r.train_acc)])


def _ce_values(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    return -ad.log_softmax(logits.astype(np.float64))[np.arange(len(y)), y]


class _Stepper:
    """Forward/backward/update on the trainable parameters of ``model``."""

    def __init__(self, model, cfg: TrainConfig, extra_loss=None):
        self.model = model
        self.cfg = cfg
        self.opt = ad.SGDMomentum(cfg.lr_schedule[0][1], cfg.momentum, cfg.weight_decay)
        self.extra_loss = extra_loss
        self.updates = 0
        if not model.trainable_blocks():
            raise UsageError("model has no trainable parameters")
        if not cfg.bn_update:
            for b in model.blocks:
                if b.kind in ("bn", "bn_pool", "residual"):
                    b.config["frozen_bn"] = True

    def params(self):
        out = []
        for name, p in self.model.named_params(trainable_only=True):
            if not self.cfg.bn_update and ("gamma" in name or "beta" in name):
                continue
            out.append((name, p))
        return out

    def step(self, x: np.ndarray, y: np.ndarray, it: int, idx: np.ndarray, want_input_grad=False):
        params = self.params()
        for _, p in self.model.named_params():
            p.grad = None
        saved = [(p, p.requires_grad) for _, p in self.model.named_params()]
        live = {id(p) for _, p in params}
        for p, _ in saved:
            p.requires_grad = id(p) in live
        xt = Tensor(x, requires_grad=want_input_grad)
        try:
            with Tape(seed=make_rng(self.cfg.seed, "tape", it).integers(2 ** 62)) as tape:
                z = self.model.features(xt, training=True)
                logits = self.model.head(z, training=True)
                loss = ad.softmax_cross_entropy(logits, y)
                if self.extra_loss is not None:
                    loss = ad.add(loss, self.extra_loss(z, idx))
            tape.backward(loss)
        finally:
            for p, flag in saved:
                p.requires_grad = flag
        self.opt.lr = self.cfg.lr_at(it)
        self.opt.step(params)
        self.updates += 1
        return logits.data, float(loss.data), xt.grad


def _train(model, data: Dataset, cfg: TrainConfig, mode: str, extra_loss=None,
           counter: GradientCounter | None = None) -> TrainResult:
    counter = counter or GradientCounter()
    t0 = time.perf_counter()
    saved_bn = {b.name: b.config.get("frozen_bn") for b in model.blocks}
    try:
        stepper = _Stepper(model, cfg, extra_loss)
        return _loop(model, data, cfg, mode, stepper, counter, t0)
    finally:
        for b in model.blocks:
            if saved_bn[b.name] is None:
                b.config.pop("frozen_bn", None)
            else:
                b.config["frozen_bn"] = saved_bn[b.name]


def _loop(model, data, cfg, mode, stepper, counter, t0) -> TrainResult:
    log: list[LogRow] = []
    if cfg.iterations == 0:
        return TrainResult(log, 0.0, 0, 0)
    n = len(data)
    if mode == "free" and cfg.attack is not None:
        eps = cfg.attack.eps
        free_step = cfg.free_step if cfg.free_step is not None else eps
        delta = np.zeros((min(cfg.batch_size, n),) + data.shape, dtype=data.images.dtype)
    it, epoch = 0, 0
    while it < cfg.iterations:
        for bi, idx in enumerate(iterate_minibatches(n, cfg.batch_size, cfg.seed, epoch)):
            if it >= cfg.iterations:
                break
            x, y = data.images[idx], data.labels[idx]
            if cfg.augment:
                x = augment(x, cfg.aug_pad, cfg.aug_flip, rng=make_rng(cfg.seed, "augment", it))
            adv_loss = None
            if mode == "adversarial" and cfg.attack is not None and cfg.attack.eps > 0:
                acfg = cfg.attack
                if cfg.eps_warmup:
                    scale = min(1.0, (it + 1) / cfg.eps_warmup)
                    acfg = replace(acfg, eps=acfg.eps * scale, step_size=acfg.step_size * scale)
                acfg = replace(acfg, seed=cfg.seed)
                k = int(round(cfg.adv_fraction * len(idx)))
                xa = x.copy()
                if k:
                    xa[:k] = pgd(model, x[:k], y[:k], acfg, counter, batch_index=it)
                if it % cfg.log_every == 0:
                    # both logged losses use eval mode and the pre-update weights the attack saw
                    clean_loss = float(_ce_values(model.logits(x), y).mean())
                    adv_loss = float(_ce_values(model.logits(xa), y).mean())
                logits, loss, _ = stepper.step(xa, y, it, idx)
                it_logged = [(logits, clean_loss if it % cfg.log_every == 0 else loss)]
            elif mode == "free":
                it_logged = []
                if cfg.free_reset_per_batch:
                    delta[:] = 0
                d = delta[:len(idx)]
                for _ in range(cfg.replay):
                    if it >= cfg.iterations:
                        break
                    xa = np.clip(x + d, 0.0, 1.0).astype(x.dtype)
                    logits, loss, gx = stepper.step(xa, y, it, idx, want_input_grad=cfg.free_update_delta)
                    if cfg.free_update_delta and cfg.attack is not None:
                        counter()
                        d[:] = np.clip(d + free_step * np.sign(gx), -eps, eps)
                    if it % cfg.log_every == 0:
                        log.append(LogRow(it, stepper.opt.lr, loss, loss if cfg.attack else None,
                                          float(np.mean(logits.argmax(1) == y))))
                    it += 1
                continue
            else:
                logits, loss, _ = stepper.step(x, y, it, idx)
                it_logged = [(logits, loss)]
            if it % cfg.log_every == 0:
                lg, cl = it_logged[0]
                log.append(LogRow(it, stepper.opt.lr, cl, adv_loss, float(np.mean(lg.argmax(1) == y))))
            it += 1
        epoch += 1
    return TrainResult(log, time.perf_counter() - t0, counter.count, stepper.updates)


def train_natural(model, dataset: Dataset, cfg: TrainConfig, extra_loss=None) -> TrainResult:
    """Momentum SGD on cross-entropy; frozen blocks are left untouched.

    ``extra_loss(z, idx)`` may add a term computed from the penultimate
    features ``z`` of the minibatch with dataset indices ``idx``.
    """
    return _train(model, dataset, cfg, "natural", extra_loss)


def train_adversarial(model, dataset: Dataset, cfg: TrainConfig,
                      counter: GradientCounter | None = None) -> TrainResult:
    """PGD adversarial training: each minibatch is attacked against the current weights."""
    if cfg.attack is None:
        raise UsageError("train_adversarial needs cfg.attack")
    return _train(model, dataset, cfg, "adversarial", counter=counter)


def free_train(model, dataset: Dataset, cfg: TrainConfig,
               counter: GradientCounter | None = None) -> TrainResult:
    """Free adversarial training with minibatch replay ``cfg.replay``.

    Every replay takes one SGD step on ``x + delta`` and reuses the same
    backward pass for a sign step on ``delta``, which is projected back to
    the eps-box. ``delta`` persists across minibatches unless
    ``free_reset_per_batch`` is set. ``cfg.iterations`` counts SGD steps, so
    the number of distinct minibatches seen is ``iterations / replay``.
    """
    return _train(model, dataset, cfg, "free", counter=counter)
