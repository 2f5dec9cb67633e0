"""l-inf bounded gradient attacks and robust-accuracy evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, UsageError, make_rng


@dataclass
class AttackConfig:
    """Threat model and optimizer settings for one attack.

    ``eps`` and ``step_size`` are in [0, 1] pixel units; use
    :meth:`from_255` for budgets given on the 0-255 scale. A ``step_size``
    of ``None`` means ``eps / 4``.
    """

    eps: float = 0.3
    step_size: float | None = None
    steps: int = 20
    random_start: bool = True
    loss_kind: str = "cross_entropy"
    kappa: float = 0.0
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0:
            raise UsageError("eps must be >= 0")
        if self.loss_kind not in ("cross_entropy", "cw_margin"):
            raise UsageError(f"unknown loss_kind {self.loss_kind!r}")
        if self.step_size is None:
            self.step_size = self.eps / 4
        if self.steps >= 1 and self.step_size <= 0 and self.eps > 0:
            raise UsageError("step_size must be positive when steps >= 1")

    @classmethod
    def from_255(cls, eps: float, step_size: float | None = None, **kw) -> "AttackConfig":
        return cls(eps=eps / 255.0, step_size=None if step_size is None else step_size / 255.0, **kw)

    @property
    def label(self) -> str:
        return f"{'PGD' if self.loss_kind == 'cross_entropy' else 'CW'}-{self.steps}"


class GradientCounter:
    """Counts input-gradient evaluations (forward + backward passes)."""

    def __init__(self):
        self.count = 0

    def __call__(self, n: int = 1):
        self.count += n


def attack_loss(logits: Tensor, y: np.ndarray, cfg: AttackConfig) -> Tensor:
    if cfg.loss_kind == "cross_entropy":
        return ad.softmax_cross_entropy(logits, y, reduction="sum")
    return ad.cw_objective(logits, y, cfg.kappa, reduction="sum")


def loss_values(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Per-sample attack objective (no gradient)."""
    z = model.forward(x).data.astype(np.float64)
    if cfg.loss_kind == "cross_entropy":
        return -ad.log_softmax(z)[np.arange(len(y)), y]
    m, _, _ = ad._margins(z, y)
    return np.minimum(m, cfg.kappa)


def input_gradient(model, x: np.ndarray, y: np.ndarray, loss_kind: str = "cross_entropy",
                   kappa: float = 0.0, reduction: str = "mean", counter: GradientCounter | None = None) -> np.ndarray:
    """Gradient of the (batch-mean) loss with respect to the input images, eval mode."""
    xt = Tensor(np.asarray(x), requires_grad=True)
    with model.param_grads(False), Tape() as tape:
        logits = model.forward(xt)
        if loss_kind == "cross_entropy":
            loss = ad.softmax_cross_entropy(logits, y, reduction=reduction)
        else:
            loss = ad.cw_objective(logits, y, kappa, reduction=reduction)
    if loss.requires_grad:
        tape.backward(loss)
    if counter is not None:
        counter()
    return xt.grad if xt.grad is not None else np.zeros_like(xt.data)


def _grad(model, x, y, cfg, counter):
    return input_gradient(model, x, y, cfg.loss_kind, cfg.kappa, reduction="sum", counter=counter)


def project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Clip into the eps-box around ``x`` intersected with [0, 1]."""
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def fgsm(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
         counter: GradientCounter | None = None) -> np.ndarray:
    """``clip(x + eps * sign(grad))`` in one step."""
    if cfg.eps == 0:
        return x.copy()
    g = _grad(model, x, y, cfg, counter)
    return np.clip(x + cfg.eps * np.sign(g), 0.0, 1.0).astype(x.dtype)


def pgd(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
        counter: GradientCounter | None = None, batch_index: int = 0) -> np.ndarray:
    """Projected sign-gradient ascent on the attack objective.

    With ``restarts > 1`` the per-sample worst case over restarts is kept.
    The random start is keyed by ``(cfg.seed, batch_index, restart)``.
    """
    if cfg.steps < 1:
        raise UsageError("pgd needs steps >= 1")
    x = np.asarray(x)
    if cfg.eps == 0:
        return x.copy()
    eps, alpha = cfg.eps, cfg.step_size
    best, best_loss = None, None
    for r in range(cfg.restarts):
        if cfg.random_start:
            rng = make_rng(cfg.seed, "pgd_start", batch_index * 1009 + r)
            delta = rng.uniform(-eps, eps, size=x.shape).astype(x.dtype)
        else:
            delta = np.zeros_like(x)
        x_adv = project(x + delta, x, eps).astype(x.dtype)
        for _ in range(cfg.steps):
            g = _grad(model, x_adv, y, cfg, counter)
            x_adv = project(x_adv + alpha * np.sign(g), x, eps).astype(x.dtype)
        if cfg.restarts == 1:
            return x_adv
        lv = loss_values(model, x_adv, y, cfg)
        if best is None:
            best, best_loss = x_adv, lv
        else:
            better = lv > best_loss
            best = np.where(better.reshape((-1,) + (1,) * (x.ndim - 1)), x_adv, best)
            best_loss = np.where(better, lv, best_loss)
    return best


def accuracy(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 500) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(model.predict(images, batch_size) == labels))


def robust_accuracy(model, dataset, cfg: AttackConfig, batch_size: int = 250,
                    counter: GradientCounter | None = None, limit: int | None = None) -> float:
    """Fraction of samples still classified correctly after the attack.

    ``cfg.eps == 0`` reduces to clean accuracy.
    """
    images, labels = dataset.images, dataset.labels
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    if len(labels) == 0:
        return 0.0
    correct = 0
    for bi, i in enumerate(range(0, len(labels), batch_size)):
        xb, yb = images[i:i + batch_size], labels[i:i + batch_size]
        xa = pgd(model, xb, yb, cfg, counter, batch_index=bi) if cfg.eps > 0 and cfg.steps > 0 else xb
        correct += int(np.sum(model.predict(xa) == yb))
    return correct / len(labels)
