"""Transfer procedures built on a trained source model.

Frozen-extractor head training, block re-initialization sweeps, feature
distillation fine-tuning (LwF style, on the penultimate features), feature
caches and augmentation feature-distance statistics.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, accuracy, robust_accuracy
from .autodiff import Tensor, UsageError, make_rng
from .datasets import Dataset, augment
from .models import ModelGraph, build_mlp_head, compose, reinit_blocks
from .training import TrainConfig, TrainResult, train_natural


class IntegrityError(ValueError):
    """A feature cache does not belong to the model or dataset it is used with."""


CACHE_MAGIC = b"RFC1"


# --------------------------------------------------------------------------
# evaluation

def default_attacks(eps: float = 0.3, steps: int = 20, step_size: float | None = None) -> dict[str, AttackConfig]:
    """PGD-k and CW-k at the same budget; the step defaults to ``eps / 4``."""
    alpha = step_size if step_size is not None else eps / 4
    return {
        "pgd": AttackConfig(eps=eps, step_size=alpha, steps=steps),
        "cw": AttackConfig(eps=eps, step_size=alpha, steps=steps, loss_kind="cw_margin"),
    }


def evaluate(model: ModelGraph, data: Dataset, attacks: dict[str, AttackConfig] | None = None,
             limit: int | None = None) -> dict[str, float]:
    """Clean accuracy plus one ``<name>_acc`` entry per attack (fractions in [0, 1])."""
    out = {"clean_acc": accuracy(model, data.images, data.labels)}
    for name, cfg in (attacks or {}).items():
        out[f"{name}_acc"] = robust_accuracy(model, data, cfg, limit=limit)
    return out


# --------------------------------------------------------------------------
# frozen extractor + new head

@dataclass
class HeadSpec:
    hidden_layers: int = 0
    hidden_width: int = 64
    dropout: bool = False
    bn: bool = False
    dropout_p: float = 0.25
    seed: int = 0


@dataclass
class TransferResult:
    model: ModelGraph
    metrics: dict[str, float]
    train: TrainResult | None = None
    extra: dict = field(default_factory=dict)


def _frozen_source(source: ModelGraph) -> ModelGraph:
    src = source.copy()
    src.set_trainable(False)
    return src


def train_head_on_features(head: ModelGraph, z: np.ndarray, labels: np.ndarray,
                           cfg: TrainConfig) -> TrainResult:
    """Train ``head`` on precomputed penultimate features."""
    return train_natural(head, Dataset(z, labels, num_classes=head.num_classes), cfg)


def retrain_head(source: ModelGraph, target: Dataset, head: HeadSpec | None = None,
                 cfg: TrainConfig | None = None, eval_data: Dataset | None = None,
                 attacks: dict[str, AttackConfig] | None = None) -> TransferResult:
    """Freeze the source extractor and fit a fresh head on natural target examples.

    Frozen blocks run in eval mode, so without augmentation the features are
    a fixed function of the image and the head is trained on them directly.
    """
    head = head or HeadSpec()
    cfg = cfg or TrainConfig()
    src = _frozen_source(source)
    h = build_mlp_head(src.feature_dim, head.hidden_layers, head.hidden_width, target.num_classes,
                       dropout=head.dropout, bn=head.bn, dropout_p=head.dropout_p, seed=head.seed)
    if cfg.augment:
        model = compose(src, h)
        tr = train_natural(model, target, cfg)
    else:
        tr = train_head_on_features(h, src.feature_array(target.images), target.labels, cfg)
        model = compose(src, h)
    metrics = evaluate(model, eval_data, attacks) if eval_data is not None else {}
    metrics["train_acc"] = accuracy(model, target.images, target.labels)
    return TransferResult(model, metrics, tr)


# --------------------------------------------------------------------------
# block sweep

def block_sweep(source: ModelGraph, target: Dataset, k_list: list[int], cfg: TrainConfig,
                eval_data: Dataset, attack: AttackConfig, seed: int = 0,
                limit: int | None = None) -> list[dict]:
    """Re-initialize and naturally retrain the deepest ``k`` blocks for each ``k``.

    The first row has ``k = 0``: the untouched source, i.e. the baseline.
    """
    n = len(source)
    for k in k_list:
        if not 1 <= k <= n:
            raise UsageError(f"k={k} outside 1..{n}")
    rows = [{"k": 0, "blocks": "", "clean_acc": accuracy(source, eval_data.images, eval_data.labels),
             "robust_acc": robust_accuracy(source, eval_data, attack, limit=limit)}]
    for k in k_list:
        m = reinit_blocks(source, k, seed=seed)
        train_natural(m, target, cfg)
        rows.append({"k": k, "blocks": "+".join(m.block_names[n - k:]),
                     "clean_acc": accuracy(m, eval_data.images, eval_data.labels),
                     "robust_acc": robust_accuracy(m, eval_data, attack, limit=limit)})
    return rows


# --------------------------------------------------------------------------
# feature cache

@dataclass
class FeatureCache:
    digest: bytes
    vectors: np.ndarray
    ids: np.ndarray
    augmented: bool = False

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        if len(self.digest) != 32:
            raise UsageError("digest must be 32 bytes")
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.ids):
            raise UsageError("vectors must be (count, feature_dim) with one id per row")
        if self.augmented:
            raise UsageError("feature caches are built from non-augmented images only")

    @property
    def feature_dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def check(self, source: ModelGraph | None = None, data: Dataset | None = None) -> None:
        if source is not None and source.digest() != self.digest:
            raise IntegrityError("feature cache was built from a different checkpoint")
        if data is not None and (len(data) != len(self) or not np.array_equal(data.ids.astype(np.uint64), self.ids)):
            raise IntegrityError("feature cache does not match the dataset's sample ids")

    def to_bytes(self) -> bytes:
        head = CACHE_MAGIC + self.digest + struct.pack("<QI", len(self), self.feature_dim)
        return head + self.vectors.astype("<f4").tobytes() + self.ids.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, expected_digest: bytes | None = None) -> "FeatureCache":
        if raw[:4] != CACHE_MAGIC:
            raise IntegrityError("not a feature cache (bad magic)")
        if len(raw) < 48:
            raise IntegrityError("truncated feature cache header")
        digest = raw[4:36]
        count, dim = struct.unpack("<QI", raw[36:48])
        body = 48 + count * dim * 4
        if len(raw) != body + count * 8:
            raise IntegrityError("feature cache length does not match its header")
        if expected_digest is not None and digest != expected_digest:
            raise IntegrityError("feature cache digest does not match the source checkpoint")
        vec = np.frombuffer(raw, "<f4", count * dim, 48).reshape(count, dim).astype(np.float32)
        ids = np.frombuffer(raw, "<u8", count, body).astype(np.uint64)
        return cls(digest, vec, ids)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, source: ModelGraph | None = None) -> "FeatureCache":
        with open(path, "rb") as fh:
            raw = fh.read()
        return cls.from_bytes(raw, source.digest() if source is not None else None)


def cache_features(source: ModelGraph, data: Dataset, path=None, workers: int = 1,
                   batch_size: int = 500) -> FeatureCache:
    """Eval-mode penultimate features of every (non-augmented) image in ``data``."""
    if workers > 1 and len(data) > batch_size:
        from concurrent.futures import ThreadPoolExecutor
        chunks = [data.images[i:i + batch_size] for i in range(0, len(data), batch_size)]
        with ThreadPoolExecutor(workers) as ex:
            vec = np.concatenate(list(ex.map(lambda c: source.features(c).data, chunks)))
    else:
        vec = source.feature_array(data.images, batch_size)
    cache = FeatureCache(source.digest(), vec, data.ids)
    if path is not None:
        cache.save(path)
    return cache


# --------------------------------------------------------------------------
# distillation fine-tuning

@dataclass
class LwfConfig:
    """Settings for feature-distillation fine-tuning.

    Phase 1 (the first ``warm_start_fraction`` of ``total_iterations``)
    trains only ``fc``. Phase 2 trains every block, leaving BN parameters
    and running statistics alone when ``bn_frozen_phase2`` is set.
    """

    lambda_d: float = 0.0
    total_iterations: int = 1000
    warm_start_fraction: float = 0.5
    lr: float = 0.001
    warm_lr: float | None = None
    eps_d: float = 1e-8
    bn_frozen_phase2: bool = True
    squared: bool = False
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.lambda_d < 0:
            raise UsageError("lambda_d must be >= 0")
        if not 0 <= self.warm_start_fraction <= 1:
            raise UsageError("warm_start_fraction must lie in [0, 1]")
        if self.total_iterations < 0:
            raise UsageError("total_iterations must be >= 0")

    @property
    def warm_iterations(self) -> int:
        return int(round(self.warm_start_fraction * self.total_iterations))


def distill_penalty(z: Tensor, z0: np.ndarray, lambda_d: float, eps_d: float = 1e-8,
                    squared: bool = False) -> Tensor:
    """``lambda_d * mean_batch sqrt(||z - z0||^2 + eps_d)`` (or the squared distance)."""
    diff = ad.sub(z, Tensor(np.asarray(z0, dtype=z.dtype)))
    sq = ad.tsum(ad.square(diff), axis=1)
    d = sq if squared else ad.sqrt(ad.add(sq, eps_d))
    return ad.mul(ad.tmean(d), lambda_d)


def lwf_total_loss(ce: float, mean_distance: float, lambda_d: float) -> float:
    return ce + lambda_d * mean_distance


def _distill(source: ModelGraph, target: Dataset, cache: FeatureCache, cfg: LwfConfig,
             new_head: bool, eval_data: Dataset | None, attacks) -> TransferResult:
    cache.check(source, target)
    src = _frozen_source(source)
    if new_head:
        fc = build_mlp_head(src.feature_dim, 0, num_classes=target.num_classes, seed=cfg.seed)
    else:
        fc = ModelGraph([src.fc], src.num_classes, src.feature_dim)
    model = compose(src, fc)
    model.set_trainable({"fc": True})
    model.meta["source_digest"] = source.digest().hex()
    base = TrainConfig(batch_size=cfg.batch_size, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                       seed=cfg.seed, log_every=cfg.log_every)

    warm = cfg.warm_iterations
    phase1 = None
    if warm:
        wcfg = replace(base, iterations=warm, lr_schedule=[(0, cfg.warm_lr if cfg.warm_lr is not None else cfg.lr)])
        head = ModelGraph([model.fc], model.num_classes, model.feature_dim)
        phase1 = train_head_on_features(head, cache.vectors, target.labels, wcfg)
    z0_all = cache.vectors

    def extra(z, idx):
        return distill_penalty(z, z0_all[idx], cfg.lambda_d, cfg.eps_d, cfg.squared)

    phase2 = None
    rest = cfg.total_iterations - warm
    if rest:
        model.set_trainable(True)
        pcfg = replace(base, iterations=rest, seed=cfg.seed + 1, lr_schedule=[(0, cfg.lr)],
                       bn_update=not cfg.bn_frozen_phase2)
        phase2 = train_natural(model, target, pcfg, extra_loss=extra if cfg.lambda_d > 0 else None)
    model.set_trainable(True)
    z = model.feature_array(target.images)
    dist = np.sqrt(np.sum((z.astype(np.float64) - z0_all) ** 2, axis=1))
    metrics = evaluate(model, eval_data, attacks) if eval_data is not None else {}
    metrics["train_acc"] = accuracy(model, target.images, target.labels)
    metrics["mean_feature_distance"] = float(dist.mean()) if len(dist) else 0.0
    return TransferResult(model, metrics, phase2, {"phase1": phase1})


def lwf_finetune(source: ModelGraph, target: Dataset, cache: FeatureCache, cfg: LwfConfig,
                 eval_data: Dataset | None = None,
                 attacks: dict[str, AttackConfig] | None = None) -> TransferResult:
    """Fine-tune a fresh-head copy of ``source`` on ``target`` with feature distillation.

    The penalty ties the penultimate features to the cached source features
    ``z0`` of each training image.
    """
    return _distill(source, target, cache, cfg, True, eval_data, attacks)


def self_distill_finetune(source: ModelGraph, data: Dataset, cache: FeatureCache, cfg: LwfConfig,
                          eval_data: Dataset | None = None,
                          attacks: dict[str, AttackConfig] | None = None) -> TransferResult:
    """Distillation fine-tuning on the source's own task, keeping its trained ``fc``."""
    if data.num_classes != source.num_classes:
        raise UsageError("self-distillation needs the source model's own label space")
    return _distill(source, data, cache, cfg, False, eval_data, attacks)


# --------------------------------------------------------------------------
# augmentation feature distances

@dataclass
class DistanceStats:
    distances: np.ndarray
    counts: np.ndarray
    edges: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.distances.mean()) if len(self.distances) else 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def feature_distance_stats(source: ModelGraph, data: Dataset, pad: int = 4, flip: bool = True,
                           seed: int = 0, bins: int = 20, csv_path=None,
                           batch_size: int = 500) -> DistanceStats:
    """Per-sample l2 distance between features of ``x`` and of one augmented draw of ``x``."""
    dists = []
    for bi, i in enumerate(range(0, len(data), batch_size)):
        x = data.images[i:i + batch_size]
        xa = augment(x, pad, flip, rng=make_rng(seed, "featdist", bi)) if (pad or flip) else x
        z, za = source.features(x).data, source.features(xa).data
        dists.append(np.sqrt(np.sum((z.astype(np.float64) - za) ** 2, axis=1)))
    d = np.concatenate(dists) if dists else np.zeros(0)
    counts, edges = np.histogram(d, bins=bins)
    stats = DistanceStats(d, counts, edges)
    if csv_path is not None:
        stats.write_csv(csv_path)
    return stats
