"""Declarative experiment runner.

A run is described by a TOML file. :func:`load_config` validates it into an
:class:`ExperimentConfig`; :func:`run` dispatches on the experiment kind and
writes ``results.csv``, ``manifest.json`` and kind-specific artifacts
(checkpoints, sweep CSVs, feature caches, PPM images) into the output
directory.
"""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import os
import platform
import sys
import time
import traceback
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from . import transfer as T
from .attacks import AttackConfig, GradientCounter, accuracy, input_gradient, robust_accuracy
from .autodiff import UsageError
from .datasets import (Dataset, FormatError, SubsetSpec, load_cifar_binary, load_digits, load_idx,
                       split_classes, subsample_per_class, synth_blobs, train_val_split, upsample)
from .models import ModelGraph, build_cnn_lite, build_mlp_head, compose
from .training import TrainConfig, free_train, train_adversarial, train_natural, write_metric_log

SCHEMA_VERSION = 1
KINDS = ("train", "advtrain", "freetrain", "transfer-head", "block-sweep", "lwf", "self-distill",
         "lowdata-sweep", "eval", "gradviz", "featdist", "cache-features")
RESULT_COLUMNS = ["run_id", "experiment", "dataset", "source_model", "eps", "attack", "steps",
                  "clean_acc", "robust_acc", "avg", "wall_clock_s"]
LOWDATA_METHODS = ("scratch-advtrain", "finetune-with-AT", "frozen-transfer")
NEEDS_SOURCE = {"transfer-head", "block-sweep", "lwf", "self-distill", "lowdata-sweep", "eval",
                "gradviz", "featdist", "cache-features"}


class ValidationError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


# --------------------------------------------------------------------------
# metrics

def avg_metric(clean_acc: float, robust_acc: float) -> float:
    """Mean of clean and robust accuracy (percent), computed in decimal arithmetic."""
    for name, v in (("clean_acc", clean_acc), ("robust_acc", robust_acc)):
        if not 0 <= v <= 100:
            raise UsageError(f"{name} must lie in [0, 100], got {v}")
    return float((Decimal(repr(float(clean_acc))) + Decimal(repr(float(robust_acc)))) / 2)


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


# --------------------------------------------------------------------------
# config schema

_SCALARS = (int, float, str, bool)


def _typed(kind):
    def check(path, v):
        ok = {
            "int": isinstance(v, int) and not isinstance(v, bool),
            "num": isinstance(v, (int, float)) and not isinstance(v, bool),
            "str": isinstance(v, str),
            "bool": isinstance(v, bool),
            "list": isinstance(v, list),
            "intlist": isinstance(v, list) and all(isinstance(i, int) and not isinstance(i, bool) for i in v),
            "numlist": isinstance(v, list) and all(isinstance(i, (int, float)) and not isinstance(i, bool) for i in v),
            "count": v == "all" or (isinstance(v, int) and not isinstance(v, bool) and v > 0),
        }[kind]
        if not ok:
            raise ValidationError(path, f"expected {kind}, got {v!r}")
    return check


SCHEMA: dict[str, dict] = {
    "": {"schema_version": "int", "experiment": "str", "name": "str", "seed": "int", "out": "str",
         "workers": "int", "record_wall_clock": "bool"},
    "dataset": {"source": "str", "images": "str", "labels": "str", "path": "str", "coarse": "bool",
                "val_images": "str", "val_labels": "str", "val_path": "str",
                "val_fraction": "num", "split_seed": "int", "class_fraction": "num", "part": "str",
                "per_class_count": "count", "upsample": "int", "limit_val": "int",
                "classes": "int", "dim": "intlist", "per_class": "int", "separation": "num", "noise": "num"},
    "model": {"width": "int", "depth": "int", "seed": "int", "checkpoint": "str", "init_stride": "int"},
    "train": {"iterations": "int", "batch_size": "int", "lr_schedule": "list", "momentum": "num",
              "weight_decay": "num", "augment": "bool", "aug_pad": "int", "aug_flip": "bool",
              "adv_fraction": "num", "eps_warmup": "int", "replay": "int", "free_step": "num",
              "free_reset_per_batch": "bool", "free_update_delta": "bool", "bn_update": "bool",
              "log_every": "int", "attack": "table"},
    "attack": {"eps": "num", "eps_255": "num", "step_size": "num", "steps": "int", "random_start": "bool",
               "loss_kind": "str", "kappa": "num", "restarts": "int", "name": "str"},
    "eval": {"attacks": "tables", "limit": "int"},
    "head": {"hidden_layers": "intlist", "hidden_width": "int", "dropout": "bool", "bn": "bool",
             "dropout_p": "num"},
    "lwf": {"lambda_d": "numlist", "total_iterations": "int", "warm_start_fraction": "num", "lr": "num",
            "warm_lr": "num", "eps_d": "num", "bn_frozen_phase2": "bool", "squared": "bool",
            "batch_size": "int", "momentum": "num", "weight_decay": "num", "cache": "str"},
    "sweep": {"k_list": "intlist", "n_list": "intlist", "methods": "list", "head_iterations": "int"},
    "gradviz": {"rows": "int", "cols": "int", "loss_kind": "str"},
    "featdist": {"pad": "int", "flip": "bool", "bins": "int"},
}


def _check_table(path: str, table: dict, schema: dict) -> None:
    if not isinstance(table, dict):
        raise ValidationError(path or "<root>", "expected a table")
    for key, value in table.items():
        fp = f"{path}.{key}" if path else key
        if key not in schema:
            if path == "" and key in SCHEMA and key != "attack":
                _check_table(fp, value, SCHEMA[key])
                continue
            raise ValidationError(fp, "unknown field")
        kind = schema[key]
        if kind == "table":
            _check_table(fp, value, SCHEMA["attack"])
        elif kind == "tables":
            if not isinstance(value, list) or not value:
                raise ValidationError(fp, "expected a non-empty array of tables")
            for i, t in enumerate(value):
                _check_table(f"{fp}[{i}]", t, SCHEMA["attack"])
        else:
            _typed(kind)(fp, value)


def _attack_from(path: str, t: dict, seed: int) -> AttackConfig:
    t = dict(t)
    t.pop("name", None)
    if "eps_255" in t:
        if "eps" in t:
            raise ValidationError(f"{path}.eps_255", "give eps or eps_255, not both")
        t["eps"] = t.pop("eps_255") / 255.0
    t.setdefault("seed", seed)
    try:
        return AttackConfig(**t)
    except UsageError as e:
        raise ValidationError(path, str(e)) from None


def _train_from(path: str, t: dict, seed: int) -> TrainConfig:
    t = dict(t)
    if "attack" in t:
        t["attack"] = _attack_from(f"{path}.attack", t["attack"], seed)
    if "lr_schedule" in t:
        sched = t["lr_schedule"]
        if not sched or not all(isinstance(p, list) and len(p) == 2 for p in sched):
            raise ValidationError(f"{path}.lr_schedule", "expected a list of [iteration, lr] pairs")
    t.setdefault("seed", seed)
    try:
        return TrainConfig(**t)
    except UsageError as e:
        raise ValidationError(path, str(e)) from None


@dataclass
class ExperimentConfig:
    kind: str
    name: str
    seed: int
    raw: dict
    text: str
    base_dir: Path
    out: str | None = None
    workers: int = 1
    record_wall_clock: bool = False
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: TrainConfig | None = None
    attacks: list[AttackConfig] = field(default_factory=list)
    eval_limit: int | None = None
    head: dict = field(default_factory=dict)
    lwf: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    gradviz: dict = field(default_factory=dict)
    featdist: dict = field(default_factory=dict)

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()


def parse_config(text: str, base_dir: Path | str = ".", seed: int | None = None,
                 check_paths: bool = True) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ValidationError("<toml>", str(e)) from None
    _check_table("", raw, SCHEMA[""])
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError("schema_version", f"must be {SCHEMA_VERSION}")
    kind = raw.get("experiment")
    if kind not in KINDS:
        raise ValidationError("experiment", f"unknown experiment kind {kind!r}; expected one of {', '.join(KINDS)}")
    s = seed if seed is not None else raw.get("seed", 0)
    cfg = ExperimentConfig(kind=kind, name=raw.get("name", kind), seed=s, raw=raw, text=text,
                           base_dir=Path(base_dir).resolve(), out=raw.get("out"),
                           workers=raw.get("workers", 1), record_wall_clock=raw.get("record_wall_clock", False))
    if cfg.workers < 1:
        raise ValidationError("workers", "must be >= 1")
    for sec in ("dataset", "model", "head", "lwf", "sweep", "gradviz", "featdist"):
        setattr(cfg, sec, dict(raw.get(sec, {})))
    if "train" in raw:
        cfg.train = _train_from("train", raw["train"], s)
    ev = raw.get("eval", {})
    cfg.eval_limit = ev.get("limit")
    cfg.attacks = [_attack_from(f"eval.attacks[{i}]", t, s) for i, t in enumerate(ev.get("attacks", []))]
    if not cfg.attacks:
        cfg.attacks = [AttackConfig(eps=0.3, steps=20, seed=s)]
    _validate_semantics(cfg, check_paths)
    return cfg


def _validate_semantics(cfg: ExperimentConfig, check_paths: bool) -> None:
    ds = cfg.dataset
    src = ds.get("source", "digits")
    if src not in ("digits", "idx", "cifar", "synth"):
        raise ValidationError("dataset.source", f"unknown dataset source {src!r}")
    needed = {"idx": ("images", "labels"), "cifar": ("path",)}.get(src, ())
    for key in needed:
        if key not in ds:
            raise ValidationError(f"dataset.{key}", f"required for source {src!r}")
    if check_paths:
        for key in ("images", "labels", "path", "val_images", "val_labels", "val_path"):
            if key in ds and not cfg.path(ds[key]).exists():
                raise ValidationError(f"dataset.{key}", f"path does not exist: {ds[key]}")
        if "checkpoint" in cfg.model and not cfg.path(cfg.model["checkpoint"]).exists():
            raise ValidationError("model.checkpoint", f"path does not exist: {cfg.model['checkpoint']}")
        if "cache" in cfg.lwf and not cfg.path(cfg.lwf["cache"]).exists():
            raise ValidationError("lwf.cache", f"path does not exist: {cfg.lwf['cache']}")
    if ds.get("part", "all") not in ("all", "a", "b"):
        raise ValidationError("dataset.part", "must be 'all', 'a' or 'b'")
    if ds.get("part", "all") != "all" and "class_fraction" not in ds:
        raise ValidationError("dataset.class_fraction", "required when dataset.part is 'a' or 'b'")
    if not 0 <= ds.get("val_fraction", 0.2) < 1:
        raise ValidationError("dataset.val_fraction", "must lie in [0, 1)")
    if cfg.kind in NEEDS_SOURCE and "checkpoint" not in cfg.model:
        raise ValidationError("model.checkpoint", f"experiment {cfg.kind!r} needs a source checkpoint")
    if cfg.kind in ("train", "advtrain", "freetrain", "block-sweep", "lowdata-sweep") and cfg.train is None:
        raise ValidationError("train", f"experiment {cfg.kind!r} needs a [train] table")
    if cfg.kind in ("advtrain", "freetrain", "lowdata-sweep") and cfg.train.attack is None:
        raise ValidationError("train.attack", f"experiment {cfg.kind!r} needs a training attack")
    if cfg.kind == "block-sweep" and not cfg.sweep.get("k_list"):
        raise ValidationError("sweep.k_list", "block-sweep needs a non-empty k_list")
    if cfg.kind == "lowdata-sweep":
        if not cfg.sweep.get("n_list"):
            raise ValidationError("sweep.n_list", "lowdata-sweep needs a non-empty n_list")
        for m in cfg.sweep.get("methods", LOWDATA_METHODS):
            if m not in LOWDATA_METHODS:
                raise ValidationError("sweep.methods", f"unknown method {m!r}")
    if cfg.kind in ("lwf", "self-distill"):
        try:
            for lam in cfg.lwf.get("lambda_d", [0.0]):
                T.LwfConfig(lambda_d=lam, **_lwf_kwargs(cfg.lwf))
        except (UsageError, TypeError) as e:
            raise ValidationError("lwf", str(e)) from None
    if cfg.gradviz.get("loss_kind", "cross_entropy") not in ("cross_entropy", "cw_margin"):
        raise ValidationError("gradviz.loss_kind", "must be cross_entropy or cw_margin")


def _lwf_kwargs(t: dict) -> dict:
    return {k: v for k, v in t.items() if k not in ("lambda_d", "cache")}


def load_config(path, seed: int | None = None, check_paths: bool = True) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ValidationError("<config>", f"config file not found: {path}")
    return parse_config(p.read_text(), p.parent, seed, check_paths)


# --------------------------------------------------------------------------
# data / models

def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, str]:
    """(train part, validation part, dataset label) as selected by ``[dataset]``."""
    ds = cfg.dataset
    src = ds.get("source", "digits")
    val = None
    if src == "digits":
        full, label = load_digits(), "digits5k"
    elif src == "idx":
        full, label = load_idx(cfg.path(ds["images"]), cfg.path(ds["labels"])), Path(ds["images"]).name
        if "val_images" in ds:
            val = load_idx(cfg.path(ds["val_images"]), cfg.path(ds["val_labels"]), "val")
    elif src == "cifar":
        full, label = load_cifar_binary(cfg.path(ds["path"]), ds.get("coarse", False)), Path(ds["path"]).name
        if "val_path" in ds:
            val = load_cifar_binary(cfg.path(ds["val_path"]), ds.get("coarse", False), "val")
    else:
        dim = tuple(ds.get("dim", [1, 8, 8]))
        full = synth_blobs(ds.get("classes", 3), dim, ds.get("per_class", 40), ds.get("separation", 1.0),
                           ds.get("noise", 0.1), seed=ds.get("split_seed", 0))
        label = "synth"
    split_seed = ds.get("split_seed", 0)
    if val is None:
        train, val = train_val_split(full, ds.get("val_fraction", 0.2), seed=split_seed)
    else:
        train = full
    part = ds.get("part", "all")
    if part != "all":
        a, b, cs = split_classes(train, SubsetSpec(ds["class_fraction"], seed=split_seed))
        va, vb = cs.apply(val)
        train, val = (a, va) if part == "a" else (b, vb)
        label += f"/{part}"
    if ds.get("per_class_count", "all") != "all":
        train = subsample_per_class(train, ds["per_class_count"], seed=split_seed)
    if ds.get("limit_val"):
        val = val.take(np.arange(min(len(val), ds["limit_val"])))
    f = ds.get("upsample", 1)
    if f != 1:
        train.images, val.images = upsample(train.images, f), upsample(val.images, f)
    return train, val, label


def _new_model(cfg: ExperimentConfig, data: Dataset) -> ModelGraph:
    m = cfg.model
    return build_cnn_lite(width=m.get("width", 8), depth=m.get("depth", 14), num_classes=data.num_classes,
                          in_shape=data.shape, seed=m.get("seed", cfg.seed), init_stride=m.get("init_stride", 2))


def _source(cfg: ExperimentConfig) -> ModelGraph:
    return ModelGraph.load(cfg.path(cfg.model["checkpoint"]))


def _head_spec(cfg: ExperimentConfig, hidden: int) -> T.HeadSpec:
    h = cfg.head
    return T.HeadSpec(hidden, h.get("hidden_width", 64), h.get("dropout", False), h.get("bn", False),
                      h.get("dropout_p", 0.25), seed=cfg.seed)


def _head_cfg(cfg: ExperimentConfig) -> TrainConfig:
    return cfg.train if cfg.train is not None else TrainConfig(iterations=500, lr_schedule=[(0, 0.05)], seed=cfg.seed)


# --------------------------------------------------------------------------
# results

@dataclass
class Outcome:
    """Everything one experiment produced, before it is written to disk."""

    rows: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)
    files: dict[str, bytes] = field(default_factory=dict)


def _eval_rows(out: Outcome, cfg: ExperimentConfig, run_id: str, model: ModelGraph, val: Dataset,
               dataset: str, source: str, wall: float, counter: int = 0) -> dict[str, float]:
    clean = accuracy(model, val.images, val.labels)
    metrics = {"clean_acc": clean}
    for a in cfg.attacks:
        rob = robust_accuracy(model, val, a, limit=cfg.eval_limit) if a.eps > 0 else clean
        metrics[a.label] = rob
        out.rows.append({
            "run_id": run_id, "experiment": cfg.kind, "dataset": dataset, "source_model": source,
            "eps": f"{a.eps:.6g}", "attack": a.label if a.eps > 0 else "none", "steps": a.steps,
            "clean_acc": _pct(clean), "robust_acc": _pct(rob),
            "avg": f"{avg_metric(float(_pct(clean)), float(_pct(rob))):.2f}",
            "wall_clock_s": f"{wall:.3f}" if cfg.record_wall_clock else "",
        })
    out.timings.append({"run_id": run_id, "wall_clock_s": f"{wall:.3f}", "attack_gradients": counter})
    return metrics


def _csv_bytes(header: list[str], rows: list[dict]) -> bytes:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue().encode("utf-8")


def _map(fn, items, workers: int):
    """Ordered map; independent sweep points may run in worker processes."""
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    from concurrent.futures import ProcessPoolExecutor
    import multiprocessing as mp
    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    with ProcessPoolExecutor(min(workers, len(items)), mp_context=ctx) as ex:
        return list(ex.map(fn, items))


# --------------------------------------------------------------------------
# experiment kinds

def _run_training(cfg: ExperimentConfig, out: Outcome, odir: Path) -> None:
    train, val, label = load_data(cfg)
    model = _new_model(cfg, train)
    counter = GradientCounter()
    fn = {"train": train_natural, "advtrain": train_adversarial, "freetrain": free_train}[cfg.kind]
    t0 = time.perf_counter()
    res = fn(model, train, cfg.train) if cfg.kind == "train" else fn(model, train, cfg.train, counter)
    wall = time.perf_counter() - t0
    run_id = f"{cfg.name}-s{cfg.seed}"
    model.meta.update({"experiment": cfg.kind, "dataset": label, "seed": cfg.seed})
    model.save(odir / "model.rxf")
    write_metric_log(odir / "train_log.csv", run_id, res.log, append=False)
    _eval_rows(out, cfg, run_id, model, val, label, "scratch", wall, counter.count)


def _run_eval(cfg, out, odir):
    _, val, label = load_data(cfg)
    model = _source(cfg)
    _eval_rows(out, cfg, f"{cfg.name}-s{cfg.seed}", model, val, label, Path(cfg.model["checkpoint"]).name, 0.0)


def _head_point(args):
    cfg, hidden = args
    train, val, label = load_data(cfg)
    src = _source(cfg)
    t0 = time.perf_counter()
    r = T.retrain_head(src, train, _head_spec(cfg, hidden), _head_cfg(cfg))
    wall = time.perf_counter() - t0
    o = Outcome()
    m = _eval_rows(o, cfg, f"{cfg.name}-s{cfg.seed}-h{hidden}", r.model, val, label,
                   Path(cfg.model["checkpoint"]).name, wall)
    return o, hidden, r.metrics["train_acc"], m


def _run_transfer_head(cfg, out, odir):
    hidden = cfg.head.get("hidden_layers", [0])
    rows = []
    for o, h, train_acc, m in _map(_head_point, [(cfg, h) for h in hidden], cfg.workers):
        out.rows += o.rows
        out.timings += o.timings
        rows.append({"hidden_layers": h, "train_acc": _pct(train_acc),
                     **{k: _pct(v) for k, v in m.items()}})
    out.files["head_sweep.csv"] = _csv_bytes(list(rows[0]), rows)


def _block_point(args):
    cfg, k = args
    train, val, label = load_data(cfg)
    src = _source(cfg)
    atk = cfg.attacks[0]
    t0 = time.perf_counter()
    rows = T.block_sweep(src, train, [k] if k else [], cfg.train, val, atk, seed=cfg.seed, limit=cfg.eval_limit)
    return rows[-1], time.perf_counter() - t0, label


def _run_block_sweep(cfg, out, odir):
    ks = [0] + list(cfg.sweep["k_list"])
    n = len(_source(cfg))
    for k in ks[1:]:
        if not 1 <= k <= n:
            raise ValidationError("sweep.k_list", f"k={k} outside 1..{n}")
    table = []
    atk = cfg.attacks[0]
    for row, wall, label in _map(_block_point, [(cfg, k) for k in ks], cfg.workers):
        table.append({"k": row["k"], "blocks": row["blocks"], "clean_acc": _pct(row["clean_acc"]),
                      "robust_acc": _pct(row["robust_acc"])})
        out.rows.append({
            "run_id": f"{cfg.name}-s{cfg.seed}-k{row['k']}", "experiment": cfg.kind, "dataset": label,
            "source_model": Path(cfg.model["checkpoint"]).name, "eps": f"{atk.eps:.6g}", "attack": atk.label,
            "steps": atk.steps, "clean_acc": _pct(row["clean_acc"]), "robust_acc": _pct(row["robust_acc"]),
            "avg": f"{avg_metric(float(_pct(row['clean_acc'])), float(_pct(row['robust_acc']))):.2f}",
            "wall_clock_s": f"{wall:.3f}" if cfg.record_wall_clock else ""})
        out.timings.append({"run_id": out.rows[-1]["run_id"], "wall_clock_s": f"{wall:.3f}", "attack_gradients": 0})
    out.files["block_sweep.csv"] = _csv_bytes(["k", "blocks", "clean_acc", "robust_acc"], table)


def _get_cache(cfg, src, train, odir) -> T.FeatureCache:
    if "cache" in cfg.lwf:
        cache = T.FeatureCache.load(cfg.path(cfg.lwf["cache"]), src)
        cache.check(src, train)
        return cache
    return T.cache_features(src, train, odir / "features.rfc", workers=cfg.workers)


def _lwf_point(args):
    cfg, lam, cache_path = args
    train, val, label = load_data(cfg)
    src = _source(cfg)
    cache = T.FeatureCache.load(cache_path, src)
    lc = T.LwfConfig(lambda_d=lam, seed=cfg.seed, **_lwf_kwargs(cfg.lwf))
    fn = T.lwf_finetune if cfg.kind == "lwf" else T.self_distill_finetune
    t0 = time.perf_counter()
    r = fn(src, train, cache, lc)
    wall = time.perf_counter() - t0
    o = Outcome()
    m = _eval_rows(o, cfg, f"{cfg.name}-s{cfg.seed}-lam{lam:g}", r.model, val, label,
                   Path(cfg.model["checkpoint"]).name, wall)
    return o, lam, r.metrics, m


def _run_lwf(cfg, out, odir):
    train, _, _ = load_data(cfg)
    src = _source(cfg)
    _get_cache(cfg, src, train, odir)
    cache_path = cfg.path(cfg.lwf["cache"]) if "cache" in cfg.lwf else odir / "features.rfc"
    lams = cfg.lwf.get("lambda_d", [0.0])
    rows = []
    for o, lam, tm, m in _map(_lwf_point, [(cfg, lam, cache_path) for lam in lams], cfg.workers):
        out.rows += o.rows
        out.timings += o.timings
        rows.append({"lambda_d": f"{lam:g}", "train_acc": _pct(tm["train_acc"]),
                     "mean_feature_distance": f"{tm['mean_feature_distance']:.6f}",
                     **{k: _pct(v) for k, v in m.items()}})
    out.files["lwf_sweep.csv"] = _csv_bytes(list(rows[0]), rows)


def _lowdata_point(args):
    cfg, n, method = args
    train, val, label = load_data(cfg)
    train = subsample_per_class(train, n, seed=cfg.seed)
    src = _source(cfg)
    counter = GradientCounter()
    t0 = time.perf_counter()
    if method == "frozen-transfer":
        hc = _head_cfg(cfg)
        hc = TrainConfig(**{**hc.__dict__, "attack": None,
                            "iterations": cfg.sweep.get("head_iterations", hc.iterations)})
        model = T.retrain_head(src, train, _head_spec(cfg, 0), hc).model
    else:
        if method == "scratch-advtrain":
            model = _new_model(cfg, train)
        else:
            head = build_mlp_head(src.feature_dim, 0, num_classes=train.num_classes, seed=cfg.seed)
            model = compose(src, head)
            model.set_trainable(True)
        train_adversarial(model, train, cfg.train, counter)
    wall = time.perf_counter() - t0
    o = Outcome()
    m = _eval_rows(o, cfg, f"{cfg.name}-s{cfg.seed}-n{n}-{method}", model, val, label,
                   "scratch" if method == "scratch-advtrain" else Path(cfg.model["checkpoint"]).name, wall,
                   counter.count)
    return o, n, method, m, wall, counter.count


def _run_lowdata(cfg, out, odir):
    methods = cfg.sweep.get("methods", list(LOWDATA_METHODS))
    points = [(cfg, n, meth) for n in cfg.sweep["n_list"] for meth in methods]
    rows = []
    atk = cfg.attacks[0].label
    for o, n, meth, m, wall, grads in _map(_lowdata_point, points, cfg.workers):
        out.rows += o.rows
        out.timings += o.timings
        c, r = float(_pct(m["clean_acc"])), float(_pct(m[atk]))
        rows.append({"n": n, "method": meth, "clean_acc": f"{c:.2f}", "robust_acc": f"{r:.2f}",
                     "avg": f"{avg_metric(c, r):.2f}", "attack_gradients": grads,
                     "wall_clock_s": f"{wall:.3f}" if cfg.record_wall_clock else ""})
    out.files["lowdata.csv"] = _csv_bytes(list(rows[0]), rows)


def _run_gradviz(cfg, out, odir):
    _, val, _ = load_data(cfg)
    rows, cols = cfg.gradviz.get("rows", 4), cfg.gradviz.get("cols", 4)
    n = min(len(val), rows * cols)
    model = _source(cfg)
    out.files["gradients.ppm"] = gradviz(model, val.images[:n], val.labels[:n], None, rows, cols,
                                         cfg.gradviz.get("loss_kind", "cross_entropy"))


def _run_featdist(cfg, out, odir):
    train, _, label = load_data(cfg)
    fd = cfg.featdist
    s = T.feature_distance_stats(_source(cfg), train, fd.get("pad", 4), fd.get("flip", True), cfg.seed,
                                 fd.get("bins", 20), odir / "featdist_hist.csv")
    out.files["featdist_summary.csv"] = _csv_bytes(["dataset", "count", "mean_distance"],
                                                   [{"dataset": label, "count": len(s.distances),
                                                     "mean_distance": f"{s.mean:.6f}"}])


def _run_cache(cfg, out, odir):
    train, _, _ = load_data(cfg)
    T.cache_features(_source(cfg), train, odir / "features.rfc", workers=cfg.workers)


_DISPATCH = {
    "train": _run_training, "advtrain": _run_training, "freetrain": _run_training,
    "eval": _run_eval, "transfer-head": _run_transfer_head, "block-sweep": _run_block_sweep,
    "lwf": _run_lwf, "self-distill": _run_lwf, "lowdata-sweep": _run_lowdata,
    "gradviz": _run_gradviz, "featdist": _run_featdist, "cache-features": _run_cache,
}


# --------------------------------------------------------------------------
# run / reproduce

def resolve_out(cfg: ExperimentConfig, out: str | None = None) -> Path:
    """``--out`` beats ``ROBUXFER_OUT``, which beats the config's ``out``."""
    if out:
        return Path(out)
    env = os.environ.get("ROBUXFER_OUT")
    if env:
        return Path(env)
    if cfg.out:
        return cfg.path(cfg.out)
    return Path("runs") / cfg.name


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_manifest(odir: Path, manifest: dict) -> None:
    (odir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run(cfg: ExperimentConfig, out: str | None = None, workers: int | None = None) -> Path:
    """Execute ``cfg``; returns the output directory. Raises on failure after marking the manifest."""
    if workers is not None:
        cfg.workers = workers
    odir = resolve_out(cfg, out)
    odir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION, "experiment": cfg.kind, "name": cfg.name, "seed": cfg.seed,
        "workers": cfg.workers, "config_sha256": cfg.sha256, "config_text": cfg.text,
        "config_dir": str(cfg.base_dir),
        "versions": {"robuxfer": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "status": "running", "started_utc": _now(),
    }
    _write_manifest(odir, manifest)
    outcome = Outcome()
    try:
        _DISPATCH[cfg.kind](cfg, outcome, odir)
        for name, blob in outcome.files.items():
            (odir / name).write_bytes(blob)
        (odir / "results.csv").write_bytes(_csv_bytes(RESULT_COLUMNS, outcome.rows))
        (odir / "timings.csv").write_bytes(_csv_bytes(["run_id", "wall_clock_s", "attack_gradients"],
                                                      outcome.timings))
        manifest["status"] = "ok"
    except BaseException as e:
        if outcome.rows:
            (odir / "results.csv").write_bytes(_csv_bytes(RESULT_COLUMNS, outcome.rows))
        manifest["status"] = "failed"
        manifest["error"] = "".join(traceback.format_exception_only(type(e), e)).strip()
        raise
    finally:
        manifest["finished_utc"] = _now()
        manifest["artifacts"] = {p.name: _sha(p) for p in sorted(odir.iterdir())
                                 if p.is_file() and p.name != "manifest.json"}
        _write_manifest(odir, manifest)
    return odir


def reproduce(manifest_path, out: str) -> tuple[Path, bool]:
    """Re-run a recorded experiment single-worker; report whether results.csv matches bitwise."""
    man = json.loads(Path(manifest_path).read_text())
    cfg = parse_config(man["config_text"], man["config_dir"], seed=man["seed"])
    odir = run(cfg, out=out, workers=1)
    expected = man.get("artifacts", {}).get("results.csv")
    return odir, expected is not None and expected == _sha(odir / "results.csv")


# --------------------------------------------------------------------------
# images and reports

def normalize_tile(g: np.ndarray) -> np.ndarray:
    """Min-max scale one gradient map to uint8; a constant map becomes 127."""
    lo, hi = float(g.min()), float(g.max())
    if hi == lo:
        return np.full(g.shape, 127, dtype=np.uint8)
    return np.round((g - lo) / (hi - lo) * 255.0).astype(np.uint8)


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def decode_ppm(raw: bytes) -> np.ndarray:
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise FormatError("not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], np.uint8, h * w * 3).reshape(h, w, 3)


def gradient_grid(grads: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Tile per-image normalized gradient maps (N, C, H, W) into an RGB grid."""
    n, c, h, w = grads.shape
    if c not in (1, 3):
        raise UsageError("gradient maps need 1 or 3 channels")
    grid = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for i in range(min(n, rows * cols)):
        tile = normalize_tile(grads[i]).transpose(1, 2, 0)
        if c == 1:
            tile = np.repeat(tile, 3, axis=2)
        r, q = divmod(i, cols)
        grid[r * h:(r + 1) * h, q * w:(q + 1) * w] = tile
    return grid


def gradviz(model: ModelGraph, images: np.ndarray, labels: np.ndarray, out_path, rows: int, cols: int,
            loss_kind: str = "cross_entropy") -> bytes:
    """Write (and return) a PPM grid of input gradients of the loss, one tile per image."""
    if rows < 1 or cols < 1:
        raise UsageError("rows and cols must be >= 1")
    g = input_gradient(model, images, labels, loss_kind, reduction="sum") if len(images) else \
        np.zeros((0,) + tuple(images.shape[1:]))
    blob = encode_ppm(gradient_grid(g, rows, cols))
    if out_path is not None:
        Path(out_path).write_bytes(blob)
    return blob


LONG_HEADER = ["experiment", "x", "metric", "value"]
_X_COLUMNS = {"k": "block-sweep", "lambda_d": "lwf", "n": "lowdata-sweep", "hidden_layers": "transfer-head"}
_LABEL_COLUMNS = {"blocks", "method"}


def report(paths: list, out_path=None) -> list[list[str]]:
    """Flatten sweep CSVs into ``experiment, x, metric, value`` rows (values copied verbatim)."""
    rows: list[list[str]] = []
    for p in paths:
        with open(p, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            body = list(reader)
        if header is None:
            raise FormatError(f"{p}: empty CSV")
        if header == LONG_HEADER:
            rows += body
            continue
        if header[0] not in _X_COLUMNS:
            raise FormatError(f"{p}: unrecognized sweep schema (first column {header[0]!r})")
        for r in body:
            if len(r) != len(header):
                raise FormatError(f"{p}: ragged row {r}")
            rec = dict(zip(header, r))
            exp = _X_COLUMNS[header[0]]
            if "method" in rec:
                exp += f"/{rec['method']}"
            for col in header[1:]:
                if col not in _LABEL_COLUMNS:
                    rows.append([exp, rec[header[0]], col, rec[col]])
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LONG_HEADER)
            w.writerows(rows)
    return rows
