"""Acceptance suite.

Each test checks one numbered acceptance criterion and prints a single
``[criterion N] PASS|FAIL`` line with the measured numbers.

Trained models are cached under ``$ROBUXFER_ACCEPT_CACHE`` (default
``<repo>/.acceptance_cache``), keyed by a hash of their recipe. The first
run trains them, which takes about 20 minutes on one CPU core; later runs
only evaluate. Delete the directory to retrain from scratch.
"""
import csv
import hashlib
import json
import os
import textwrap
import time
from pathlib import Path

import numpy as np
import pytest

from robuxfer import autodiff as ad
from robuxfer import harness as H
from robuxfer import transfer as T
from robuxfer.attacks import AttackConfig, loss_values, pgd
from robuxfer.autodiff import Tensor
from robuxfer.cli import main
from robuxfer.datasets import SubsetSpec, load_digits, split_classes, train_val_split
from robuxfer.models import ModelGraph, build_cnn_lite, build_mlp_head
from robuxfer.training import TrainConfig, train_adversarial, train_natural
from test_autodiff import naive_conv, naive_conv_grads

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("ROBUXFER_ACCEPT_CACHE", ROOT / ".acceptance_cache"))

EPS = 0.3
WIDTH = 8
ITERS = 1500
SCHEDULE = [(0, 0.05), (1125, 0.005)]
# sources learn class split B; the transfer target is split A
NATURAL = dict(width=WIDTH, iterations=ITERS, batch_size=64, lr_schedule=SCHEDULE, weight_decay=5e-4,
               augment=True, aug_pad=4, aug_flip=False)
# PGD-7 training attack; eps ramps up linearly over the first 500 iterations
ROBUST = dict(NATURAL, attack=dict(eps=EPS, step_size=0.1, steps=7), eps_warmup=500)
PGD20 = AttackConfig(eps=EPS, steps=20)
CW20 = AttackConfig(eps=EPS, steps=20, loss_kind="cw_margin")
HEAD_CFG = TrainConfig(iterations=2000, batch_size=64, lr_schedule=[(0, 0.05), (1500, 0.005)])


def verdict(capsys, n, ok, detail):
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    with capsys.disabled():
        print("\n" + line)
    CACHE.mkdir(parents=True, exist_ok=True)
    log = CACHE / "outcomes.json"
    seen = json.loads(log.read_text()) if log.exists() else {}
    seen[str(n)] = line
    log.write_text(json.dumps(seen, indent=1, sort_keys=True))
    assert ok, line


def _pct(x):
    return f"{100 * x:.1f}%"


# ---------------------------------------------------------------- shared fixtures

@pytest.fixture(scope="session")
def digits():
    train, val = train_val_split(load_digits(), 0.2, seed=0)
    a, b, split = split_classes(train, SubsetSpec(0.5, seed=0))
    av, bv = split.apply(val)
    return {"A": a, "B": b, "Av": av, "Bv": bv}


def _cached(name, recipe, fit):
    key = hashlib.sha256(json.dumps(recipe, sort_keys=True).encode()).hexdigest()[:12]
    path = CACHE / f"{name}-{key}.rxf"
    if path.exists():
        return ModelGraph.load(path)
    CACHE.mkdir(parents=True, exist_ok=True)
    model = fit()
    model.save(path)
    return model


def _train_cfg(recipe):
    r = {k: v for k, v in recipe.items() if k != "width"}
    if "attack" in r:
        r["attack"] = AttackConfig(**r["attack"])
    return TrainConfig(**r)


@pytest.fixture(scope="session")
def natural(digits):
    def fit():
        m = build_cnn_lite(width=WIDTH, num_classes=5, seed=0)
        train_natural(m, digits["B"], _train_cfg(NATURAL))
        return m
    return _cached("natural", NATURAL, fit)


@pytest.fixture(scope="session")
def robust(digits):
    def fit():
        m = build_cnn_lite(width=WIDTH, num_classes=5, seed=0)
        train_adversarial(m, digits["B"], _train_cfg(ROBUST))
        return m
    return _cached("robust", ROBUST, fit)


@pytest.fixture(scope="session")
def source_pgd20(robust, digits):
    return T.evaluate(robust, digits["Bv"], {"pgd": PGD20})


@pytest.fixture(scope="session")
def frozen_a(robust, digits):
    """Linear head on the frozen robust extractor, trained on natural A images."""
    return T.retrain_head(robust, digits["A"], T.HeadSpec(), HEAD_CFG, digits["Av"],
                          {"pgd": PGD20, "cw": CW20})


# ---------------------------------------------------------------- 1: autodiff

def _primitive_cases(rng):
    x4 = rng.standard_normal((2, 3, 4, 4))
    x4[np.abs(x4) < 1e-3] = 0.5  # keep relu away from its kink
    w4 = rng.standard_normal((2, 3, 4, 4))
    m = rng.standard_normal((3, 4))
    k = rng.standard_normal((2, 3, 3, 3))
    C = 3
    gamma, beta = rng.standard_normal(C), rng.standard_normal(C)
    rm, rv = rng.standard_normal(C), rng.random(C) + 0.5
    z = rng.standard_normal((6, 5)) * 3
    y = rng.integers(0, 5, 6)
    # separated logits keep the CW max away from ties and the kappa clamp
    zs = rng.permutation(30).reshape(6, 5).astype(float) * 0.1
    stride = int(rng.integers(1, 3))
    mask = int(rng.integers(1 << 30))
    x5 = rng.standard_normal((2, 3, 5, 5))
    kw = rng.standard_normal(ad.conv2d(x5, k, stride=stride, pad=1).shape)
    wsum = lambda t, w: ad.tsum(ad.mul(t, w))
    return [
        ("matmul", x4[0, 0, :3], lambda t: wsum(ad.matmul(t, m.T), rng_const(3, 3))),
        ("linear", rng.standard_normal((5, 3)),
         lambda t: wsum(ad.linear(t, m.T, np.arange(4.0)), rng_const(5, 4))),
        ("conv2d", x5, lambda t: wsum(ad.conv2d(t, k, np.arange(2.0), stride=stride, pad=1), kw)),
        ("conv2d-kernel", k, lambda t: wsum(ad.conv2d(x5, t, stride=stride, pad=1), kw)),
        ("batchnorm-train", x4, lambda t: wsum(ad.batchnorm(t, gamma, beta, rm.copy(), rv.copy(), True), w4)),
        ("batchnorm-eval", x4, lambda t: wsum(ad.batchnorm(t, gamma, beta, rm.copy(), rv.copy(), False), w4)),
        ("relu", x4, lambda t: wsum(ad.relu(t), w4)),
        ("add", x4, lambda t: wsum(ad.add(t, w4), w4)),
        ("sub", x4, lambda t: wsum(ad.sub(w4, t), w4)),
        ("mul", x4, lambda t: wsum(ad.mul(t, t), w4)),
        ("square", x4, lambda t: wsum(ad.square(t), w4)),
        ("sqrt", np.abs(x4) + 0.5, lambda t: wsum(ad.sqrt(t), w4)),
        ("sum-axis", x4, lambda t: wsum(ad.tsum(t, axis=1), w4[:, 0])),
        ("mean", x4, lambda t: ad.tmean(ad.mul(t, w4))),
        ("reshape", x4, lambda t: wsum(ad.reshape(t, (6, 16)), w4.reshape(6, 16))),
        ("flatten", x4, lambda t: wsum(ad.flatten(t), w4.reshape(2, 48))),
        ("avgpool", x4, lambda t: wsum(ad.avgpool(t, 2), w4[:, :, :2, :2])),
        ("global_avgpool", x4, lambda t: wsum(ad.global_avgpool(t), w4[:, :, 0, 0])),
        ("dropout", x4, lambda t: wsum(ad.dropout(t, 0.25, True, rng=ad.make_rng(mask)), w4)),
        ("softmax_cross_entropy", z, lambda t: ad.softmax_cross_entropy(t, y)),
        ("cw_margin", zs, lambda t: ad.cw_margin(t, y, kappa=100.0)),
        ("cw_objective", zs, lambda t: ad.cw_objective(t, y, kappa=100.0)),
    ]


def rng_const(*shape):
    return np.arange(np.prod(shape), dtype=float).reshape(shape) / 10


def test_criterion_1_autodiff(capsys):
    t0 = time.perf_counter()
    worst, failures, counts = 0.0, [], {}
    for inst in range(20):
        for name, x, f in _primitive_cases(np.random.default_rng(1000 + inst)):
            rep = ad.finite_diff_check(f, x, h=1e-5, tol=1e-4)
            worst = max(worst, rep.max_rel_error)
            counts[name] = counts.get(name, 0) + 1
            if not rep.passed:
                failures.append((name, inst, rep.max_rel_error))
    exact = True
    rng = np.random.default_rng(7)
    for stride, pad, r in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 1, 4), (2, 0, 1)]:
        H_ = 5 if (5 + 2 * pad - r) % stride == 0 else 6
        # integer operands make every summation order exact, so equality is bitwise
        x = rng.integers(-4, 5, (2, 3, H_, H_)).astype(np.float64)
        k = rng.integers(-4, 5, (4, 3, r, r)).astype(np.float64)
        ref = naive_conv(x, k, stride, pad)
        xt, kt = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
        with ad.Tape() as tape:
            out = ad.conv2d(xt, kt, stride=stride, pad=pad)
        g = rng.integers(-3, 4, ref.shape).astype(np.float64)
        tape.backward(out, g)
        rdx, rdk = naive_conv_grads(x, k, g, stride, pad)
        exact &= np.array_equal(out.data, ref) and np.array_equal(xt.grad, rdx) and np.array_equal(kt.grad, rdk)
    elapsed = time.perf_counter() - t0
    ok = not failures and exact and min(counts.values()) >= 20 and elapsed < 60
    verdict(capsys, 1, ok, f"{len(counts)} primitives x {min(counts.values())} instances, "
                           f"max rel err {worst:.2e} (< 1e-4), conv2d naive-loop exact={exact}, "
                           f"{elapsed:.1f}s (< 60s)" + (f", failures {failures[:3]}" if failures else ""))


# ---------------------------------------------------------------- 2: attacks

def test_criterion_2_attack_contracts(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    model = build_cnn_lite(width=2, num_classes=4, in_shape=(1, 8, 8), seed=0)
    pairs = violations = 0
    for trial in range(100):
        cfg = AttackConfig(eps=float(rng.choice([0.0, 1e-3, rng.uniform(0, 0.5), 1.0])),
                           step_size=float(rng.uniform(1e-3, 0.6)), steps=int(rng.integers(1, 6)),
                           random_start=bool(rng.integers(2)),
                           loss_kind=("cross_entropy", "cw_margin")[trial % 2],
                           kappa=float(rng.choice([0.0, 5.0])), seed=trial)
        x = rng.random((100, 1, 8, 8)).astype(np.float32)
        x[:10] = rng.integers(0, 2, (10, 1, 8, 8))  # saturated pixels
        y = rng.integers(0, 4, 100)
        adv = pgd(model, x, y, cfg, batch_index=trial)
        dev = np.abs(adv.astype(np.float64) - x).reshape(100, -1).max(axis=1)
        violations += int(np.sum((dev > cfg.eps + 1e-7) | (adv.reshape(100, -1).min(1) < 0)
                                 | (adv.reshape(100, -1).max(1) > 1)))
        pairs += len(x)

    # logistic model: the loss is monotone in the signed margin, so the optimum is a box corner
    worst_gap = 0.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        w, b = r.normal(size=12), float(r.normal())
        lin = build_mlp_head(12, 0, num_classes=2, dtype=np.float64)
        lin.fc.params["weight"].data = np.stack([np.zeros(12), w])
        lin.fc.params["bias"].data = np.array([0.0, b])
        x = r.random((16, 12))
        y = r.integers(0, 2, 16)
        eps = 0.1
        adv = pgd(lin, x, y, AttackConfig(eps=eps, step_size=eps / 2, steps=20, seed=seed))
        s = np.where(y == 0, 1.0, -1.0)[:, None]
        x_star = np.clip(x + eps * np.sign(s * w), np.maximum(x - eps, 0), np.minimum(x + eps, 1))
        logit = x_star @ w + b
        analytic = np.where(y == 0, np.logaddexp(0, logit), np.logaddexp(0, logit) - logit)
        worst_gap = max(worst_gap, float(np.max(np.abs(loss_values(lin, adv, y, AttackConfig(eps=eps)) - analytic))))
    elapsed = time.perf_counter() - t0
    ok = pairs == 10_000 and violations == 0 and worst_gap <= 1e-6 and elapsed < 300
    verdict(capsys, 2, ok, f"{pairs} pairs, {violations} constraint violations; logistic worst-case "
                           f"loss gap {worst_gap:.1e} (<= 1e-6); {elapsed:.1f}s (< 300s)")


# ---------------------------------------------------------------- 3: robustness gap

def test_criterion_3_robustness_gap(capsys, natural, robust, digits):
    # PGD-40 with the customary 0.01 step; the eps/4 default step is reported alongside
    pgd40 = AttackConfig(eps=EPS, step_size=0.01, steps=40, seed=3)
    pgd40_big = AttackConfig(eps=EPS, steps=40, seed=3)
    nat = T.evaluate(natural, digits["Bv"], {"pgd40": pgd40, "pgd40b": pgd40_big})
    rob = T.evaluate(robust, digits["Bv"], {"pgd40": pgd40, "pgd40b": pgd40_big})
    nat_worst = max(nat["pgd40_acc"], nat["pgd40b_acc"])
    rob_worst = min(rob["pgd40_acc"], rob["pgd40b_acc"])
    ok = nat_worst < 0.05 and rob_worst > 0.80
    verdict(capsys, 3, ok, f"natural clean {_pct(nat['clean_acc'])}, PGD-40 {_pct(nat['pgd40_acc'])}"
                           f"/{_pct(nat['pgd40b_acc'])} (< 5%); robust clean {_pct(rob['clean_acc'])}, "
                           f"PGD-40 {_pct(rob['pgd40_acc'])}/{_pct(rob['pgd40b_acc'])} (> 80%) "
                           f"[step 0.01 / step eps/4]")


# ---------------------------------------------------------------- 4: transfer

def test_criterion_4_robustness_transfers(capsys, natural, digits, source_pgd20, frozen_a):
    nat_a = T.retrain_head(natural, digits["A"], T.HeadSpec(), HEAD_CFG, digits["Av"], {"pgd": PGD20})
    src = source_pgd20["pgd_acc"]
    got = frozen_a.metrics["pgd_acc"]
    ok = got >= 0.5 * src and nat_a.metrics["pgd_acc"] < 0.02
    verdict(capsys, 4, ok, f"source PGD-20 on B {_pct(src)}; robust-source frozen head on A: clean "
                           f"{_pct(frozen_a.metrics['clean_acc'])}, PGD-20 {_pct(got)} = {got / src:.2f} of source "
                           f"(>= 0.50); natural-source head on A: clean {_pct(nat_a.metrics['clean_acc'])}, "
                           f"PGD-20 {_pct(nat_a.metrics['pgd_acc'])} (< 2%)")


# ---------------------------------------------------------------- 5: block sweep

def test_criterion_5_block_sweep(capsys, robust, digits):
    cfg = TrainConfig(iterations=1000, batch_size=64, lr_schedule=[(0, 0.05), (750, 0.005)], weight_decay=5e-4)
    rows = T.block_sweep(robust, digits["B"], [2, 9], cfg, digits["Bv"], PGD20)
    by_k = {r["k"]: r for r in rows}
    base, top, full = by_k[0]["robust_acc"], by_k[2]["robust_acc"], by_k[9]["robust_acc"]
    ok = by_k[2]["blocks"] == "bn_final+fc" and top >= base - 0.02 and full < 0.05
    verdict(capsys, 5, ok, f"frozen baseline PGD-20 {_pct(base)}; retrain {by_k[2]['blocks']} {_pct(top)} "
                           f"(>= baseline - 2 pts); retrain all 9 blocks {_pct(full)} (< 5%), "
                           f"clean {_pct(by_k[9]['clean_acc'])}")


# ---------------------------------------------------------------- 6: MLP heads

def test_criterion_6_mlp_heads(capsys, robust, digits, frozen_a):
    cw = {0: frozen_a.metrics["cw_acc"]}
    train = {0: frozen_a.metrics["train_acc"]}
    deep_cfg = TrainConfig(iterations=8000, batch_size=64, lr_schedule=[(0, 0.1), (6000, 0.01)])
    for hidden in (1, 2):
        r = T.retrain_head(robust, digits["A"], T.HeadSpec(hidden_layers=hidden, hidden_width=256),
                           deep_cfg, digits["Av"], {"cw": CW20})
        cw[hidden], train[hidden] = r.metrics["cw_acc"], r.metrics["train_acc"]
    spread = max(cw.values()) - min(cw.values())
    ok = spread <= 0.05 and max(train.values()) == 1.0
    verdict(capsys, 6, ok, "CW-20 by hidden layers " + ", ".join(f"{h}: {_pct(v)}" for h, v in cw.items())
            + f" (spread {100 * spread:.1f} <= 5 pts); train acc "
            + ", ".join(f"{h}: {_pct(v)}" for h, v in train.items()) + " (max = 100%)")


# ---------------------------------------------------------------- 7: LwF

LAMBDAS = [0.0, 0.01, 0.1, 1.0]


def test_criterion_7_lwf_tradeoff(capsys, robust, digits, frozen_a):
    cache = T.cache_features(robust, digits["A"])
    rows = []
    for lam in LAMBDAS:
        cfg = T.LwfConfig(lambda_d=lam, total_iterations=2000, lr=0.03)
        r = T.lwf_finetune(robust, digits["A"], cache, cfg, digits["Av"], {"pgd": PGD20})
        rows.append((lam, r.metrics["clean_acc"], r.metrics["pgd_acc"]))
    fc, fr = frozen_a.metrics["clean_acc"], frozen_a.metrics["pgd_acc"]
    good = [lam for lam, c, r in rows if c >= fc + 0.03 and r >= fr - 0.02]
    collapse = rows[0][2] < 0.05
    ok = bool(good) and collapse
    verdict(capsys, 7, ok, f"frozen clean {_pct(fc)} PGD-20 {_pct(fr)}; sweep "
            + "; ".join(f"l={lam:g}: {_pct(c)}/{_pct(r)}" for lam, c, r in rows)
            + f"; qualifying l_d {good} (clean >= +3 pts, robust >= -2 pts); l_d=0 robust < 5%: {collapse}")


# ---------------------------------------------------------------- 8: self-distillation

SELF_LAMBDAS = [0.03, 0.3, 1.0]


def test_criterion_8_self_distillation(capsys, robust, digits, source_pgd20):
    cache = T.cache_features(robust, digits["B"])
    bc, br = source_pgd20["clean_acc"], source_pgd20["pgd_acc"]
    rows = []
    for lam in SELF_LAMBDAS:
        cfg = T.LwfConfig(lambda_d=lam, total_iterations=2000, lr=0.003)
        r = T.self_distill_finetune(robust, digits["B"], cache, cfg, digits["Bv"], {"pgd": PGD20})
        rows.append((lam, r.metrics["clean_acc"], r.metrics["pgd_acc"]))
    good = [lam for lam, c, r in rows if c >= bc + 0.005 and r >= br - 0.01]
    verdict(capsys, 8, bool(good), f"baseline clean {_pct(bc)} PGD-20 {_pct(br)}; sweep "
            + "; ".join(f"l={lam:g}: {_pct(c)}/{_pct(r)}" for lam, c, r in rows)
            + f"; qualifying l_d {good} (clean >= +0.5 pts, robust >= -1 pt)")


# ---------------------------------------------------------------- 9: averaged metric

def test_criterion_9_avg_metric(capsys):
    a = H.avg_metric(64.96, 58.48)
    b = H.avg_metric(25.16, 15.86)
    ok = a == 61.72 and b == 20.51
    verdict(capsys, 9, ok, f"(64.96+58.48)/2 = {a!r}, (25.16+15.86)/2 = {b!r}")


# ---------------------------------------------------------------- 10: feature distances

def test_criterion_10_feature_distances(capsys, robust, digits, tmp_path):
    on = T.feature_distance_stats(robust, digits["B"], pad=4, flip=False, seed=0, bins=20,
                                  csv_path=tmp_path / "hist_on.csv")
    off = T.feature_distance_stats(robust, digits["B"], pad=0, flip=False, seed=0, bins=20,
                                   csv_path=tmp_path / "hist_off.csv")
    with open(tmp_path / "hist_on.csv", newline="") as fh:
        total = sum(int(r["count"]) for r in csv.DictReader(fh))
    ok = on.mean > 0 and total == len(digits["B"]) and np.all(off.distances == 0)
    verdict(capsys, 10, ok, f"pad=4 mean distance {on.mean:.3f} (> 0), histogram total {total} of "
                            f"{len(digits['B'])}; no augmentation: max distance {off.distances.max()!r} (== 0)")


# ---------------------------------------------------------------- 11: reproducibility

def test_criterion_11_reproducible(capsys, robust, tmp_path):
    ckpt = tmp_path / "robust.rxf"
    robust.save(ckpt)
    common = """
        schema_version = 1
        [dataset]
        class_fraction = 0.5
        part = "{part}"
        limit_val = 100
    """
    configs = {
        "advtrain": common.format(part="b") + """
            [model]
            width = 4
            [train]
            iterations = 30
            batch_size = 32
            lr_schedule = [[0, 0.05]]
            [train.attack]
            eps = 0.3
            steps = 3
            step_size = 0.1
            [[eval.attacks]]
            eps = 0.3
            steps = 5
        """,
        "transfer-head": common.format(part="a") + f"""
            [model]
            checkpoint = "{ckpt}"
            [train]
            iterations = 200
            [head]
            hidden_layers = [0, 1]
            [[eval.attacks]]
            eps = 0.3
            steps = 5
        """,
    }
    same = {}
    for kind, body in configs.items():
        cfg = tmp_path / f"{kind}.toml"
        cfg.write_text(f'experiment = "{kind}"\nname = "{kind}"\n' + textwrap.dedent(body))
        assert main(["run", str(cfg), "--out", str(tmp_path / kind)]) == 0
        rc = main(["reproduce", str(tmp_path / kind / "manifest.json"), "--out", str(tmp_path / f"{kind}-again")])
        first = (tmp_path / kind / "results.csv").read_bytes()
        again = (tmp_path / f"{kind}-again" / "results.csv").read_bytes()
        same[kind] = rc == 0 and first == again and len(first.splitlines()) > 1
    verdict(capsys, 11, all(same.values()), f"results.csv regenerated bit-identically from manifest: {same}")
