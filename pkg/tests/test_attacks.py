import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robuxfer import autodiff as ad
from robuxfer.attacks import (AttackConfig, GradientCounter, accuracy, fgsm, input_gradient,
                              loss_values, pgd, project, robust_accuracy)
from robuxfer.autodiff import Tensor
from robuxfer.datasets import Dataset
from robuxfer.models import build_cnn_lite, build_mlp_head


def _linear(w, b=None, dtype=np.float64):
    """Affine two-class model with logits [0, w.x + b]."""
    w = np.asarray(w, dtype=dtype)
    m = build_mlp_head(len(w), 0, num_classes=2, dtype=dtype)
    m.fc.params["weight"].data = np.stack([np.zeros_like(w), w])
    m.fc.params["bias"].data = np.array([0.0, 0.0 if b is None else b], dtype=dtype)
    return m


def test_config_defaults_and_scaling():
    c = AttackConfig(eps=0.2)
    assert c.step_size == pytest.approx(0.05)
    c = AttackConfig.from_255(8, 2)
    assert c.eps == pytest.approx(8 / 255) and c.step_size == pytest.approx(2 / 255)
    with pytest.raises(ad.UsageError):
        AttackConfig(eps=-0.1)
    with pytest.raises(ad.UsageError):
        AttackConfig(loss_kind="hinge")


# ---------------------------------------------------------------- FGSM

def test_fgsm_linear_example():
    # class 1 score w.x with w=(1,-2); label 0 so the loss rises with w.x
    m = _linear([1.0, -2.0])
    x = np.array([[0.5, 0.5]])
    out = fgsm(m, x, np.array([0]), AttackConfig(eps=0.1))
    np.testing.assert_allclose(out, [[0.6, 0.4]], atol=1e-12)


def test_fgsm_zero_eps_identity():
    m = _linear([1.0, -2.0])
    x = np.array([[0.3, 0.7]])
    assert np.array_equal(fgsm(m, x, np.array([0]), AttackConfig(eps=0.0)), x)


def test_fgsm_clips_to_unit_box():
    m = _linear([1.0, -2.0])
    out = fgsm(m, np.array([[0.95, 0.02]]), np.array([0]), AttackConfig(eps=0.1))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)


def test_pgd_one_step_equals_fgsm():
    m = build_cnn_lite(width=4, num_classes=3, in_shape=(1, 8, 8), seed=1)
    x = np.random.default_rng(0).random((5, 1, 8, 8)).astype(np.float32)
    y = np.array([0, 1, 2, 0, 1])
    one = AttackConfig(eps=0.1, step_size=0.1, steps=1, random_start=False)
    assert np.array_equal(pgd(m, x, y, one), fgsm(m, x, y, one))


# ---------------------------------------------------------------- PGD vs analytic optimum

@pytest.mark.parametrize("seed", range(5))
def test_pgd_reaches_logistic_worst_case(seed):
    rng = np.random.default_rng(seed)
    d = 12
    w = rng.normal(size=d)
    b = float(rng.normal())
    x = rng.random((8, d))
    y = rng.integers(0, 2, 8)
    eps = 0.1
    m = _linear(w, b)
    adv = pgd(m, x, y, AttackConfig(eps=eps, step_size=eps / 2, steps=20, random_start=True, seed=seed))
    # oracle: loss is monotone in the signed margin, so the box corner in direction s*w is optimal
    s = np.where(y == 0, 1.0, -1.0)[:, None]
    x_star = np.clip(x + eps * np.sign(s * w), np.maximum(x - eps, 0), np.minimum(x + eps, 1))
    logit = x_star @ w + b
    worst = np.where(y == 0, np.logaddexp(0, logit), np.logaddexp(0, logit) - logit)
    got = loss_values(m, adv, y, AttackConfig(eps=eps))
    np.testing.assert_allclose(got, worst, atol=1e-6, rtol=0)


def test_pgd_cw_margin_reaches_worst_case():
    w = np.array([0.5, -1.0, 2.0])
    m = _linear(w)
    x = np.array([[0.5, 0.5, 0.5]])
    cfg = AttackConfig(eps=0.05, steps=10, loss_kind="cw_margin", kappa=10.0)
    adv = pgd(m, x, np.array([0]), cfg)
    np.testing.assert_allclose(adv, x + 0.05 * np.sign(w), atol=1e-12)


# ---------------------------------------------------------------- constraint

def test_constraint_ten_thousand_pairs():
    rng = np.random.default_rng(0)
    model = build_mlp_head(16, 1, 8, 4, seed=0)
    total = 0
    for trial in range(100):
        cfg = AttackConfig(eps=float(rng.choice([0.0, 1e-3, rng.uniform(0, 0.5), 1.0])),
                           step_size=float(rng.uniform(1e-3, 0.6)), steps=int(rng.integers(1, 6)),
                           random_start=bool(rng.integers(2)),
                           loss_kind=["cross_entropy", "cw_margin"][trial % 2],
                           restarts=int(rng.integers(1, 3)), seed=trial)
        x = rng.random((100, 16)).astype(np.float32)
        x[:10] = rng.integers(0, 2, (10, 16))  # saturated pixels
        y = rng.integers(0, 4, 100)
        adv = pgd(model, x, y, cfg, batch_index=trial)
        assert np.abs(adv.astype(np.float64) - x).max() <= cfg.eps + 1e-7
        assert adv.min() >= 0 and adv.max() <= 1
        total += len(x)
    assert total == 10_000


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.integers(0, 10_000))
def test_project_property(eps, seed):
    rng = np.random.default_rng(seed)
    x = rng.random(50)
    p = project(x + rng.normal(scale=2, size=50), x, eps)
    assert np.all(np.abs(p - x) <= eps + 1e-12) and p.min() >= 0 and p.max() <= 1
    assert np.array_equal(project(p, x, eps), p)


def test_pgd_not_worse_than_its_start():
    m = build_cnn_lite(width=4, num_classes=3, in_shape=(1, 8, 8), seed=2)
    x = np.random.default_rng(1).random((6, 1, 8, 8)).astype(np.float32)
    y = np.arange(6) % 3
    cfg = AttackConfig(eps=0.05, steps=5, random_start=False)
    assert loss_values(m, pgd(m, x, y, cfg), y, cfg).sum() >= loss_values(m, x, y, cfg).sum()


def test_pgd_random_start_keyed_by_seed():
    m = _linear([1.0, -1.0])
    x = np.full((3, 2), 0.5)
    y = np.zeros(3, dtype=int)
    c = AttackConfig(eps=0.1, steps=1, step_size=1e-3, seed=4)
    assert np.array_equal(pgd(m, x, y, c), pgd(m, x, y, c))
    assert not np.array_equal(pgd(m, x, y, c), pgd(m, x, y, AttackConfig(eps=0.1, steps=1, step_size=1e-3, seed=5)))


def test_pgd_needs_a_step():
    with pytest.raises(ad.UsageError):
        pgd(_linear([1.0]), np.zeros((1, 1)), np.zeros(1, int), AttackConfig(steps=0))


def test_gradient_counter():
    c = GradientCounter()
    pgd(_linear([1.0]), np.full((2, 1), 0.5), np.zeros(2, int), AttackConfig(eps=0.1, steps=7, restarts=2), c)
    assert c.count == 14


# ---------------------------------------------------------------- evaluation

def test_robust_accuracy_eps_zero_is_clean():
    m = build_cnn_lite(width=4, num_classes=3, in_shape=(1, 8, 8), seed=3)
    rng = np.random.default_rng(2)
    d = Dataset(rng.random((20, 1, 8, 8)).astype(np.float32), rng.integers(0, 3, 20), num_classes=3)
    assert robust_accuracy(m, d, AttackConfig(eps=0.0)) == accuracy(m, d.images, d.labels)


def test_robust_accuracy_constant_model():
    m = build_mlp_head(4, 0, num_classes=3)
    m.fc.params["weight"].data[:] = 0
    m.fc.params["bias"].data[:] = np.array([0, 5, 0], dtype=np.float32)
    d = Dataset(np.random.default_rng(0).random((9, 4)).astype(np.float32), np.arange(9) % 3, num_classes=3)
    assert robust_accuracy(m, d, AttackConfig(eps=0.3, steps=3)) == pytest.approx(1 / 3)


def test_robust_accuracy_empty():
    d = Dataset(np.zeros((0, 4), np.float32), np.zeros(0, int), num_classes=2)
    assert robust_accuracy(_linear([1.0] * 4), d, AttackConfig()) == 0.0


@pytest.mark.parametrize("kind", ["cross_entropy", "cw_margin"])
def test_input_gradient_matches_finite_differences(kind):
    m = build_cnn_lite(width=4, num_classes=3, in_shape=(1, 8, 8), seed=4, dtype=np.float64)
    x = np.random.default_rng(5).random((2, 1, 8, 8))
    y = np.array([1, 2])

    def f(t):
        logits = m.forward(t)
        if kind == "cross_entropy":
            return ad.softmax_cross_entropy(logits, y)
        return ad.cw_objective(logits, y, 5.0, reduction="mean")

    g = input_gradient(m, x, y, kind, kappa=5.0)
    # small step so no probe straddles a ReLU kink
    rep = ad.finite_diff_check(f, x, h=1e-6, tol=1e-4)
    assert rep.passed, rep.max_rel_error
    np.testing.assert_allclose(g, rep.analytic, atol=1e-12)
