import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tilefreq.losses import (
    LOSSES,
    LossDomainError,
    LossHyper,
    asl,
    bce_with_logits,
    class_weights,
    finite_diff_check,
    hill,
    sigmoid_f1,
    triplet,
)


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def away_from_margin(rng, shape, margin=0.05, gap=1e-3):
    z = rng.uniform(-4, 4, shape)
    p = 1 / (1 + np.exp(-z))
    bad = np.abs(p - margin) < gap
    z[bad] += 0.5
    return z


# ---------------------------------------------------------------- BCE


def test_bce_ln2():
    loss, grad = bce_with_logits([0.0], [1.0])
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    assert grad[0] == pytest.approx(-0.5)


def test_bce_stable_extremes():
    loss, grad = bce_with_logits([40.0], [1.0])
    assert loss < 1e-15
    loss, grad = bce_with_logits([-50.0, 50.0], [1.0, 0.0])
    assert np.isfinite(loss) and np.all(np.isfinite(grad))
    assert loss == pytest.approx(50.0, rel=1e-12)


def test_bce_matches_direct_formula(rng):
    z = rng.uniform(-5, 5, 12)
    y = rng.integers(0, 2, 12).astype(float)
    w = rng.uniform(0.5, 2, 12)
    direct = np.mean([-(wi * yi * math.log(sig(zi)) + (1 - yi) * math.log(1 - sig(zi))) for zi, yi, wi in zip(z, y, w)])
    assert bce_with_logits(z, y, w)[0] == pytest.approx(direct, rel=1e-12)


def test_bce_fd(rng):
    z = rng.standard_normal(10)
    y = rng.integers(0, 2, 10).astype(float)
    assert finite_diff_check(lambda v: bce_with_logits(v, y), z) < 1e-6
    w = class_weights(rng.integers(0, 2, (30, 10)))
    assert finite_diff_check(lambda v: bce_with_logits(v, y, w), z) < 1e-6


def test_length_mismatch():
    with pytest.raises(LossDomainError):
        bce_with_logits([0.0, 1.0], [1.0])
    with pytest.raises(LossDomainError):
        asl([0.0], [0.5])


def test_class_weights_mean_one_inverse_frequency():
    y = np.array([[1, 0, 1], [1, 0, 0], [1, 1, 0], [1, 0, 0]], float)
    w = class_weights(y)
    assert w.mean() == pytest.approx(1.0)
    # frequencies 1, 0.25, 0.25 -> weights proportional to 1, 4, 4
    np.testing.assert_allclose(w / w[0], [1, 4, 4])


# ---------------------------------------------------------------- ASL


def test_asl_reduces_to_bce(rng):
    z = rng.uniform(-8, 8, (20, 7))
    y = rng.integers(0, 2, (20, 7)).astype(float)
    la, ga = asl(z, y, 0, 0, 0)
    lb, gb = bce_with_logits(z, y)
    assert abs(la - lb) < 1e-12
    assert np.max(np.abs(ga - gb)) < 1e-12


def test_asl_negative_below_margin_is_zero():
    z = math.log(0.04 / 0.96)  # p = 0.04 < margin
    loss, grad = asl([z], [0.0], 1, 4, 0.05)
    assert loss == 0.0 and grad[0] == 0.0


def test_asl_matches_direct_formula(rng):
    z = away_from_margin(rng, 9)
    y = rng.integers(0, 2, 9).astype(float)
    gp, gn, m = 1.0, 4.0, 0.05
    terms = []
    for zi, yi in zip(z, y):
        p = sig(zi)
        pm = max(p - m, 0.0)
        if yi:
            terms.append(-((1 - p) ** gp) * math.log(p))
        else:
            terms.append(-(pm**gn) * math.log(1 - pm) if pm > 0 else 0.0)
    assert asl(z, y, gp, gn, m)[0] == pytest.approx(np.mean(terms), rel=1e-12)


@pytest.mark.parametrize("gp,gn", [(0, 0), (0, 2), (0, 4), (1, 0), (1, 2), (1, 4)])
def test_asl_fd(rng, gp, gn):
    z = away_from_margin(rng, 10)
    y = rng.integers(0, 2, 10).astype(float)
    # h=1e-5: at 1e-6 central-difference roundoff alone reaches ~1e-6 on the focal terms
    assert finite_diff_check(lambda v: asl(v, y, gp, gn, 0.05), z, h=1e-5) < 1e-6


def test_asl_defaults_fd(rng):
    z = away_from_margin(rng, 10)
    y = rng.integers(0, 2, 10).astype(float)
    assert finite_diff_check(lambda v: asl(v, y), z) < 1e-6


def test_asl_hyper_validation():
    with pytest.raises(LossDomainError):
        asl([0.0], [1.0], gamma_pos=-1)
    with pytest.raises(LossDomainError):
        asl([0.0], [1.0], margin=1.0)


# ---------------------------------------------------------------- Hill


def test_hill_negative_term_value():
    loss, _ = hill([0.0], [0.0], lam=1.5)
    assert loss == pytest.approx(0.25)


def test_hill_confident_negative_vanishes():
    loss, grad = hill([-40.0], [0.0])
    assert loss < 1e-30 and abs(grad[0]) < 1e-15


def test_hill_positive_term_formula():
    z = 0.7
    q = sig(z - 1.0)
    assert hill([z], [1.0], gamma=2.0)[0] == pytest.approx(-((1 - q) ** 2) * math.log(q), rel=1e-12)


def test_hill_fd(rng):
    z = rng.uniform(-4, 4, 10)
    y = rng.integers(0, 2, 10).astype(float)
    assert finite_diff_check(lambda v: hill(v, y), z, h=1e-5) < 1e-6


def test_hill_lambda_validation():
    with pytest.raises(LossDomainError):
        hill([0.0], [0.0], lam=1.0)


# ---------------------------------------------------------------- sigmoidF1


def test_sigmoid_f1_perfect():
    loss, _ = sigmoid_f1(np.full((3, 4), 50.0), np.ones((3, 4)), S=-1, E=0)
    assert loss < 1e-6


def test_sigmoid_f1_direct_formula():
    z = np.array([[2.0, -2.0]])
    y = np.array([[1.0, 0.0]])
    s1, s2 = sig(2.0), sig(-2.0)
    tp, fp, fn = s1, s2, 1 - s1
    expected = 1 - 2 * tp / (2 * tp + fn + fp)
    assert sigmoid_f1(z, y)[0] == pytest.approx(expected, rel=1e-12)


def test_sigmoid_f1_degenerate():
    loss, grad = sigmoid_f1(np.full((2, 3), -800.0), np.zeros((2, 3)))
    assert loss == 1.0
    assert np.all(grad == 0)


@pytest.mark.parametrize("S", [-1, -15, -30])
@pytest.mark.parametrize("E", [0, 1])
def test_sigmoid_f1_sweep_finite_and_fd(rng, S, E):
    # the steep sweep settings saturate unless logits sit near -E
    z = -E + rng.uniform(-3, 3, (4, 5)) / abs(S)
    y = rng.integers(0, 2, (4, 5)).astype(float)
    loss, grad = sigmoid_f1(z, y, S, E)
    assert np.isfinite(loss) and np.all(np.isfinite(grad))
    assert finite_diff_check(lambda v: sigmoid_f1(v, y, S, E), z, h=1e-7) < 1e-6


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-60, 60)), st.integers(0, 2**12 - 1),
       st.sampled_from([-1.0, -15.0, -30.0]), st.sampled_from([0.0, 1.0]))
def test_sigmoid_f1_in_unit_interval(z, bits, S, E):
    y = np.array([(bits >> i) & 1 for i in range(12)], float).reshape(3, 4)
    loss, _ = sigmoid_f1(z, y, S, E)
    assert 0.0 <= loss <= 1.0


# ---------------------------------------------------------------- triplet


def test_triplet_inactive():
    za = np.zeros(3)
    zd = np.array([0.3, 0, 0])
    loss, grads = triplet(za, za.copy(), zd, 0.1)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_triplet_active_value():
    za = np.zeros(3)
    zd = np.array([0.0, 0.05, 0.0])
    assert triplet(za, za.copy(), zd, 0.1)[0] == pytest.approx(0.05)


def test_triplet_fd(rng):
    for _ in range(20):
        za, zn, zd = rng.standard_normal((3, 6))
        margin = np.linalg.norm(za - zd) - np.linalg.norm(za - zn) + 0.5
        flat = np.concatenate([za, zn, zd])

        def f(v):
            loss, g = triplet(v[:6], v[6:12], v[12:], margin)
            return loss, np.concatenate(g)

        assert finite_diff_check(f, flat) < 1e-6


def test_triplet_errors():
    with pytest.raises(LossDomainError):
        triplet(np.zeros(2), np.zeros(3), np.zeros(2))
    with pytest.raises(LossDomainError):
        triplet(np.zeros(0), np.zeros(0), np.zeros(0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_triplet_isometry_invariant(seed):
    rng = np.random.default_rng(seed)
    za, zn, zd = rng.standard_normal((3, 4))
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    shift = rng.standard_normal(4)
    iso = [q @ v + shift for v in (za, zn, zd)]
    assert triplet(*iso, 0.5)[0] == pytest.approx(triplet(za, zn, zd, 0.5)[0], abs=1e-12)


# ---------------------------------------------------------------- shared properties


CLASSIFIERS = {
    "bce": lambda z, y: bce_with_logits(z, y),
    "asl": lambda z, y: asl(z, y),
    "hill": lambda z, y: hill(z, y),
    "sigmoidf1": lambda z, y: sigmoid_f1(z, y),
}


@pytest.mark.parametrize("name", sorted(CLASSIFIERS))
def test_gradient_sign(rng, name):
    z = away_from_margin(rng, (6, 8))
    y = rng.integers(0, 2, (6, 8)).astype(float)
    _, g = CLASSIFIERS[name](z, y)
    p = 1 / (1 + np.exp(-z))
    assert np.all(g[y == 1] < 0)
    neg = (y == 0) & (p > 0.05)
    assert np.all(g[neg] > 0)


@pytest.mark.parametrize("name", sorted(CLASSIFIERS))
@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_equivariance(name, seed):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-5, 5, (3, 7))
    y = rng.integers(0, 2, (3, 7)).astype(float)
    perm = rng.permutation(7)
    l1, g1 = CLASSIFIERS[name](z, y)
    l2, g2 = CLASSIFIERS[name](z[:, perm], y[:, perm])
    assert l2 == pytest.approx(l1, rel=1e-12, abs=1e-15)
    np.testing.assert_allclose(g2, g1[:, perm], rtol=1e-12, atol=1e-15)


def test_loss_hyper_dispatch(rng):
    z = rng.standard_normal((2, 3))
    y = rng.integers(0, 2, (2, 3)).astype(float)
    for name in LOSSES:
        loss, grad = LossHyper(name=name).fn()(z, y)
        assert np.isfinite(loss) and grad.shape == z.shape
    with pytest.raises(ValueError):
        LossHyper(name="mse")


# ---------------------------------------------------------------- checker


def test_checker_detects_corrupted_gradient(rng):
    z = rng.standard_normal(10)
    y = rng.integers(0, 2, 10).astype(float)
    _, g = bce_with_logits(z, y)
    bad = g.copy()
    bad[3] += 0.1
    assert finite_diff_check(lambda v: bce_with_logits(v, y), z, grad=bad) > 1e-2


def test_checker_on_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    assert finite_diff_check(lambda v: float(v @ v), x, grad=2 * x) < 1e-8
