import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from udareg import losses as L
from udareg.errors import ShapeError

from oracles import brute_mmd, central_diff, explicit_laplacian_form, rel_err


# ------------------------------------------------------------- regression

def test_regression_examples():
    assert L.regression_loss([5.0], [5.0], "L1")[0] == 0.0
    assert L.regression_loss([3.0, 7.0], [1.0, 4.0], "L1")[0] == 2.5
    assert L.regression_loss([2.0], [0.0], "L2")[0] == 4.0


def test_l1_subgradient_zero_at_tie():
    _, g = L.regression_loss([1.0, 2.0], [1.0, 0.0], "L1")
    assert g.tolist() == [0.0, 0.5]


def test_regression_rejects_empty_and_mismatch():
    with pytest.raises(ShapeError):
        L.regression_loss([], [], "L1")
    with pytest.raises(ShapeError):
        L.regression_loss([1.0], [1.0, 2.0], "L1")


@pytest.mark.parametrize("norm", ["L1", "L2"])
def test_regression_gradient(norm, rng):
    pred, target = rng.normal(size=6), rng.normal(size=6)
    _, g = L.regression_loss(pred, target, norm)
    fd = central_diff(lambda: L.regression_loss(pred, target, norm)[0], pred)
    assert rel_err(g, fd) < 1e-4


# ---------------------------------------------------------------- ranking

def test_ranking_examples():
    assert L.ranking_loss([0.5], [0.0])[0] == pytest.approx(math.log(2), abs=1e-12)
    assert L.ranking_loss([0.37], [3.0])[0] == pytest.approx(-math.log(0.37), abs=1e-12)
    expected = (-math.log(0.8) - math.log(0.7)) / 2
    assert L.ranking_loss([0.8, 0.3], [2.0, -1.0])[0] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.2899, abs=1e-4)


def test_ranking_rejects_out_of_range():
    with pytest.raises(ValueError):
        L.ranking_loss([1.5], [1.0])


def test_ranking_gradient(rng):
    p = rng.uniform(0.05, 0.95, size=5)
    d = np.array([2.0, -1.0, 0.0, 4.0, -3.0])
    _, g = L.ranking_loss(p, d)
    assert rel_err(g, central_diff(lambda: L.ranking_loss(p, d)[0], p)) < 1e-4


@given(st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6))
def test_rank_target_complement(d):
    assert L.rank_target(d) + L.rank_target(-d) == 1.0


# --------------------------------------------------------------- identity

def test_identity_examples():
    assert L.identity_loss([4.0], [-4.0], [0.0], [0.9], [0.1])[0] == pytest.approx(0.0, abs=1e-15)
    assert L.identity_loss([0.0], [0.0], [1.0], [0.5], [0.5])[0] == 1.0
    assert L.identity_loss([2.0], [-1.0], [0.5], [0.7], [0.6])[0] == pytest.approx(1.8, abs=1e-12)


def test_identity_gradient(rng):
    args = [rng.normal(size=4) for _ in range(3)] + [rng.uniform(0.1, 0.9, size=4) for _ in range(2)]
    names = ["f1_ab", "f1_ba", "f1_aa", "f2_ab", "f2_ba"]
    _, grads = L.identity_loss(*args)
    for name, a in zip(names, args):
        fd = central_diff(lambda: L.identity_loss(*args)[0], a)
        assert rel_err(grads[name], fd) < 1e-4


@given(arrays(np.float64, 3, elements=st.floats(-5, 5)), arrays(np.float64, 3, elements=st.floats(0.01, 0.99)))
def test_identity_zero_iff_residuals_zero(a, p):
    # antisymmetric construction: every residual vanishes
    v, _ = L.identity_loss(a, -a, np.zeros(3), p, 1.0 - p)
    assert v == pytest.approx(0.0, abs=1e-12)
    v, _ = L.identity_loss(a, -a, np.array([0.0, 0.2, 0.0]), p, 1.0 - p)
    assert v > 0


# -------------------------------------------------------------------- MMD

def test_mmd_identical_samples_zero(rng):
    s = rng.normal(size=(5, 3))
    assert L.mmd_loss(s, s.copy(), L.KernelConfig(1.3))[0] == pytest.approx(0.0, abs=1e-12)


def test_mmd_single_points():
    v, _ = L.mmd_loss([[0.0]], [[1.0]], L.KernelConfig(1.0))
    assert v == pytest.approx(2 - 2 * math.exp(-0.5), abs=1e-12)
    assert v == pytest.approx(0.7869, abs=1e-4)


@pytest.mark.parametrize("case", range(10))
def test_mmd_matches_brute_force(case):
    rng = np.random.default_rng(case)
    n, m, d = (int(v) for v in rng.integers(1, 6, size=3))
    s, t = rng.normal(size=(n, d)), rng.normal(1.0, 1.5, size=(m, d))
    bw = float(rng.uniform(0.5, 2.0))
    assert L.mmd_loss(s, t, L.KernelConfig(bw))[0] == pytest.approx(brute_mmd(s, t, bw), abs=1e-10)


def test_mmd_gradient(rng):
    s, t = rng.normal(size=(4, 3)), rng.normal(0.5, 1.0, size=(3, 3))
    k = L.KernelConfig(1.1)
    _, (gs, gt) = L.mmd_loss(s, t, k)
    assert rel_err(gs, central_diff(lambda: L.mmd_loss(s, t, k)[0], s)) < 1e-4
    assert rel_err(gt, central_diff(lambda: L.mmd_loss(s, t, k)[0], t)) < 1e-4


def test_median_bandwidth_and_fallback():
    x = np.array([[0.0], [1.0], [3.0]])
    assert L.median_bandwidth(x) == 2.0
    assert L.median_bandwidth(np.zeros((4, 2))) == 1.0
    # zero-variance pooled batch uses the fallback instead of failing
    v, _ = L.mmd_loss(np.zeros((2, 2)), np.zeros((3, 2)))
    assert v == pytest.approx(0.0, abs=1e-12)


def test_mmd_errors():
    with pytest.raises(ShapeError):
        L.mmd_loss(np.zeros((0, 2)), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        L.mmd_loss(np.zeros((2, 2)), np.zeros((2, 3)))


sample = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 3)),
                elements=st.floats(-3, 3))


@settings(max_examples=60)
@given(sample, st.data())
def test_mmd_symmetric_and_nonnegative(s, data):
    t = data.draw(arrays(np.float64, (data.draw(st.integers(1, 5)), s.shape[1]), elements=st.floats(-3, 3)))
    k = L.KernelConfig(0.9)
    a, _ = L.mmd_loss(s, t, k)
    b, _ = L.mmd_loss(t, s, k)
    assert a >= 0
    assert a == pytest.approx(b, abs=1e-12)


# --------------------------------------------------------------- smoothing

def test_smoothing_constant_predictions(rng):
    assert L.smoothing_loss(rng.normal(size=(5, 2)), np.full(5, 3.3), 1.0)[0] == pytest.approx(0.0, abs=1e-12)


def test_smoothing_duplicate_pair():
    v, _ = L.smoothing_loss([[1.0, 2.0], [1.0, 2.0]], [0.0, 2.0], 0.7)
    assert v == pytest.approx(4.0, abs=1e-12)


@pytest.mark.parametrize("case", range(5))
def test_smoothing_equals_quadratic_form(case):
    rng = np.random.default_rng(100 + case)
    x, f = rng.normal(size=(4, 3)), rng.normal(size=4)
    assert L.smoothing_loss(x, f, 1.2)[0] == pytest.approx(explicit_laplacian_form(x, f, 1.2), abs=1e-9)


def test_smoothing_gradient(rng):
    x, f = rng.normal(size=(6, 2)), rng.normal(size=6)
    _, g = L.smoothing_loss(x, f, 0.8)
    assert rel_err(g, central_diff(lambda: L.smoothing_loss(x, f, 0.8)[0], f)) < 1e-4


def test_smoothing_errors():
    with pytest.raises(ValueError):
        L.smoothing_loss([[0.0]], [1.0], 0.0)
    with pytest.raises(ShapeError):
        L.smoothing_loss([[0.0], [1.0]], [1.0], 1.0)


@settings(max_examples=60)
@given(st.integers(1, 16), st.floats(-50, 50), st.integers(0, 2**31 - 1))
def test_smoothing_shift_invariant(n, c, seed):
    rng = np.random.default_rng(seed)
    x, f = rng.normal(size=(n, 3)), rng.normal(size=n)
    a = L.smoothing_loss(x, f, 1.0)[0]
    assert L.smoothing_loss(x, f + c, 1.0)[0] == pytest.approx(a, abs=1e-9)
    assert a == pytest.approx(explicit_laplacian_form(x, f, 1.0), abs=1e-9)


# --------------------------------------------------------------- composite

def test_composite_all_zero_weights():
    cfg = L.CompositeLossConfig(alpha=0, beta=0, gamma=0, sigma_smooth=0)
    total, terms, _ = L.composite_loss(L.LossInputs(pred=[1.0, 2.0], target=[1.0, 2.0]), cfg)
    assert total == 0.0


def test_composite_single_term_passthrough():
    cfg = L.CompositeLossConfig(alpha=0, beta=0, gamma=1.0, sigma_smooth=0, adaptation="adversarial")
    total, _, _ = L.composite_loss(L.LossInputs(adapt_value=0.4321), cfg)
    assert total == 0.4321


def test_composite_weighted_sum(rng):
    cfg = L.CompositeLossConfig(alpha=0.3, beta=0.1, gamma=0.1, sigma_smooth=0.01,
                                adaptation="mmd", kernel=L.KernelConfig(1.0))
    pred, target = rng.normal(size=4), rng.normal(size=4)
    rank_p, diff = rng.uniform(0.1, 0.9, size=4), rng.normal(size=4)
    s, t = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    ident = dict(f1_ab=rng.normal(size=4), f1_ba=rng.normal(size=4), f1_aa=rng.normal(size=4),
                 f2_ab=rng.uniform(0.1, 0.9, 4), f2_ba=rng.uniform(0.1, 0.9, 4))
    feats, preds = rng.normal(size=(5, 2)), rng.normal(size=5)
    inputs = L.LossInputs(pred=pred, target=target, rank_pred=rank_p, rank_diff=diff,
                          mmd_pairs=[(s, t)], identity=[ident], smooth_feats=feats, smooth_preds=preds)
    total, terms, _ = L.composite_loss(inputs, cfg)
    reg = np.abs(pred - target).mean()
    rank = np.mean([-math.log(p) if d > 0 else -math.log(1 - p) for p, d in zip(rank_p, diff)])
    mmd = brute_mmd(s, t, 1.0)
    idv = np.mean(np.abs(ident["f1_aa"]) + np.abs(ident["f1_ab"] + ident["f1_ba"])
                  + np.abs(ident["f2_ab"] + ident["f2_ba"] - 1))
    sm = explicit_laplacian_form(feats, preds, 1.0)
    # the median kernel is not used: bandwidth pinned to 1.0 for both terms
    assert total == pytest.approx(reg + 0.3 * rank + 0.1 * mmd + 0.1 * idv + 0.01 * sm, abs=1e-12)
    assert set(terms) == {"reg", "rank", "adapt", "id", "smooth"}


def test_composite_missing_input():
    cfg = L.CompositeLossConfig(gamma=0.5, adaptation="adversarial")
    with pytest.raises(L.MissingLossInput):
        L.composite_loss(L.LossInputs(pred=[0.0], target=[0.0]), cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        L.CompositeLossConfig(alpha=-1)
    with pytest.raises(ValueError):
        L.CompositeLossConfig(regression_norm="L3")
    with pytest.raises(ValueError):
        L.KernelConfig(0.0)
