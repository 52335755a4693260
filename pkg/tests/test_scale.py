"""Scale alignment: weighted median seed, IRLS fit, gating."""

import numpy as np
import pytest

from dslam.errors import EstimateFailed, InsufficientSamples
from dslam.scale import (
    align_depth_raster,
    estimate_scale,
    estimate_scale_irls,
    gate_scale_samples,
    weighted_median,
)

from oracles import grid_scale_oracle


def test_weighted_median_hand_case():
    assert weighted_median([1.0, 2.0, 3.0], [0.2, 0.2, 0.6]) == 3.0


def test_weighted_median_uniform_is_lower_median():
    assert weighted_median([4.0, 1.0, 3.0, 2.0], np.ones(4)) == 2.0


def test_weighted_median_ignores_zero_weights():
    assert weighted_median([10.0, 1.0], [0.0, 1.0]) == 1.0
    with pytest.raises(InsufficientSamples):
        weighted_median([1.0], [0.0])


def make_problem(rng, s_true, n=200, outlier_frac=0.3, sigma_rel=0.05):
    """Inverse-depth pairs with confidence-correlated corruption.

    The prior side is corrupted multiplicatively; gross outliers are off by
    3x to 30x either way. Confidence follows the same reliability model the
    synthetic provider uses, so badly corrupted samples carry little weight
    (with jitter, to keep the correlation imperfect).
    """
    depth = rng.uniform(1.0, 8.0, n)
    d = 1.0 / depth
    factor = np.exp(sigma_rel * rng.standard_normal(n))
    out = rng.random(n) < outlier_frac
    gross = np.exp(rng.uniform(np.log(3.0), np.log(30.0), n))
    flip = rng.random(n) < 0.5
    factor = np.where(out, np.where(flip, gross, 1.0 / gross), factor)
    d_hat = d / s_true * factor
    conf = 1.0 / (0.01 + np.abs(factor - 1.0))
    conf *= np.exp(0.3 * rng.standard_normal(n))
    return d, d_hat, conf


def test_irls_exact_data():
    rng = np.random.default_rng(0)
    d = 1.0 / rng.uniform(1.0, 10.0, 50)
    s_true = 3.7
    est = estimate_scale_irls(d, d / s_true, rng.uniform(0.5, 2.0, 50))
    assert est.converged
    assert est.s == pytest.approx(s_true, rel=1e-12)


def test_irls_recovers_scale_with_outliers():
    for seed in range(8):
        rng = np.random.default_rng(100 + seed)
        s_true = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
        d, d_hat, conf = make_problem(rng, s_true)
        est = estimate_scale_irls(d, d_hat, conf)
        assert est.converged
        assert abs(est.s - s_true) / s_true < 0.01


def test_irls_agrees_with_grid_oracle():
    for seed in range(6):
        rng = np.random.default_rng(200 + seed)
        s_true = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
        d, d_hat, conf = make_problem(rng, s_true)
        est = estimate_scale_irls(d, d_hat, conf)
        ref = grid_scale_oracle(d, d_hat, conf)
        assert abs(est.s - ref) / ref < 1e-3


def test_prior_rescaling_equivariance():
    # Multiplying the prior inverse depths by gamma must divide the
    # estimate by gamma, exactly: the fit residuals are unchanged.
    rng = np.random.default_rng(42)
    d, d_hat, conf = make_problem(rng, 2.5)
    base = estimate_scale_irls(d, d_hat, conf)
    for gamma in (0.25, 3.0, 17.0):
        scaled = estimate_scale_irls(d, gamma * d_hat, conf)
        assert scaled.s == pytest.approx(base.s / gamma, rel=1e-9)


def test_gate_excludes_uncertain_samples():
    rng = np.random.default_rng(7)
    d, d_hat, conf = make_problem(rng, 2.0, n=100, outlier_frac=0.0)
    # Poison half the samples and mark exactly those as uncertain.
    rel = np.full(100, 0.01)
    d_hat[:50] *= 40.0
    rel[:50] = 0.9
    keep = gate_scale_samples(d, d_hat, conf, rel, t_sigma=0.5)
    assert keep.sum() == 50
    est = estimate_scale(d, d_hat, conf, rel, t_sigma=0.5)
    assert est.n_used == 50
    assert abs(est.s - 2.0) / 2.0 < 0.01


def test_gate_requires_positive_finite_inputs():
    d = np.array([0.5, -1.0, np.nan, 0.25, 0.4])
    dh = np.array([0.5, 0.5, 0.5, 0.0, 0.4])
    c = np.array([1.0, 1.0, 1.0, 1.0, 0.0])
    keep = gate_scale_samples(d, dh, c, min_samples=1)
    assert list(keep) == [True, False, False, False, False]


def test_insufficient_samples():
    with pytest.raises(InsufficientSamples):
        gate_scale_samples(np.ones(5), np.ones(5), np.ones(5),
                           min_samples=10)


def test_estimate_failed_on_negative_data():
    d = -np.ones(20)
    dh = np.ones(20)
    with pytest.raises(EstimateFailed):
        estimate_scale_irls(d, dh, np.ones(20))


def test_align_depth_raster():
    depth = np.array([[2.0, 0.0], [4.0, -1.0]], dtype=np.float32)
    out = align_depth_raster(depth, 2.0)
    assert out[0, 0] == 1.0
    assert out[1, 0] == 2.0
    assert out[0, 1] == 0.0
    assert out[1, 1] == -1.0
