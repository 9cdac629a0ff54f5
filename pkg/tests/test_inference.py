import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.optimize import nnls

from endoqtl import inference
from endoqtl.inference import (
    BINOMIAL_WEIGHTS,
    MixtureWeights,
    empirical_threshold,
    half_half_pvalue,
    mixture_critical_value,
    mixture_pvalue,
    mixture_weights,
    order_statistic_index,
    permutation_threshold,
    permute_within_families,
    replicate_rng,
)


def random_corr(rng, dim=3):
    A = rng.normal(size=(dim, dim + int(rng.integers(0, 4))))
    S = A @ A.T + 1e-3 * np.eye(dim)
    d = np.sqrt(np.diag(S))
    return S / np.outer(d, d)


def chibar_weights_mc(corr, n=40_000, seed=0):
    """Weights as frequencies of k positive coordinates after projecting onto the orthant."""
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(corr)
    Linv = np.linalg.inv(L)
    z = rng.normal(size=(n, 3)) @ L.T
    counts = np.zeros(4)
    for v in z:
        x, _ = nnls(Linv, Linv @ v)
        counts[int((x > 1e-10).sum())] += 1
    return counts / n


def test_binomial_special_case():
    w = mixture_weights(np.eye(3))
    assert w.as_array() == pytest.approx([1 / 8, 3 / 8, 3 / 8, 1 / 8], abs=1e-15)
    assert BINOMIAL_WEIGHTS.as_array() == pytest.approx(w.as_array(), abs=1e-15)


@settings(max_examples=300)
@given(st.integers(0, 2**31))
def test_weight_identities(seed):
    w = mixture_weights(random_corr(np.random.default_rng(seed)))
    assert w.w3 + w.w1 == pytest.approx(0.5, abs=1e-12)
    assert w.w2 + w.w0 == pytest.approx(0.5, abs=1e-12)
    assert min(w.as_array()) >= -1e-12


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_weights_match_projection_oracle(seed):
    corr = random_corr(np.random.default_rng(seed))
    mc = chibar_weights_mc(corr, seed=seed)
    w = mixture_weights(corr).as_array()
    # binomial standard error at n = 40000 is at most 0.0025
    assert np.abs(mc - w).max() < 0.012


def test_mixture_weights_rejects_bad_input():
    with pytest.raises(ValueError):
        mixture_weights(np.eye(2))
    bad = np.eye(3)
    bad[0, 1] = bad[1, 0] = 1.5
    with pytest.raises(ValueError):
        mixture_weights(bad)


def test_mixture_pvalue():
    w = MixtureWeights(0.2, 0.3, 0.3, 0.2)
    assert mixture_pvalue(0.0, w) == 1.0
    x = 4.2
    expected = 0.3 * stats.chi2.sf(x, 1) + 0.3 * stats.chi2.sf(x, 2) + 0.2 * stats.chi2.sf(x, 3)
    assert mixture_pvalue(x, w) == pytest.approx(expected, rel=1e-14)
    with pytest.raises(ValueError):
        mixture_pvalue(-1.0, w)


@given(st.floats(1e-4, 0.4))
def test_critical_value_inverts_pvalue(alpha):
    c = mixture_critical_value(alpha, BINOMIAL_WEIGHTS)
    assert mixture_pvalue(c, BINOMIAL_WEIGHTS) == pytest.approx(alpha, rel=1e-8)


def test_half_half():
    assert half_half_pvalue(0.0) == 1.0
    assert half_half_pvalue(2.705543454095404) == pytest.approx(0.05, rel=1e-9)


@pytest.mark.parametrize("n, alpha, k", [(100, 0.05, 95), (20, 0.05, 19), (1000, 0.05, 950),
                                         (20, 0.5, 10), (10, 0.01, 10), (19, 0.05, 19), (1, 0.05, 1)])
def test_order_statistic_index(n, alpha, k):
    assert order_statistic_index(n, alpha) == k


def test_empirical_threshold_hand_checked():
    sample = np.arange(20, 0, -1).astype(float)  # 20 .. 1, unsorted order
    assert empirical_threshold(sample, 0.05) == 19.0
    assert empirical_threshold(sample, 0.10) == 18.0


def test_replicate_streams_depend_only_on_seed_and_index():
    a = replicate_rng(7, 3).normal(size=4)
    b = replicate_rng(7, 3).normal(size=4)
    c = replicate_rng(7, 4).normal(size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_permute_within_families_keeps_family_values():
    blocks = [np.arange(5.0), np.arange(10.0, 13.0)]
    out = permute_within_families(blocks, np.random.default_rng(0))
    for a, b in zip(blocks, out):
        assert sorted(a) == sorted(b)


def _toy_scan(y_blocks):
    # LR stand-in that depends on the order of the values within families
    a = sum(float(y[0]) for y in y_blocks)
    b = sum(float(y[-1] * (i + 1)) for i, y in enumerate(y_blocks))
    return {"1": abs(a), "2": abs(b)}


def test_permutation_threshold_matches_order_statistic():
    rng = np.random.default_rng(1)
    blocks = [rng.normal(size=4) for _ in range(6)]
    th = permutation_threshold(blocks, _toy_scan, n_perm=20, alpha=0.05, seed=5)
    maxima = [max(_toy_scan(permute_within_families(blocks, replicate_rng(5, i))).values()) for i in range(20)]
    assert th.genome == sorted(maxima)[18]
    assert th.max_genome.tolist() == maxima


def test_permutation_threshold_worker_invariant():
    rng = np.random.default_rng(2)
    blocks = [rng.normal(size=5) for _ in range(4)]
    one = permutation_threshold(blocks, _toy_scan, 40, 0.05, 9, workers=1)
    two = permutation_threshold(blocks, _toy_scan, 40, 0.05, 9, workers=3)
    assert one.genome == two.genome
    assert one.per_chromosome == two.per_chromosome
    assert np.array_equal(one.max_genome, two.max_genome)


def test_permutation_threshold_warns_on_coarse_quantile():
    with pytest.warns(UserWarning, match="poorly resolved"):
        permutation_threshold([np.arange(3.0)], _toy_scan, 10, 0.05, 0)


def test_permutation_threshold_validates():
    with pytest.raises(ValueError):
        permutation_threshold([np.arange(3.0)], _toy_scan, 0, 0.05, 0)
    with pytest.raises(ValueError):
        permutation_threshold([np.arange(3.0)], _toy_scan, 10, 1.5, 0)


class _Fit:
    def __init__(self, reml, ml=0.0, converged=True, info=None, names=("m", "f", "mf", "g", "e"), theta=None):
        self.reml_loglik = reml
        self.ml_loglik = ml
        self.converged = converged
        self.fisher_info = np.eye(len(names)) if info is None else info
        self.param_names = names
        self.theta = np.ones(len(names)) if theta is None else theta
        self.model = "full"
        self.n_classes = 3

    def param(self, name):
        return float(self.theta[self.param_names.index(name)])


def test_lr_statistic_clamps_at_zero():
    assert inference.lr_statistic(_Fit(-10.0), _Fit(-10.0 + 1e-10)) == 0.0
    assert inference.lr_statistic(_Fit(-10.0), _Fit(-12.0)) == pytest.approx(4.0)


def test_qtl_test_uses_fitted_information():
    res = inference.qtl_test(_Fit(-10.0), _Fit(-12.0))
    assert res.weights.as_array() == pytest.approx(BINOMIAL_WEIGHTS.as_array())
    assert res.p_value == pytest.approx(mixture_pvalue(4.0, BINOMIAL_WEIGHTS))
    unreliable = inference.qtl_test(_Fit(-10.0, converged=False), _Fit(-12.0))
    assert not unreliable.reliable and math.isnan(unreliable.p_value)


def test_estimator_correlations_from_inverse_information():
    info = np.array([[2.0, 1.0, 0, 0, 0], [1.0, 2.0, 0, 0, 0], [0, 0, 1.0, 0, 0], [0, 0, 0, 1.0, 0],
                     [0, 0, 0, 0, 1.0]])
    corr = inference.estimator_correlations(_Fit(0.0, info=info))
    assert corr[0, 1] == pytest.approx(-0.5)
    assert corr[0, 2] == pytest.approx(0.0)


def test_imprinting_and_complete_tests():
    full = _Fit(-10.0)
    eq = _Fit(-11.5)
    eq.model = "equal"
    res = inference.imprinting_test(full, eq)
    assert res.p_value == pytest.approx(stats.chi2.sf(3.0, 1))
    nm = _Fit(-11.0)
    nm.model = "no_maternal"
    res = inference.complete_imprinting_test(full, nm, "maternal")
    assert res.p_value == pytest.approx(0.5 * stats.chi2.sf(2.0, 1))
    with pytest.raises(ValueError):
        inference.complete_imprinting_test(full, nm, "paternal")


def test_maternal_effect_uses_ml_likelihood():
    full = _Fit(-10.0, ml=-20.0)
    pooled = _Fit(-5.0, ml=-23.0)
    res = inference.maternal_effect_test(full, pooled)
    assert res.df == 2
    assert res.statistic == pytest.approx(6.0)
    assert res.p_value == pytest.approx(stats.chi2.sf(6.0, 2))
