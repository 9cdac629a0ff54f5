"""Likelihood-ratio tests for QTL presence, imprinting and maternal effects.

The overall QTL test sets the three QTL variances to zero at once. Those
parameters sit on the boundary under the null, so the statistic is referred to
a chi-bar-square mixture ``w3 chi2_3 : w2 chi2_2 : w1 chi2_1 : w0 chi2_0``
whose weights come from the correlations of the three variance estimators.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .vcmodel import ModelFit

log = logging.getLogger(__name__)

LR_CLAMP = 1e-8
RHO_CLIP = 1.0 - 1e-8
QTL_PARAMS = ("m", "f", "mf")


class DegenerateCorrelation(ValueError):
    pass


@dataclass(frozen=True)
class MixtureWeights:
    w0: float
    w1: float
    w2: float
    w3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w0, self.w1, self.w2, self.w3])


BINOMIAL_WEIGHTS = MixtureWeights(1 / 8, 3 / 8, 3 / 8, 1 / 8)


@dataclass
class TestResult:
    statistic: float
    p_value: float
    null_kind: str  # mixture3 | chisq1 | half-half | fixed-effects
    weights: Optional[MixtureWeights] = None
    df: Optional[int] = None
    reliable: bool = True
    boundary_flag: bool = False
    fit_full: Optional[ModelFit] = None
    fit_null: Optional[ModelFit] = None

    __test__ = False  # not a pytest class


def _partial(r_ab: float, r_ac: float, r_bc: float) -> float:
    den2 = (1 - r_ac ** 2) * (1 - r_bc ** 2)
    if den2 <= 0:
        raise DegenerateCorrelation("partial correlation undefined: a conditioning correlation is +-1")
    return (r_ab - r_ac * r_bc) / math.sqrt(den2)


def mixture_weights(corr: np.ndarray) -> MixtureWeights:
    """Mixture proportions from the 3x3 correlation matrix of the estimators."""
    corr = np.asarray(corr, dtype=float)
    if corr.shape != (3, 3):
        raise ValueError("correlation matrix must be 3x3")
    r12, r13, r23 = corr[0, 1], corr[0, 2], corr[1, 2]
    if max(abs(r12), abs(r13), abs(r23)) > 1 + 1e-12:
        raise ValueError("correlations must lie in [-1, 1]")
    acos = lambda r: math.acos(min(max(r, -1.0), 1.0))
    s_marg = acos(r12) + acos(r13) + acos(r23)
    s_part = (acos(_partial(r12, r13, r23))
              + acos(_partial(r13, r12, r23))
              + acos(_partial(r23, r12, r13)))
    w3 = (2 * math.pi - s_marg) / (4 * math.pi)
    w2 = (3 * math.pi - s_part) / (4 * math.pi)
    w1 = s_marg / (4 * math.pi)
    w0 = 0.5 - w2
    return MixtureWeights(w0, w1, w2, w3)


def mixture_pvalue(lr: float, w: MixtureWeights) -> float:
    if lr < 0:
        raise ValueError("LR statistic must be non-negative")
    if lr == 0:
        return 1.0
    p = sum(wk * stats.chi2.sf(lr, k) for k, wk in ((1, w.w1), (2, w.w2), (3, w.w3)))
    return float(min(max(p, 0.0), 1.0))


def mixture_critical_value(alpha: float, w: MixtureWeights) -> float:
    from scipy.optimize import brentq

    return float(brentq(lambda x: mixture_pvalue(x, w) - alpha, 1e-12, 200.0, xtol=1e-12))


def estimator_correlations(fit: ModelFit, params: Sequence[str] = QTL_PARAMS) -> np.ndarray:
    """Correlations of the named estimators from the inverse Fisher information."""
    info = fit.fisher_info
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
    idx = [fit.param_names.index(p) for p in params]
    sub = cov[np.ix_(idx, idx)]
    sd = np.sqrt(np.diag(sub))
    if not np.all(np.isfinite(sd)) or np.any(sd <= 0):
        return np.eye(len(idx))
    corr = sub / np.outer(sd, sd)
    corr = np.clip(corr, -RHO_CLIP, RHO_CLIP)
    np.fill_diagonal(corr, 1.0)
    return corr


def lr_statistic(fit_full: ModelFit, fit_null: ModelFit, use_ml: bool = False) -> float:
    if use_ml:
        lr = -2.0 * (fit_null.ml_loglik - fit_full.ml_loglik)
    else:
        lr = -2.0 * (fit_null.reml_loglik - fit_full.reml_loglik)
    if lr < 0:
        if lr < -LR_CLAMP and fit_full.converged and fit_null.converged and not use_ml:
            log.debug("negative LR %.3g clamped to 0", lr)
        lr = 0.0
    return float(lr)


def _reliable(*fits: ModelFit) -> bool:
    return all(f.converged for f in fits)


def qtl_test(fit_full: ModelFit, fit_null: ModelFit) -> TestResult:
    lr = lr_statistic(fit_full, fit_null)
    ok = _reliable(fit_full, fit_null)
    w = mixture_weights(estimator_correlations(fit_full)) if ok else None
    p = mixture_pvalue(lr, w) if ok else math.nan
    return TestResult(lr, p, "mixture3", weights=w, reliable=ok, fit_full=fit_full, fit_null=fit_null)


def imprinting_test(fit_full: ModelFit, fit_equal: ModelFit) -> TestResult:
    """H0: sigma_m2 = sigma_f2, referred to chi2 with one degree of freedom."""
    lr = lr_statistic(fit_full, fit_equal)
    ok = _reliable(fit_full, fit_equal)
    p = float(stats.chi2.sf(lr, 1)) if lr > 0 else 1.0
    near_boundary = fit_full.param("m") <= 0 and fit_full.param("f") <= 0
    return TestResult(lr, p if ok else math.nan, "chisq1", df=1, reliable=ok,
                      boundary_flag=near_boundary, fit_full=fit_full, fit_null=fit_equal)


def half_half_pvalue(lr: float) -> float:
    if lr <= 0:
        return 1.0
    return float(0.5 * stats.chi2.sf(lr, 1))


def complete_imprinting_test(fit_full: ModelFit, fit_null: ModelFit, which: str) -> TestResult:
    """H0: sigma_m2 = 0 (`which="maternal"`) or sigma_f2 = 0 (`which="paternal"`)."""
    expected = {"maternal": "no_maternal", "paternal": "no_paternal"}
    if which not in expected:
        raise ValueError("which must be 'maternal' or 'paternal'")
    if fit_null.model not in (expected[which], "custom"):
        raise ValueError(f"null fit for the {which} test must be model {expected[which]!r}")
    lr = lr_statistic(fit_full, fit_null)
    ok = _reliable(fit_full, fit_null)
    return TestResult(lr, half_half_pvalue(lr) if ok else math.nan, "half-half",
                      weights=MixtureWeights(0.5, 0.5, 0.0, 0.0), reliable=ok,
                      fit_full=fit_full, fit_null=fit_null)


def maternal_effect_test(fit_full: ModelFit, fit_equal_means: ModelFit) -> TestResult:
    """H0: mu1 = mu2 = mu3, df = number of observed maternal classes - 1.

    REML likelihoods are not comparable across different mean structures, so
    the statistic uses the Gaussian likelihood with the GLS means at each
    fit's REML variance estimates.
    """
    df = fit_full.n_classes - 1
    if df < 1:
        raise ValueError("maternal-effect test needs at least two observed maternal classes")
    lr = lr_statistic(fit_full, fit_equal_means, use_ml=True)
    ok = _reliable(fit_full, fit_equal_means)
    p = float(stats.chi2.sf(lr, df)) if lr > 0 else 1.0
    return TestResult(lr, p if ok else math.nan, "fixed-effects", df=df, reliable=ok,
                      fit_full=fit_full, fit_null=fit_equal_means)


def pairwise_mean_differences(fit: ModelFit) -> Dict[str, float]:
    mu = fit.beta.as_array()
    names = ("mu1", "mu2", "mu3")
    out = {}
    for i in range(3):
        for j in range(i + 1, 3):
            out[f"{names[i]}-{names[j]}"] = float(mu[i] - mu[j])
    return out


def order_statistic_index(n: int, alpha: float) -> int:
    """1-based index ceil((1 - alpha) n) of the threshold order statistic."""
    k = math.ceil((1.0 - alpha) * n - 1e-9)
    return min(max(k, 1), n)


def empirical_threshold(sample: Sequence[float], alpha: float) -> float:
    s = np.sort(np.asarray(sample, dtype=float))
    return float(s[order_statistic_index(len(s), alpha) - 1])


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for replicate `index`, fixed by (seed, index) alone."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def permute_within_families(y_blocks: Sequence[np.ndarray], rng: np.random.Generator):
    return [rng.permutation(y) for y in y_blocks]


@dataclass
class Thresholds:
    alpha: float
    n_perm: int
    seed: int
    genome: float
    per_chromosome: Dict[str, float]
    max_genome: np.ndarray
    max_per_chromosome: Dict[str, np.ndarray]


def permutation_threshold(y_blocks: Sequence[np.ndarray], scan_fn: Callable[[Sequence[np.ndarray]], Dict[str, float]],
                          n_perm: int, alpha: float, seed: int, workers: int = 1) -> Thresholds:
    """Permutation thresholds for the maximum LR, genome-wide and per chromosome.

    `scan_fn` maps permuted per-family phenotypes to {chromosome: max LR}.
    Replicate ``i`` permutes with the stream ``replicate_rng(seed, i)``, so the
    result does not depend on `workers`.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be at least 1")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if n_perm * alpha < 1:
        warnings.warn(f"n_perm * alpha = {n_perm * alpha:g} < 1: the threshold quantile is poorly resolved")
    jobs = [(y_blocks, scan_fn, seed, i) for i in range(n_perm)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_perm_job, jobs, chunksize=max(1, n_perm // (4 * workers))))
    else:
        results = [_perm_job(j) for j in jobs]
    chroms = list(results[0].keys())
    per = {c: np.array([r[c] for r in results]) for c in chroms}
    genome = np.array([max(r.values()) for r in results])
    return Thresholds(alpha, n_perm, seed, empirical_threshold(genome, alpha),
                      {c: empirical_threshold(v, alpha) for c, v in per.items()}, genome, per)


def _perm_job(job) -> Dict[str, float]:
    y_blocks, scan_fn, seed, i = job
    rng = replicate_rng(seed, i)
    return scan_fn(permute_within_families(y_blocks, rng))
