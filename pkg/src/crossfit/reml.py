"""Restricted maximum likelihood via the adjusted score.

The REML objective replaces the profile log-likelihood with

    l_R(theta) = l(xi_gls(theta), theta) - (1/2) log det X'V^{-1}X.

Its gradient in the variance components equals the ML variance score plus
one half-trace per random-effect source,

    t_s = (1/2) tr{ (X'V^{-1}X)^{-1} X'V^{-1} Z_s Z_s' V^{-1} X },

which is what removes the downward degrees-of-freedom bias of ML (in the
one-sample special case the correction turns 1/n into 1/(n-1)).  The
slope blocks of the score are untouched.

Each Z_s Z_s' decomposes over the same eigenprojections as V, so the
traces reduce to the cached Gram blocks:

    t_alpha = (hm/2) [ tr(M^{-1}G_2)/lam2^2 + tr(M^{-1}G_4)/lam4^2 ]
    t_beta  = (gm/2) [ tr(M^{-1}G_3)/lam3^2 + tr(M^{-1}G_4)/lam4^2 ]
    t_gamma = (m/2)  [ tr(M^{-1}G_1)/lam1^2 + ... + tr(M^{-1}G_4)/lam4^2 ]
    t_e     = (1/2)  [ tr(M^{-1}G_0)/lam0^2 + ... + tr(M^{-1}G_4)/lam4^2 ]
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from . import covariance
from .covariance import VarianceComponents
from .design import SuffStats
from .errors import SingularDesign
from .estimate import (
    FitOptions,
    FitResult,
    ParamVector,
    ScoreVector,
    _fit,
    gram_blocks,
    loglik,
    score,
)


@dataclass(frozen=True)
class AdjustmentTraces:
    """Half-traces of the REML score adjustment, one per source."""

    t_alpha: float
    t_beta: float
    t_gamma: float
    t_e: float

    def as_array(self) -> np.ndarray:
        return np.array([self.t_alpha, self.t_beta, self.t_gamma, self.t_e])


def adjustment_traces(theta: VarianceComponents, stats: SuffStats) -> AdjustmentTraces:
    """Compute the four half-traces at the given variance components."""
    d = stats.design
    lams = covariance.lambdas_from(theta, d)
    l0, l1, l2, l3, l4 = lams.values
    gs, _ = gram_blocks(stats)
    mmat = sum(gmat / lam for gmat, lam in zip(gs, lams.values))
    try:
        cf = scipy.linalg.cho_factor(mmat, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise SingularDesign(f"normal equations not positive definite: {exc}") from exc
    tr = [float(np.trace(scipy.linalg.cho_solve(cf, gmat))) for gmat in gs]
    g, h, m = d.g, d.h, d.m
    return AdjustmentTraces(
        t_alpha=0.5 * h * m * (tr[2] / l2**2 + tr[4] / l4**2),
        t_beta=0.5 * g * m * (tr[3] / l3**2 + tr[4] / l4**2),
        t_gamma=0.5 * m * (tr[1] / l1**2 + tr[2] / l2**2 + tr[3] / l3**2 + tr[4] / l4**2),
        t_e=0.5 * (tr[0] / l0**2 + tr[1] / l1**2 + tr[2] / l2**2
                   + tr[3] / l3**2 + tr[4] / l4**2),
    )


def reml_score(params: ParamVector, stats: SuffStats) -> ScoreVector:
    """Adjusted score: ML score with +t_s added to each variance entry."""
    base = score(params, stats)
    t = adjustment_traces(params.theta, stats)
    return replace(
        base,
        l_sa2=base.l_sa2 + t.t_alpha,
        l_sb2=base.l_sb2 + t.t_beta,
        l_sg2=base.l_sg2 + t.t_gamma,
        l_se2=base.l_se2 + t.t_e,
    )


def _logdet_normal(theta: VarianceComponents, stats: SuffStats) -> float:
    lams = covariance.lambdas_from(theta, stats.design)
    gs, _ = gram_blocks(stats)
    mmat = sum(gmat / lam for gmat, lam in zip(gs, lams.values))
    sign, ld = np.linalg.slogdet(mmat)
    if sign <= 0:
        raise SingularDesign("normal equations not positive definite")
    return float(ld)


def reml_criterion(params: ParamVector, stats: SuffStats) -> float:
    """The REML objective l - (1/2) log det X'V^{-1}X at params."""
    return loglik(params, stats) - 0.5 * _logdet_normal(params.theta, stats)


def fit_reml(stats: SuffStats, options: FitOptions | None = None) -> FitResult:
    """REML fit: same damped Newton machinery as fit_ml on the adjusted score.

    Step acceptance is judged on the REML criterion, which the adjusted
    score is the exact variance-gradient of, so the recorded criterion
    trace is non-decreasing.
    """
    options = options or FitOptions()
    return _fit(stats, options, "reml", reml_score, reml_criterion)
