"""Normality-free asymptotic inference after an ML or REML fit.

The limiting covariance of the rate-normalised estimation error is block
diagonal across the four rates.  Its entries involve only the variance
components, covariate second moments, and third/fourth moments of the
random effects, all of which are estimated by plugging residual group
contrasts into the defining expectations.  Confidence intervals for the
variance components are built on the log standard-deviation scale and
squared back, which keeps them positive and respects the asymmetry of
small-sample variance estimates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.stats

from .covariance import VarianceComponents
from .design import CovariateSet, Design
from .errors import BoundaryInference, DegenerateWidth, DimensionMismatch, SingularDesign
from .estimate import FitResult, ParamVector, k_diag, omega_names, variance_indices


@dataclass(frozen=True)
class MomentEstimates:
    """Plug-in residual-contrast moments of the random effect sources."""

    mu3_alpha: float
    mu4_alpha: float
    mu3_beta: float
    mu4_beta: float
    mu4_gamma: float
    mu4_e: float


def fit_residuals(y, covariates: CovariateSet, params: ParamVector,
                  design: Design) -> np.ndarray:
    """Raw residual grid y - xi0 - x'xi at the fitted coefficients."""
    y = np.asarray(y, dtype=float)
    if y.shape != (design.g, design.h, design.m):
        if y.size != design.n:
            raise DimensionMismatch(f"y has {y.size} values, design needs {design.n}")
        y = y.reshape(design.g, design.h, design.m)
    covariates.check_shapes(design)
    r = y - params.xi0
    if covariates.p_a:
        r = r - (covariates.row @ params.xi1)[:, None, None]
    if covariates.p_b:
        r = r - (covariates.col @ params.xi2)[None, :, None]
    if covariates.p_ab:
        r = r - (covariates.inter @ params.xi3)[:, :, None]
    if covariates.p_w:
        r = r - covariates.within @ params.xi4
    return r


def residual_moments(residuals, design: Design) -> MomentEstimates:
    """Third/fourth moments of residual group contrasts.

    Row and column contrasts estimate the moments of the row and column
    effects; doubly centered cell means those of the interaction; within
    deviations those of the measurement error.
    """
    r = np.asarray(residuals, dtype=float)
    if r.shape != (design.g, design.h, design.m):
        if r.size != design.n:
            raise DimensionMismatch(
                f"residuals have {r.size} values, design needs {design.n}"
            )
        r = r.reshape(design.g, design.h, design.m)
    cell = r.mean(axis=2)
    row = cell.mean(axis=1)
    col = cell.mean(axis=0)
    grand = row.mean()
    a_c = row - grand
    b_c = col - grand
    dc = cell - row[:, None] - col[None, :] + grand
    w = r - cell[:, :, None]
    return MomentEstimates(
        mu3_alpha=float(np.mean(a_c**3)),
        mu4_alpha=float(np.mean(a_c**4)),
        mu3_beta=float(np.mean(b_c**3)),
        mu4_beta=float(np.mean(b_c**4)),
        mu4_gamma=float(np.mean(dc**4)),
        mu4_e=float(np.mean(w**4)),
    )


@dataclass
class CovarianceEstimate:
    """Estimated limiting covariance of K^{1/2}(omega_hat - omega)."""

    f: np.ndarray          # (p+5, p+5) plug-in limit covariance
    k: np.ndarray          # (p+5,) rate diagonal
    se: np.ndarray         # (p+5,) standard errors sqrt(F_rr / K_rr); NaN if F_rr < 0
    names: list
    eta: float
    tau: float


def _second_moment_blocks(stats):
    p_a, p_b, p_ab, p_w = stats.p_a, stats.p_b, stats.p_ab, stats.p_w
    d = stats.design
    d1 = stats.sa[:p_a, :p_a] / d.g
    d2 = stats.sb[:p_b, :p_b] / d.h
    d3 = stats.sab[:p_ab, :p_ab] / (d.g * d.h)
    d4 = stats.sw[:p_w, :p_w] / d.n
    return d1, d2, d3, d4


def _inv(mat, label):
    if mat.shape[0] == 0:
        return mat.copy()
    try:
        return np.linalg.inv(mat)
    except np.linalg.LinAlgError as exc:
        raise SingularDesign(
            f"covariate second-moment matrix for the {label} block is singular"
        ) from exc


def fhat(fit: FitResult, moments: MomentEstimates, eta: float | None = None,
         on_boundary: str = "raise") -> CovarianceEstimate:
    """Plug-in estimate of the limiting covariance matrix.

    Args:
        fit: converged ML or REML fit.
        moments: residual-contrast moments from residual_moments.
        eta: row/column ratio; defaults to the design's g/h.
        on_boundary: "raise" (default) refuses fits with a variance at the
            floor, where the limit theory does not apply; "ignore" builds
            the matrix mechanically anyway (used by the simulation driver
            so one pinned component does not void every other row).

    Raises:
        BoundaryInference when on_boundary="raise" and fit.boundary is
        non-empty.
    """
    if fit.boundary and on_boundary == "raise":
        raise BoundaryInference(
            f"variance components {fit.boundary} at the floor; "
            "limiting covariance not valid on the boundary"
        )
    stats = fit.stats
    d = stats.design
    if eta is None:
        eta = d.eta
    t = fit.params.theta
    s_a, s_b, s_g, s_e = t.sigma_a2, t.sigma_b2, t.sigma_g2, t.sigma_e2
    tau = s_a + eta * s_b
    p_a, p_b, p_ab, p_w = stats.p_a, stats.p_b, stats.p_ab, stats.p_w

    d1, d2, d3, d4 = _second_moment_blocks(stats)
    d1i = _inv(d1, "row")
    d2i = _inv(d2, "column")
    d3i = _inv(d3, "interaction")
    d4i = _inv(d4, "within")
    xa, xb = stats.xbar_a, stats.xbar_b

    f1 = tau
    if p_a:
        f1 += s_a * float(xa @ d1i @ xa)
    if p_b:
        f1 += eta * s_b * float(xb @ d2i @ xb)
    f2 = d1i @ xa if p_a else np.zeros(0)   # x̄_a' D1^{-1}
    f3 = d2i @ xb if p_b else np.zeros(0)   # x̄_b' D2^{-1}

    dim = stats.p + 5
    f = np.zeros((dim, dim))

    ia0 = 0
    ia1 = slice(1, 1 + p_a)
    iav = 1 + p_a
    ib1 = slice(iav + 1, iav + 1 + p_b)
    ibv = iav + 1 + p_b
    ig1 = slice(ibv + 1, ibv + 1 + p_ab)
    igv = ibv + 1 + p_ab
    iw1 = slice(igv + 1, igv + 1 + p_w)
    iwv = igv + 1 + p_w

    # row-rate block [xi0, xi1, s_a2]
    f[ia0, ia0] = f1
    f[ia0, ia1] = -s_a * f2
    f[ia1, ia0] = -s_a * f2
    f[ia0, iav] = moments.mu3_alpha
    f[iav, ia0] = moments.mu3_alpha
    f[ia1, ia1] = s_a * d1i
    f[iav, iav] = moments.mu4_alpha - s_a**2

    # column-rate block [xi2, s_b2]
    f[ib1, ib1] = s_b * d2i
    f[ibv, ibv] = moments.mu4_beta - s_b**2

    # cross terms between the two slow blocks (only the intercept row couples)
    f[ia0, ib1] = -np.sqrt(eta) * s_b * f3
    f[ib1, ia0] = -np.sqrt(eta) * s_b * f3
    f[ia0, ibv] = np.sqrt(eta) * moments.mu3_beta
    f[ibv, ia0] = np.sqrt(eta) * moments.mu3_beta

    # interaction-rate block [xi3, s_g2]
    f[ig1, ig1] = s_g * d3i
    f[igv, igv] = moments.mu4_gamma - s_g**2

    # within-rate block [xi4, s_e2]
    f[iw1, iw1] = s_e * d4i
    f[iwv, iwv] = moments.mu4_e - s_e**2

    k = k_diag(stats)
    diag = np.diag(f)
    with np.errstate(invalid="ignore"):
        se = np.where(diag >= 0.0, np.sqrt(np.maximum(diag, 0.0) / k), np.nan)
    return CovarianceEstimate(
        f=f, k=k, se=se, names=omega_names(stats), eta=eta, tau=tau
    )


# ---------------------------------------------------------------------------
# confidence intervals
# ---------------------------------------------------------------------------

@dataclass
class CiRow:
    name: str
    estimate: float
    se: float
    lower: float
    upper: float
    level: float
    rate: float
    degenerate: bool = False
    sd_lower: Optional[float] = None   # variance rows: interval for sigma
    sd_upper: Optional[float] = None


@dataclass
class CiTable:
    rows: list
    level: float
    warnings: list = field(default_factory=list)

    def row(self, name: str) -> CiRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_records(self) -> list:
        return [
            {
                "name": r.name,
                "estimate": r.estimate,
                "se": r.se,
                "lower": r.lower,
                "upper": r.upper,
                "sd_lower": r.sd_lower,
                "sd_upper": r.sd_upper,
                "level": r.level,
                "rate": r.rate,
                "degenerate": r.degenerate,
            }
            for r in self.rows
        ]


def variance_interval(sigma2: float, spread: float, rate: float, n_b: float):
    """Log-scale interval for one variance component.

    Returns (lower, upper, sd_lower, sd_upper): the sigma^2 interval is
    the square of the sigma interval sigma*exp(+-half-width).

    Raises DegenerateWidth when spread = mu4 - sigma^4 is not positive.
    """
    if spread <= 0.0:
        raise DegenerateWidth(
            f"fourth-moment spread {spread:.3e} <= 0; interval undefined"
        )
    sigma = np.sqrt(sigma2)
    half = n_b * np.sqrt(spread) / (2.0 * np.sqrt(rate) * sigma2)
    # a boundary-floored sigma2 makes half astronomically large; the
    # interval then degenerates to [0, inf), which is the intended limit
    with np.errstate(over="ignore"):
        sd_lo = sigma * np.exp(-half)
        sd_hi = sigma * np.exp(half)
        return sd_lo**2, sd_hi**2, sd_lo, sd_hi


def confidence_intervals(fit: FitResult, cov: CovarianceEstimate,
                         level: float = 0.95) -> CiTable:
    """Two-sided intervals for every model parameter.

    Slope and intercept rows are estimate +- N_b * se.  Variance rows use
    the log-sigma construction; rows whose fourth-moment spread is not
    positive are returned flagged degenerate with NaN endpoints.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must be in (0, 1), got {level}")
    n_b = float(scipy.stats.norm.ppf(0.5 + level / 2.0))
    omega = fit.params.omega()
    var_idx = set(variance_indices(fit.stats).tolist())
    rows = []
    warnings = []
    for r, name in enumerate(cov.names):
        est = float(omega[r])
        se = float(cov.se[r])
        rate = float(cov.k[r])
        if r in var_idx:
            spread = float(cov.f[r, r])
            try:
                lo, hi, sd_lo, sd_hi = variance_interval(est, spread, rate, n_b)
                rows.append(CiRow(name, est, se, lo, hi, level, rate,
                                  sd_lower=sd_lo, sd_upper=sd_hi))
            except DegenerateWidth as exc:
                warnings.append(f"{name}: {exc}")
                rows.append(CiRow(name, est, np.nan, np.nan, np.nan, level,
                                  rate, degenerate=True))
        else:
            half = n_b * se
            rows.append(CiRow(name, est, se, est - half, est + half, level, rate))
    return CiTable(rows=rows, level=level, warnings=warnings)


# ---------------------------------------------------------------------------
# influence functions
# ---------------------------------------------------------------------------

@dataclass
class InfluencePoint:
    """One unit's random effects and covariates for influence evaluation.

    x_a and x_b are the raw row/column covariates (centering against the
    fitted grand means happens internally where the formulas need it);
    x_ab_c and x_w_c are the already-centered interaction and within
    covariates of the unit.
    """

    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    e: float = 0.0
    x_a: Optional[np.ndarray] = None
    x_b: Optional[np.ndarray] = None
    x_ab_c: Optional[np.ndarray] = None
    x_w_c: Optional[np.ndarray] = None


def influence(fit: FitResult, point: InfluencePoint,
              eta: float | None = None) -> np.ndarray:
    """First-order influence of one unit on each parameter estimate.

    Returns the omega-ordered vector of influence values.  eta overrides
    the design ratio g/h (the exact eta = 0 limit selects the simplified
    one-way-dominant form).
    """
    stats = fit.stats
    if eta is None:
        eta = stats.design.eta
    t = fit.params.theta
    s_a, s_b, s_g, s_e = t.sigma_a2, t.sigma_b2, t.sigma_g2, t.sigma_e2
    tau = s_a + eta * s_b
    p_a, p_b, p_ab, p_w = stats.p_a, stats.p_b, stats.p_ab, stats.p_w

    x_a = np.zeros(p_a) if point.x_a is None else np.asarray(point.x_a, dtype=float)
    x_b = np.zeros(p_b) if point.x_b is None else np.asarray(point.x_b, dtype=float)
    x_ab = np.zeros(p_ab) if point.x_ab_c is None else np.asarray(point.x_ab_c, dtype=float)
    x_w = np.zeros(p_w) if point.x_w_c is None else np.asarray(point.x_w_c, dtype=float)
    for arr, p, label in ((x_a, p_a, "x_a"), (x_b, p_b, "x_b"),
                          (x_ab, p_ab, "x_ab_c"), (x_w, p_w, "x_w_c")):
        if arr.shape != (p,):
            raise DimensionMismatch(f"{label} has shape {arr.shape}, expected ({p},)")

    d1, d2, d3, d4 = _second_moment_blocks(stats)
    d1i = _inv(d1, "row")
    d2i = _inv(d2, "column")
    d3i = _inv(d3, "interaction")
    d4i = _inv(d4, "within")
    xbar_a, xbar_b = stats.xbar_a, stats.xbar_b
    xa_c = x_a - xbar_a

    alpha, beta, gamma, e = point.alpha, point.beta, point.gamma, point.e
    proj_a = float(xbar_a @ d1i @ xa_c) if p_a else 0.0
    q_b = float(xbar_b @ d2i @ xbar_b) if p_b else 0.0

    if eta == 0.0:
        # one-way-dominant limit: column effects estimated from centered
        # column covariates, no leakage into the intercept
        if_xi0 = (1.0 - proj_a) * alpha
        if_xi2 = (d2i @ (x_b - xbar_b)) * beta if p_b else np.zeros(0)
    else:
        se_ = np.sqrt(eta)
        if_xi0 = (
            (1.0 + (s_b / tau) * (eta - se_) * q_b) * alpha
            - proj_a * alpha
            + eta * (1.0 + (s_a / (se_ * tau) + eta * s_b / tau) * q_b) * beta
            - se_ * (float(xbar_b @ d2i @ x_b) if p_b else 0.0) * beta
        )
        if p_b:
            if_xi2 = (d2i @ x_b) * beta + (d2i @ xbar_b) * (
                (s_b / tau) * (1.0 - se_) * alpha
                - (s_a / tau + eta**1.5 * s_b / tau) * beta
            )
        else:
            if_xi2 = np.zeros(0)

    if_xi1 = (d1i @ xa_c) * alpha if p_a else np.zeros(0)
    if_xi3 = (d3i @ x_ab) * gamma if p_ab else np.zeros(0)
    if_xi4 = (d4i @ x_w) * e if p_w else np.zeros(0)

    return np.concatenate(
        [
            [if_xi0], if_xi1, [alpha**2 - s_a],
            if_xi2, [beta**2 - s_b],
            if_xi3, [gamma**2 - s_g],
            if_xi4, [e**2 - s_e],
        ]
    )
