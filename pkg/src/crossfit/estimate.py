"""Maximum-likelihood estimation for the two-way mixed model.

The coefficient vector stacks the intercept and the four slope blocks as
[xi0 | xi1 | xi2 | xi3 | xi4].  The full parameter ("omega") order groups
each variance with the slopes estimated at the same rate:

    [xi0, xi1, s_a2 | xi2, s_b2 | xi3, s_g2 | xi4, s_e2]

with convergence rates g, h, gh, n respectively (the K normaliser).

Everything is computed from SuffStats: the likelihood and score reduce to
the contrast quadratics and Gram-block crosses, the GLS normal equations
to a (1+p)-dimensional solve.  The score is the exact gradient of the
log-likelihood; the fitter is a damped Newton iteration on the variance
block with the slopes profiled out by GLS each sweep.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg

from . import covariance
from .covariance import VarianceComponents
from .design import Design, SuffStats
from .errors import NoConvergence, NonFiniteEvaluation, NonPositiveLambda, SingularDesign
from .oracle import fd_jacobian

LOG2PI = np.log(2.0 * np.pi)

# relative floor applied to variance components during fitting
VARIANCE_FLOOR_REL = 1e-10

# condition-number ceiling for the GLS normal equations
COND_LIMIT = 1e12

VARIANCE_NAMES = ("sigma_a2", "sigma_b2", "sigma_g2", "sigma_e2")


@dataclass(frozen=True)
class ParamVector:
    """Model parameters: intercept, four slope blocks, four variances."""

    xi0: float
    xi1: np.ndarray
    xi2: np.ndarray
    xi3: np.ndarray
    xi4: np.ndarray
    theta: VarianceComponents

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (len(self.xi1), len(self.xi2), len(self.xi3), len(self.xi4))

    def xi_full(self) -> np.ndarray:
        return np.concatenate([[self.xi0], self.xi1, self.xi2, self.xi3, self.xi4])

    def omega(self) -> np.ndarray:
        t = self.theta
        return np.concatenate(
            [
                [self.xi0],
                self.xi1,
                [t.sigma_a2],
                self.xi2,
                [t.sigma_b2],
                self.xi3,
                [t.sigma_g2],
                self.xi4,
                [t.sigma_e2],
            ]
        )

    @classmethod
    def from_omega(cls, w, dims) -> "ParamVector":
        p_a, p_b, p_ab, p_w = _dims_of(dims)
        w = np.asarray(w, dtype=float)
        pos = 0

        def take(k):
            nonlocal pos
            out = w[pos : pos + k]
            pos += k
            return out

        xi0 = float(take(1)[0])
        xi1 = take(p_a).copy()
        s_a = float(take(1)[0])
        xi2 = take(p_b).copy()
        s_b = float(take(1)[0])
        xi3 = take(p_ab).copy()
        s_g = float(take(1)[0])
        xi4 = take(p_w).copy()
        s_e = float(take(1)[0])
        return cls(xi0, xi1, xi2, xi3, xi4, VarianceComponents(s_a, s_b, s_g, s_e))

    @classmethod
    def from_xi_theta(cls, xi, theta: VarianceComponents, dims) -> "ParamVector":
        p_a, p_b, p_ab, p_w = _dims_of(dims)
        xi = np.asarray(xi, dtype=float)
        o = 1
        xi1 = xi[o : o + p_a]
        o += p_a
        xi2 = xi[o : o + p_b]
        o += p_b
        xi3 = xi[o : o + p_ab]
        o += p_ab
        xi4 = xi[o : o + p_w]
        return cls(float(xi[0]), xi1.copy(), xi2.copy(), xi3.copy(), xi4.copy(), theta)

    def with_theta(self, theta) -> "ParamVector":
        if not isinstance(theta, VarianceComponents):
            theta = VarianceComponents.from_array(theta)
        return replace(self, theta=theta)


def _dims_of(dims) -> tuple[int, int, int, int]:
    if isinstance(dims, SuffStats):
        return (dims.p_a, dims.p_b, dims.p_ab, dims.p_w)
    return tuple(int(d) for d in dims)


def omega_names(dims) -> list[str]:
    p_a, p_b, p_ab, p_w = _dims_of(dims)
    names = ["xi0"]
    names += [f"xi1[{q}]" for q in range(p_a)]
    names += ["sigma_a2"]
    names += [f"xi2[{q}]" for q in range(p_b)]
    names += ["sigma_b2"]
    names += [f"xi3[{q}]" for q in range(p_ab)]
    names += ["sigma_g2"]
    names += [f"xi4[{q}]" for q in range(p_w)]
    names += ["sigma_e2"]
    return names


def variance_indices(dims) -> np.ndarray:
    """Positions of the four variances inside the omega vector."""
    p_a, p_b, p_ab, p_w = _dims_of(dims)
    i_a = 1 + p_a
    i_b = i_a + 1 + p_b
    i_g = i_b + 1 + p_ab
    i_e = i_g + 1 + p_w
    return np.array([i_a, i_b, i_g, i_e])


def k_diag(stats: SuffStats) -> np.ndarray:
    """Diagonal of the rate normaliser K in omega order."""
    d = stats.design
    g, h, n = d.g, d.h, d.n
    gh = g * h
    return np.array(
        [g] * (1 + stats.p_a)
        + [g]
        + [h] * stats.p_b
        + [h]
        + [gh] * stats.p_ab
        + [gh]
        + [n] * stats.p_w
        + [n],
        dtype=float,
    )


# ---------------------------------------------------------------------------
# residual contrasts, likelihood, score
# ---------------------------------------------------------------------------

@dataclass
class ResidualContrasts:
    """Group-mean residual contrasts and the within sum of squares."""

    rbar: float            # grand-mean residual
    ra: np.ndarray         # (g,)   row contrasts
    rb: np.ndarray         # (h,)   column contrasts
    rab: np.ndarray        # (g, h) doubly centered cell contrasts
    s_w: float             # sum of squared within-cell residuals
    s_ab: float
    s_a: float
    s_b: float


def _level_coefs(params: ParamVector, stats: SuffStats):
    """Slope sub-vectors visible at each averaging level."""
    u_a = np.concatenate([params.xi1, params.xi3, params.xi4])
    u_b = np.concatenate([params.xi2, params.xi3, params.xi4])
    u_ab = np.concatenate([params.xi3, params.xi4])
    return u_a, u_b, u_ab, params.xi4


def residual_contrasts(params: ParamVector, stats: SuffStats) -> ResidualContrasts:
    """Residual group contrasts from the sufficient statistics alone."""
    u_a, u_b, u_ab, u_w = _level_coefs(params, stats)
    d = stats.design
    ra = stats.ya - stats.ua @ u_a
    rb = stats.yb - stats.ub @ u_b
    rab = (stats.yab - stats.uab @ u_ab).reshape(d.g, d.h)
    rbar = stats.ybar - float(stats.cbar() @ params.xi_full())
    s_w = stats.qw - 2.0 * u_w @ stats.sw_xy + u_w @ stats.sw @ u_w
    return ResidualContrasts(
        rbar=rbar,
        ra=ra,
        rb=rb,
        rab=rab,
        s_w=float(s_w),
        s_ab=float(rab.reshape(-1) @ rab.reshape(-1)),
        s_a=float(ra @ ra),
        s_b=float(rb @ rb),
    )


def _quadratics(params: ParamVector, stats: SuffStats):
    """Contrast quadratics, crosses, and grand residual via Gram blocks."""
    u_a, u_b, u_ab, u_w = _level_coefs(params, stats)
    s_a = stats.qa - 2.0 * u_a @ stats.sa_xy + u_a @ stats.sa @ u_a
    s_b = stats.qb - 2.0 * u_b @ stats.sb_xy + u_b @ stats.sb @ u_b
    s_ab = stats.qab - 2.0 * u_ab @ stats.sab_xy + u_ab @ stats.sab @ u_ab
    s_w = stats.qw - 2.0 * u_w @ stats.sw_xy + u_w @ stats.sw @ u_w
    c_a = stats.sa_xy - stats.sa @ u_a
    c_b = stats.sb_xy - stats.sb @ u_b
    c_ab = stats.sab_xy - stats.sab @ u_ab
    c_w = stats.sw_xy - stats.sw @ u_w
    rbar = stats.ybar - float(stats.cbar() @ params.xi_full())
    return (
        float(s_w), float(s_ab), float(s_a), float(s_b),
        c_w, c_ab, c_a, c_b, rbar,
    )


def loglik(params: ParamVector, stats: SuffStats) -> float:
    """Gaussian log-likelihood evaluated through the contrast decomposition."""
    d = stats.design
    lams = covariance.lambdas_from(params.theta, d)
    l0, l1, l2, l3, l4 = lams.values
    s_w, s_ab, s_a, s_b, _, _, _, _, rbar = _quadratics(params, stats)
    g, h, m = d.g, d.h, d.m
    quad = (
        s_w / l0
        + m * s_ab / l1
        + h * m * s_a / l2
        + g * m * s_b / l3
        + d.n * rbar**2 / l4
    )
    return -0.5 * d.n * LOG2PI - 0.5 * covariance.logdet_v(lams) - 0.5 * quad


@dataclass
class ScoreVector:
    """Gradient of the log-likelihood, stored blockwise."""

    l_xi0: float
    l_xi1: np.ndarray
    l_sa2: float
    l_xi2: np.ndarray
    l_sb2: float
    l_xi3: np.ndarray
    l_sg2: float
    l_xi4: np.ndarray
    l_se2: float

    def omega(self) -> np.ndarray:
        return np.concatenate(
            [
                [self.l_xi0], self.l_xi1, [self.l_sa2],
                self.l_xi2, [self.l_sb2],
                self.l_xi3, [self.l_sg2],
                self.l_xi4, [self.l_se2],
            ]
        )

    def theta(self) -> np.ndarray:
        return np.array([self.l_sa2, self.l_sb2, self.l_sg2, self.l_se2])

    # the four rate partitions

    def psi_a(self) -> np.ndarray:
        return np.concatenate([[self.l_xi0], self.l_xi1, [self.l_sa2]])

    def psi_b(self) -> np.ndarray:
        return np.concatenate([self.l_xi2, [self.l_sb2]])

    def psi_ab(self) -> np.ndarray:
        return np.concatenate([self.l_xi3, [self.l_sg2]])

    def psi_w(self) -> np.ndarray:
        return np.concatenate([self.l_xi4, [self.l_se2]])


def _score_from_pieces(stats, lams, s_w, s_ab, s_a, s_b,
                       c_w, c_ab, c_a, c_b, rbar, rbar2) -> ScoreVector:
    """Assemble the score given contrast quadratics and crosses.

    rbar2 is passed separately from rbar so expectation computations can
    supply E[rbar^2] != (E rbar)^2.
    """
    d = stats.design
    g, h, m = d.g, d.h, d.m
    n = d.n
    l0, l1, l2, l3, l4 = lams.values
    p_a, p_b, p_ab = stats.p_a, stats.p_b, stats.p_ab

    l_xi0 = n / l4 * rbar
    l_xi1 = h * m / l2 * c_a[:p_a] + n / l4 * stats.xbar_a * rbar
    l_xi2 = g * m / l3 * c_b[:p_b] + n / l4 * stats.xbar_b * rbar
    l_xi3 = (
        m / l1 * c_ab[:p_ab]
        + h * m / l2 * c_a[p_a : p_a + p_ab]
        + g * m / l3 * c_b[p_b : p_b + p_ab]
        + n / l4 * stats.xbar_ab * rbar
    )
    l_xi4 = (
        c_w / l0
        + m / l1 * c_ab[p_ab:]
        + h * m / l2 * c_a[p_a + p_ab :]
        + g * m / l3 * c_b[p_b + p_ab :]
        + n / l4 * stats.xbar_w * rbar
    )

    l_sa2 = (
        h**2 * m**2 / (2 * l2**2) * s_a
        - (g - 1) * h * m / (2 * l2)
        + g * h**2 * m**2 / (2 * l4**2) * rbar2
        - h * m / (2 * l4)
    )
    l_sb2 = (
        g**2 * m**2 / (2 * l3**2) * s_b
        - (h - 1) * g * m / (2 * l3)
        + g**2 * h * m**2 / (2 * l4**2) * rbar2
        - g * m / (2 * l4)
    )
    l_sg2 = (
        m**2 / (2 * l1**2) * s_ab
        - (g - 1) * (h - 1) * m / (2 * l1)
        + h * m**2 / (2 * l2**2) * s_a
        - (g - 1) * m / (2 * l2)
        + g * m**2 / (2 * l3**2) * s_b
        - (h - 1) * m / (2 * l3)
        + g * h * m**2 / (2 * l4**2) * rbar2
        - m / (2 * l4)
    )
    l_se2 = (
        s_w / (2 * l0**2)
        - g * h * (m - 1) / (2 * l0)
        + m / (2 * l1**2) * s_ab
        - (g - 1) * (h - 1) / (2 * l1)
        + h * m / (2 * l2**2) * s_a
        - (g - 1) / (2 * l2)
        + g * m / (2 * l3**2) * s_b
        - (h - 1) / (2 * l3)
        + n / (2 * l4**2) * rbar2
        - 1 / (2 * l4)
    )
    return ScoreVector(
        l_xi0=float(l_xi0), l_xi1=l_xi1, l_sa2=float(l_sa2),
        l_xi2=l_xi2, l_sb2=float(l_sb2),
        l_xi3=l_xi3, l_sg2=float(l_sg2),
        l_xi4=l_xi4, l_se2=float(l_se2),
    )


def score(params: ParamVector, stats: SuffStats) -> ScoreVector:
    """Exact gradient of the log-likelihood at params."""
    lams = covariance.lambdas_from(params.theta, stats.design)
    s_w, s_ab, s_a, s_b, c_w, c_ab, c_a, c_b, rbar = _quadratics(params, stats)
    return _score_from_pieces(
        stats, lams, s_w, s_ab, s_a, s_b, c_w, c_ab, c_a, c_b, rbar, rbar**2
    )


# ---------------------------------------------------------------------------
# GLS
# ---------------------------------------------------------------------------

def gram_blocks(stats: SuffStats):
    """Normal-equation building blocks, cached on the stats object.

    Returns (gs, ws): five (1+p, 1+p) matrices and five (1+p,) vectors such
    that  X'V^{-1}X = sum_s gs[s]/lam_s  and  X'V^{-1}y = sum_s ws[s]/lam_s.
    """
    cached = getattr(stats, "_gram_cache", None)
    if cached is not None:
        return cached
    d = stats.design
    g, h, m = d.g, d.h, d.m
    k = stats.n_xi
    cbar = stats.cbar()

    def embed(mat, vec, idx, scale):
        gmat = np.zeros((k, k))
        wvec = np.zeros(k)
        if len(idx):
            gmat[np.ix_(idx, idx)] = scale * mat
            wvec[idx] = scale * vec
        return gmat, wvec

    g0, w0 = embed(stats.sw, stats.sw_xy, stats.idx_within, 1.0)
    g1, w1 = embed(stats.sab, stats.sab_xy, stats.idx_celllevel, float(m))
    g2, w2 = embed(stats.sa, stats.sa_xy, stats.idx_rowlevel, float(h * m))
    g3, w3 = embed(stats.sb, stats.sb_xy, stats.idx_collevel, float(g * m))
    g4 = d.n * np.outer(cbar, cbar)
    w4 = d.n * stats.ybar * cbar
    cache = ((g0, g1, g2, g3, g4), (w0, w1, w2, w3, w4))
    stats._gram_cache = cache
    return cache


def normal_matrix(theta: VarianceComponents, stats: SuffStats) -> np.ndarray:
    """X'V^{-1}X assembled from the Gram blocks."""
    lams = covariance.lambdas_from(theta, stats.design)
    gs, _ = gram_blocks(stats)
    mmat = np.zeros((stats.n_xi, stats.n_xi))
    for gmat, lam in zip(gs, lams.values):
        mmat += gmat / lam
    return mmat


def gls_solve(theta: VarianceComponents, stats: SuffStats) -> np.ndarray:
    """Generalised least squares coefficients at fixed variance components.

    Raises SingularDesign when the normal equations are ill-conditioned
    (condition number above COND_LIMIT).
    """
    lams = covariance.lambdas_from(theta, stats.design)
    gs, ws = gram_blocks(stats)
    mmat = np.zeros((stats.n_xi, stats.n_xi))
    rhs = np.zeros(stats.n_xi)
    for gmat, wvec, lam in zip(gs, ws, lams.values):
        mmat += gmat / lam
        rhs += wvec / lam
    cond = np.linalg.cond(mmat)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularDesign(
            f"normal equations condition number {cond:.3e} exceeds {COND_LIMIT:.0e}"
        )
    try:
        return scipy.linalg.solve(mmat, rhs, assume_a="pos")
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - cond guard first
        raise SingularDesign(f"normal equations not positive definite: {exc}") from exc


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _eval_or_none(fun, x):
    try:
        v = np.asarray(fun(x), dtype=float)
    except NonPositiveLambda:
        return None
    return v if np.all(np.isfinite(v)) else None


def _jacobian_near_boundary(fun, x, rel_step, fx):
    """Central-difference Jacobian, one-sided where a probe is infeasible.

    Variance components near the floor can make a downward probe cross
    into non-positive covariance eigenvalues; those coordinates fall back
    to a forward (or backward) difference against fx = fun(x).
    """
    x = np.asarray(x, dtype=float)
    cols = []
    for q in range(x.size):
        step = rel_step * max(1.0, abs(x[q]))
        up = x.copy()
        dn = x.copy()
        up[q] += step
        dn[q] -= step
        fu = _eval_or_none(fun, up)
        fd = _eval_or_none(fun, dn)
        if fu is not None and fd is not None:
            cols.append((fu - fd) / (2.0 * step))
        elif fu is not None:
            cols.append((fu - fx) / step)
        elif fd is not None:
            cols.append((fx - fd) / step)
        else:
            raise NonFiniteEvaluation(
                f"variance-score Jacobian column {q} has no feasible probe"
            )
    return np.column_stack(cols)


@dataclass
class FitOptions:
    max_iter: int = 100
    score_tol: float = 1e-8     # on max |K^{-1/2} psi|
    step_tol: float = 1e-10     # on the relative parameter step
    max_halvings: int = 30
    jac_rel_step: float = 1e-6  # FD step for the variance-block Jacobian


@dataclass
class FitResult:
    params: ParamVector
    method: str                 # "ml" or "reml"
    converged: bool
    iterations: int
    loglik: float               # Gaussian log-likelihood at the estimate
    criterion: float            # objective maximised (== loglik for ML)
    score_norm: float           # max |K^{-1/2} psi| at the estimate
    criterion_trace: list = field(default_factory=list)
    boundary: tuple = ()        # names of variances stopped at the floor
    floor: float = 0.0
    stats: SuffStats = None

    @property
    def design(self) -> Design:
        return self.stats.design


def anova_start(stats: SuffStats, floor: float) -> VarianceComponents:
    """Method-of-moments starting values from OLS residual contrasts."""
    ident = VarianceComponents(1.0, 1.0, 1.0, 1.0)
    # all-lambda-equal GLS is OLS
    xi = gls_solve(VarianceComponents(0.0, 0.0, 0.0, 1.0), stats)
    params = ParamVector.from_xi_theta(xi, ident, stats)
    s_w, s_ab, s_a, s_b, *_ = _quadratics(params, stats)
    d = stats.design
    g, h, m = d.g, d.h, d.m
    lam0 = s_w / (g * h * (m - 1)) if m > 1 else 0.0
    lam1 = m * s_ab / ((g - 1) * (h - 1))
    lam2 = h * m * s_a / (g - 1)
    lam3 = g * m * s_b / (h - 1)
    return VarianceComponents(
        sigma_a2=max((lam2 - lam1) / (h * m), floor),
        sigma_b2=max((lam3 - lam1) / (g * m), floor),
        sigma_g2=max((lam1 - lam0) / m, floor),
        sigma_e2=max(lam0, floor) if m > 1 else max(lam1 / 2, floor),
    )


def _fit(stats: SuffStats, options: FitOptions, method: str,
         score_fn: Callable, criterion_fn: Callable) -> FitResult:
    d = stats.design
    if d.m == 1:
        raise SingularDesign(
            "m = 1: interaction and residual variances are not separately "
            "identifiable without within-cell replication"
        )
    var_y = stats.var_y()
    if var_y <= 0.0:
        raise SingularDesign("response is constant; variance components undefined")
    floor = VARIANCE_FLOOR_REL * var_y
    kd = k_diag(stats)
    sqrt_k = np.sqrt(kd)
    var_idx = variance_indices(stats)

    theta = anova_start(stats, floor)
    prev_omega = None
    rel_step = np.inf
    stalls = 0
    trace = []
    best = None  # (criterion, FitResult pieces)

    params = None
    norm = np.inf
    converged = False
    it = 0
    for it in range(1, options.max_iter + 1):
        xi = gls_solve(theta, stats)
        params = ParamVector.from_xi_theta(xi, theta, stats)
        crit = criterion_fn(params, stats)
        trace.append(crit)
        psi = score_fn(params, stats)
        w = psi.omega()

        scaled = np.abs(w) / sqrt_k
        tvec = theta.as_array()
        at_floor = tvec <= floor * (1.0 + 1e-9)
        # a variance pinned at the floor with an outward-pointing score is
        # stationary for the constrained problem
        for pos, vi in enumerate(var_idx):
            if at_floor[pos] and w[vi] < 0.0:
                scaled[vi] = 0.0
        norm = float(scaled.max())

        omega = params.omega()
        if prev_omega is not None:
            rel_step = float(np.max(np.abs(omega - prev_omega) / (1.0 + np.abs(prev_omega))))
        prev_omega = omega

        if best is None or crit > best[0]:
            best = (crit, params, norm)

        if norm < options.score_tol and rel_step < options.step_tol:
            converged = True
            break
        if norm < options.score_tol:
            # score already stationary: hold theta so the next sweep sees a
            # zero step instead of wandering along a flat direction
            stalls = 0
            continue

        def theta_score(tv):
            return score_fn(params.with_theta(tv), stats).theta()

        # active set: components pinned at the floor whose score points
        # further outward stay frozen; Newton runs on the free ones
        psi_t = psi.theta()
        free = ~(at_floor & (psi_t < 0.0))
        # keep iterates out of absurd territory (a wild interim step can
        # make the normal equations numerically singular)
        cap = 100.0 * np.maximum(tvec, var_y) + 10.0 * var_y

        def damped_accept(direction):
            slack = 1e-12 * (1.0 + abs(crit))
            for halving in range(options.max_halvings + 1):
                cand = np.clip(tvec + direction / 2.0**halving, floor, cap)
                cand_crit = criterion_fn(params.with_theta(cand), stats)
                if cand_crit >= crit - slack:
                    return cand
            return None

        cand = None
        if free.any():
            jac = _jacobian_near_boundary(
                theta_score, tvec, options.jac_rel_step, psi_t
            )
            jf = jac[np.ix_(free, free)]
            # Newton first; on rejection interpolate toward a gradient step
            # by loading the diagonal (the score Hessian is negative
            # definite near the optimum but can be indefinite far away)
            load = max(float(np.max(np.abs(np.diag(jf)))), 1e-12)
            eye = np.eye(int(free.sum()))
            for mu in (0.0, 1e-4, 1e-2, 1.0, 1e2, 1e4):
                try:
                    d = np.linalg.solve(jf - mu * load * eye, -psi_t[free])
                except np.linalg.LinAlgError:
                    continue
                if psi_t[free] @ d <= 0.0:
                    continue  # not an ascent direction; damp harder
                step = np.zeros(4)
                step[free] = d
                cand = damped_accept(step)
                if cand is not None:
                    break
        if cand is None:
            stalls += 1
            if stalls >= 2:
                break
        else:
            theta = VarianceComponents.from_array(cand)
            stalls = 0

    tvec = theta.as_array() if params is None else params.theta.as_array()
    boundary = tuple(
        VARIANCE_NAMES[q] for q in range(4) if tvec[q] <= floor * (1.0 + 1e-9)
    )
    result = FitResult(
        params=params,
        method=method,
        converged=converged,
        iterations=it,
        loglik=loglik(params, stats),
        criterion=trace[-1],
        score_norm=norm,
        criterion_trace=trace,
        boundary=boundary,
        floor=floor,
        stats=stats,
    )
    if not converged:
        raise NoConvergence(
            f"{method} fit did not converge in {options.max_iter} iterations "
            f"(score norm {norm:.3e}, last step {rel_step:.3e})",
            best=result,
        )
    return result


def fit_ml(stats: SuffStats, options: FitOptions | None = None) -> FitResult:
    """Maximum-likelihood fit by Newton steps on the variance block.

    Slopes are profiled out by GLS at every sweep; variance steps are
    halved until the log-likelihood does not decrease and clamped at a
    small positive floor.  Raises NoConvergence (with the best iterate
    attached) if the iteration limit is reached.
    """
    options = options or FitOptions()
    return _fit(stats, options, "ml", score, lambda p, s: loglik(p, s))


# ---------------------------------------------------------------------------
# expected score and information approximations
# ---------------------------------------------------------------------------

def expected_score(params: ParamVector, truth: ParamVector,
                   stats: SuffStats) -> ScoreVector:
    """E_truth[ score(params) ] on the design held by stats.

    Replaces every data-dependent quantity in the score by its expectation
    under ``truth``: contrast crosses become Gram-block products of the
    coefficient error, quadratics pick up the contrast variances.
    """
    d = stats.design
    g, h, m = d.g, d.h, d.m
    lams = covariance.lambdas_from(params.theta, d)
    lams_dot = covariance.lambdas_from(truth.theta, d)
    l0d, l1d, l2d, l3d, l4d = lams_dot.values

    u_a, u_b, u_ab, u_w = _level_coefs(params, stats)
    ua_dot, ub_dot, uab_dot, uw_dot = _level_coefs(truth, stats)
    d_a, d_b, d_ab, d_w = ua_dot - u_a, ub_dot - u_b, uab_dot - u_ab, uw_dot - u_w

    e_sa = float(d_a @ stats.sa @ d_a) + (g - 1) * l2d / (h * m)
    e_sb = float(d_b @ stats.sb @ d_b) + (h - 1) * l3d / (g * m)
    e_sab = float(d_ab @ stats.sab @ d_ab) + (g - 1) * (h - 1) * l1d / m
    e_sw = float(d_w @ stats.sw @ d_w) + g * h * (m - 1) * l0d

    c_a = stats.sa @ d_a
    c_b = stats.sb @ d_b
    c_ab = stats.sab @ d_ab
    c_w = stats.sw @ d_w

    mu = float(stats.cbar() @ (truth.xi_full() - params.xi_full()))
    e_rbar2 = mu**2 + l4d / d.n

    return _score_from_pieces(
        stats, lams, e_sw, e_sab, e_sa, e_sb, c_w, c_ab, c_a, c_b, mu, e_rbar2
    )


def expected_info_bn(truth: ParamVector, stats: SuffStats,
                     rel_step: float = 1e-6) -> np.ndarray:
    """Normalised expected-information matrix -K^{-1/2} E grad psi K^{-1/2}.

    The derivative of the expected score is taken by central finite
    differences around the truth.
    """
    w0 = truth.omega()
    dims = truth.dims

    def mean_score(w):
        return expected_score(ParamVector.from_omega(w, dims), truth, stats).omega()

    jac = fd_jacobian(mean_score, w0, rel_step)
    jac = 0.5 * (jac + jac.T)
    sk = np.sqrt(k_diag(stats))
    return -jac / np.outer(sk, sk)


def expected_info_limit(params: ParamVector, stats: SuffStats,
                        eta: float | None = None) -> np.ndarray:
    """Blockwise limit of the normalised expected information.

    Covariate second moments are plugged in from the observed design; eta
    defaults to the design ratio g/h.
    """
    d = stats.design
    if eta is None:
        eta = d.eta
    t = params.theta
    s_a, s_b, s_g, s_e = t.sigma_a2, t.sigma_b2, t.sigma_g2, t.sigma_e2
    tau = s_a + eta * s_b
    p_a, p_b, p_ab, p_w = stats.p_a, stats.p_b, stats.p_ab, stats.p_w

    d1 = stats.sa[:p_a, :p_a] / d.g
    d2 = stats.sb[:p_b, :p_b] / d.h
    d3 = stats.sab[:p_ab, :p_ab] / (d.g * d.h)
    d4 = stats.sw[:p_w, :p_w] / d.n
    xa, xb = stats.xbar_a, stats.xbar_b

    dim = stats.p + 5
    b = np.zeros((dim, dim))

    # block a: [xi0, xi1, s_a2]
    ia0 = 0
    ia1 = slice(1, 1 + p_a)
    iav = 1 + p_a
    b[ia0, ia0] = 1.0 / tau
    b[ia0, ia1] = xa / tau
    b[ia1, ia0] = xa / tau
    b[ia1, ia1] = d1 / s_a + np.outer(xa, xa) / tau
    b[iav, iav] = 1.0 / (2.0 * s_a**2)

    # block b: [xi2, s_b2]
    ib1 = slice(iav + 1, iav + 1 + p_b)
    ibv = iav + 1 + p_b
    b[ib1, ib1] = d2 / s_b + eta * np.outer(xb, xb) / tau
    b[ibv, ibv] = 1.0 / (2.0 * s_b**2)

    # cross block a-b
    b[ia0, ib1] = np.sqrt(eta) * xb / tau
    b[ib1, ia0] = np.sqrt(eta) * xb / tau
    if p_a and p_b:
        cross = np.sqrt(eta) * np.outer(xa, xb) / tau
        b[ia1, ib1] = cross
        b[ib1, ia1] = cross.T

    # block ab: [xi3, s_g2]
    ig1 = slice(ibv + 1, ibv + 1 + p_ab)
    igv = ibv + 1 + p_ab
    b[ig1, ig1] = d3 / s_g
    b[igv, igv] = 1.0 / (2.0 * s_g**2)

    # block w: [xi4, s_e2]
    iw1 = slice(igv + 1, igv + 1 + p_w)
    iwv = igv + 1 + p_w
    b[iw1, iw1] = d4 / s_e
    b[iwv, iwv] = 1.0 / (2.0 * s_e**2)

    return b
