"""Dense reference implementations for cross-checking the structured code.

Everything here is deliberately naive: build the n-by-n covariance, the
full design matrix, and work with plain dense linear algebra.  Slow and
memory-hungry, but with no shared code paths to hide a common bug.  Used
by the test suite and by ``crossfit validate``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg

from . import covariance
from .covariance import VarianceComponents, dense_v
from .design import CovariateSet, Design, compress
from .errors import NonFiniteEvaluation

LOG2PI = np.log(2.0 * np.pi)


def fd_gradient(f: Callable, x, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient with per-coordinate relative steps.

    The step for coordinate q is rel_step * max(1, |x_q|).

    Raises NonFiniteEvaluation if f returns a non-finite value at any
    probe point.
    """
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for q in range(x.size):
        step = rel_step * max(1.0, abs(x[q]))
        up = x.copy()
        dn = x.copy()
        up[q] += step
        dn[q] -= step
        fu, fd = f(up), f(dn)
        if not (np.isfinite(fu) and np.isfinite(fd)):
            raise NonFiniteEvaluation(
                f"non-finite evaluation while differencing coordinate {q}"
            )
        grad[q] = (fu - fd) / (2.0 * step)
    return grad


def fd_jacobian(f: Callable, x, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued function."""
    x = np.asarray(x, dtype=float)
    cols = []
    for q in range(x.size):
        step = rel_step * max(1.0, abs(x[q]))
        up = x.copy()
        dn = x.copy()
        up[q] += step
        dn[q] -= step
        fu = np.asarray(f(up), dtype=float)
        fd = np.asarray(f(dn), dtype=float)
        if not (np.all(np.isfinite(fu)) and np.all(np.isfinite(fd))):
            raise NonFiniteEvaluation(
                f"non-finite evaluation while differencing coordinate {q}"
            )
        cols.append((fu - fd) / (2.0 * step))
    return np.column_stack(cols)


def dense_design_matrix(design: Design, covariates: CovariateSet) -> np.ndarray:
    """Expand compressed covariates to the full n-by-(1+p) design matrix.

    Column order matches the coefficient vector: intercept, row block,
    column block, interaction block, within block.
    """
    g, h, m = design.g, design.h, design.m
    n = design.n
    cols = [np.ones((n, 1))]
    cols.append(np.repeat(covariates.row, h * m, axis=0))
    cols.append(np.tile(np.repeat(covariates.col, m, axis=0), (g, 1)))
    cols.append(np.repeat(covariates.inter.reshape(g * h, -1), m, axis=0))
    cols.append(covariates.within.reshape(n, -1))
    return np.hstack(cols)


@dataclass
class DenseModel:
    """A fully materialised instance: design matrix and response vector."""

    design: Design
    x: np.ndarray   # (n, 1+p)
    y: np.ndarray   # (n,)

    @classmethod
    def from_parts(cls, design: Design, covariates: CovariateSet, y) -> "DenseModel":
        y = np.asarray(y, dtype=float).reshape(design.n)
        return cls(design=design, x=dense_design_matrix(design, covariates), y=y)


def dense_loglik(model: DenseModel, xi, theta: VarianceComponents) -> float:
    """Gaussian log-likelihood by Cholesky on the explicit covariance."""
    v = dense_v(theta, model.design)
    cf = scipy.linalg.cho_factor(v, lower=True)
    r = model.y - model.x @ np.asarray(xi, dtype=float)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    quad = float(r @ scipy.linalg.cho_solve(cf, r))
    return -0.5 * model.design.n * LOG2PI - 0.5 * logdet - 0.5 * quad


def dense_gls(model: DenseModel, theta: VarianceComponents) -> np.ndarray:
    """GLS coefficients by explicit V^{-1}."""
    v = dense_v(theta, model.design)
    cf = scipy.linalg.cho_factor(v, lower=True)
    vinv_x = scipy.linalg.cho_solve(cf, model.x)
    mmat = model.x.T @ vinv_x
    return np.linalg.solve(mmat, vinv_x.T @ model.y)


def dense_random_effect_designs(design: Design) -> dict[str, np.ndarray]:
    """Indicator matrices of the four random-effect sources."""
    g, h, m = design.g, design.h, design.m
    z_a = np.kron(np.eye(g), np.ones((h * m, 1)))
    z_b = np.kron(np.ones((g, 1)), np.kron(np.eye(h), np.ones((m, 1))))
    z_g = np.kron(np.eye(g * h), np.ones((m, 1)))
    return {"alpha": z_a, "beta": z_b, "gamma": z_g, "e": np.eye(design.n)}


def dense_adjustment_traces(
    model: DenseModel, theta: VarianceComponents
) -> dict[str, float]:
    """Half-traces (X'V^{-1}X)^{-1} X'V^{-1} Z Z' V^{-1} X, per source."""
    v = dense_v(theta, model.design)
    cf = scipy.linalg.cho_factor(v, lower=True)
    vinv_x = scipy.linalg.cho_solve(cf, model.x)
    mmat = model.x.T @ vinv_x
    minv = np.linalg.inv(mmat)
    out = {}
    for name, z in dense_random_effect_designs(model.design).items():
        a = vinv_x.T @ z
        out[name] = 0.5 * float(np.trace(minv @ a @ a.T))
    return out


def naive_suffstats(design: Design, covariates: CovariateSet, y):
    """Triple-loop computation of the compressed statistics, for testing.

    Returns a dict with the same Gram blocks/quadratics compress produces.
    """
    g, h, m = design.g, design.h, design.m
    y = np.asarray(y, dtype=float).reshape(g, h, m)
    xa, xb = covariates.row, covariates.col
    xab, xw = covariates.inter, covariates.within

    ybar = y.mean()
    yrow = np.array([y[i].mean() for i in range(g)])
    ycol = np.array([y[:, j].mean() for j in range(h)])
    ycell = np.array([[y[i, j].mean() for j in range(h)] for i in range(g)])

    xbar_a = xa.mean(axis=0) if covariates.p_a else np.zeros(0)
    xbar_b = xb.mean(axis=0) if covariates.p_b else np.zeros(0)
    xbar_ab = xab.mean(axis=(0, 1)) if covariates.p_ab else np.zeros(0)
    xbar_w = xw.mean(axis=(0, 1, 2)) if covariates.p_w else np.zeros(0)

    da = covariates.p_a + covariates.p_ab + covariates.p_w
    db = covariates.p_b + covariates.p_ab + covariates.p_w
    dab = covariates.p_ab + covariates.p_w

    sa = np.zeros((da, da))
    sa_xy = np.zeros(da)
    qa = 0.0
    for i in range(g):
        u = np.concatenate(
            [
                xa[i] - xbar_a,
                xab[i].mean(axis=0) - xbar_ab,
                xw[i].mean(axis=(0, 1)) - xbar_w,
            ]
        )
        c = yrow[i] - ybar
        sa += np.outer(u, u)
        sa_xy += u * c
        qa += c * c

    sb = np.zeros((db, db))
    sb_xy = np.zeros(db)
    qb = 0.0
    for j in range(h):
        u = np.concatenate(
            [
                xb[j] - xbar_b,
                xab[:, j].mean(axis=0) - xbar_ab,
                xw[:, j].mean(axis=(0, 1)) - xbar_w,
            ]
        )
        c = ycol[j] - ybar
        sb += np.outer(u, u)
        sb_xy += u * c
        qb += c * c

    sab = np.zeros((dab, dab))
    sab_xy = np.zeros(dab)
    qab = 0.0
    xab_row = xab.mean(axis=1)
    xab_col = xab.mean(axis=0)
    xw_cell = xw.mean(axis=2)
    xw_row = xw_cell.mean(axis=1)
    xw_col = xw_cell.mean(axis=0)
    for i in range(g):
        for j in range(h):
            u = np.concatenate(
                [
                    xab[i, j] - xab_row[i] - xab_col[j] + xbar_ab,
                    xw_cell[i, j] - xw_row[i] - xw_col[j] + xbar_w,
                ]
            )
            c = ycell[i, j] - yrow[i] - ycol[j] + ybar
            sab += np.outer(u, u)
            sab_xy += u * c
            qab += c * c

    pw = covariates.p_w
    sw = np.zeros((pw, pw))
    sw_xy = np.zeros(pw)
    qw = 0.0
    for i in range(g):
        for j in range(h):
            for k in range(m):
                u = xw[i, j, k] - xw_cell[i, j]
                c = y[i, j, k] - ycell[i, j]
                sw += np.outer(u, u)
                sw_xy += u * c
                qw += c * c

    return {
        "sa": sa, "sb": sb, "sab": sab, "sw": sw,
        "sa_xy": sa_xy, "sb_xy": sb_xy, "sab_xy": sab_xy, "sw_xy": sw_xy,
        "qa": qa, "qb": qb, "qab": qab, "qw": qw,
    }


# ---------------------------------------------------------------------------
# randomized cross-validation of structured vs dense paths
# ---------------------------------------------------------------------------

def random_instance(rng: np.random.Generator, g: int, h: int, m: int,
                    p=(1, 1, 1, 1)):
    """Draw a random small problem: design, covariates, response, truth."""
    design = Design(g, h, m)
    p_a, p_b, p_ab, p_w = p
    cov = CovariateSet(
        row=rng.normal(size=(g, p_a)),
        col=rng.normal(size=(h, p_b)),
        inter=rng.normal(size=(g, h, p_ab)),
        within=rng.normal(size=(g, h, m, p_w)),
    )
    theta = VarianceComponents(*np.round(rng.uniform(0.3, 3.0, size=4), 3))
    xi = rng.normal(size=1 + p_a + p_b + p_ab + p_w)
    model_x = dense_design_matrix(design, cov)
    alpha = rng.normal(0, np.sqrt(theta.sigma_a2), size=g)
    beta = rng.normal(0, np.sqrt(theta.sigma_b2), size=h)
    gamma = rng.normal(0, np.sqrt(theta.sigma_g2), size=(g, h))
    e = rng.normal(0, np.sqrt(theta.sigma_e2), size=(g, h, m))
    y = (model_x @ xi).reshape(g, h, m)
    y = y + alpha[:, None, None] + beta[None, :, None] + gamma[:, :, None] + e
    return design, cov, y, xi, theta


class ValidationCheck(NamedTuple):
    name: str
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tol


def run_validation(seed: int, instances: int = 20) -> list[ValidationCheck]:
    """Cross-check the structured implementation against this oracle.

    Draws random small instances and compares: log-likelihood, V^{-1}
    application, log-determinant, analytic score vs finite differences,
    GLS coefficients, and the REML adjustment traces.
    """
    from . import estimate, reml  # late import: oracle stays import-light

    rng = np.random.default_rng(seed)
    worst = {
        "loglik_structured_vs_dense": 0.0,
        "vinv_apply_vs_dense_solve": 0.0,
        "logdet_vs_dense": 0.0,
        "score_vs_fd": 0.0,
        "gls_vs_dense": 0.0,
        "adjustment_traces_vs_dense": 0.0,
    }
    for _ in range(instances):
        g, h, m = rng.integers(2, 5, size=3)
        design, cov, y, xi, theta = random_instance(rng, int(g), int(h), int(m))
        stats = compress(design, cov, y)
        model = DenseModel.from_parts(design, cov, y)
        params = estimate.ParamVector.from_xi_theta(xi, theta, stats)

        ll_s = estimate.loglik(params, stats)
        ll_d = dense_loglik(model, xi, theta)
        worst["loglik_structured_vs_dense"] = max(
            worst["loglik_structured_vs_dense"], abs(ll_s - ll_d) / max(1, abs(ll_d))
        )

        lams = covariance.lambdas_from(theta, design)
        z = rng.normal(size=design.n)
        v = dense_v(theta, design)
        err = np.max(np.abs(covariance.vinv_apply(lams, design, z) - np.linalg.solve(v, z)))
        worst["vinv_apply_vs_dense_solve"] = max(worst["vinv_apply_vs_dense_solve"], err)

        sign, ld = np.linalg.slogdet(v)
        worst["logdet_vs_dense"] = max(
            worst["logdet_vs_dense"], abs(covariance.logdet_v(lams) - ld)
        )

        psi = estimate.score(params, stats).omega()
        dims = params.dims

        def omega_loglik(w):
            pv = estimate.ParamVector.from_omega(w, dims)
            return dense_loglik(model, pv.xi_full(), pv.theta)

        fd = fd_gradient(omega_loglik, params.omega())
        scale = np.maximum(1.0, np.abs(fd))
        worst["score_vs_fd"] = max(worst["score_vs_fd"], np.max(np.abs(psi - fd) / scale))

        xi_s = estimate.gls_solve(theta, stats)
        xi_d = dense_gls(model, theta)
        worst["gls_vs_dense"] = max(worst["gls_vs_dense"], np.max(np.abs(xi_s - xi_d)))

        tr_s = reml.adjustment_traces(theta, stats)
        tr_d = dense_adjustment_traces(model, theta)
        err = max(
            abs(tr_s.t_alpha - tr_d["alpha"]),
            abs(tr_s.t_beta - tr_d["beta"]),
            abs(tr_s.t_gamma - tr_d["gamma"]),
            abs(tr_s.t_e - tr_d["e"]),
        )
        worst["adjustment_traces_vs_dense"] = max(
            worst["adjustment_traces_vs_dense"], err
        )

    tols = {
        "loglik_structured_vs_dense": 1e-8,
        "vinv_apply_vs_dense_solve": 1e-8,
        "logdet_vs_dense": 1e-8,
        "score_vs_fd": 1e-5,
        "gls_vs_dense": 1e-8,
        "adjustment_traces_vs_dense": 1e-8,
    }
    return [ValidationCheck(k, worst[k], tols[k]) for k in worst]
