import numpy as np
import numpy.testing as npt
import pytest

from crossfit.covariance import VarianceComponents, dense_v
from crossfit.design import Design, compress
from crossfit.errors import NonFiniteEvaluation
from crossfit.estimate import LOG2PI, gls_solve, loglik
from crossfit.oracle import (
    DenseModel,
    dense_design_matrix,
    dense_gls,
    dense_loglik,
    fd_gradient,
    fd_jacobian,
    random_instance,
    run_validation,
)

from conftest import make_dataset


def test_fd_gradient_quadratic():
    grad = fd_gradient(lambda x: float(x @ x), np.array([1.0, 2.0]))
    npt.assert_allclose(grad, [2.0, 4.0], rtol=1e-8)


def test_fd_gradient_nonfinite():
    def f(x):
        return float(np.log(x[0])) if x[0] > 0 else float("nan")

    with pytest.raises(NonFiniteEvaluation):
        fd_gradient(f, np.array([1e-9]))


def test_fd_jacobian_linear_map():
    a = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    jac = fd_jacobian(lambda x: a @ x, np.array([0.3, -1.2]))
    npt.assert_allclose(jac, a, rtol=1e-7)


def test_fd_step_size_tradeoff():
    """Central differences degrade at both very large and very tiny steps."""
    x = np.array([0.7])
    exact = np.cos(0.7)

    def err(rel):
        return abs(fd_gradient(lambda v: float(np.sin(v[0])), x, rel_step=rel)[0]
                   - exact)

    assert err(1e-6) < err(1e-1)
    assert err(1e-6) < err(1e-13)


class TestDenseDesignMatrix:
    def test_layout(self):
        design, covariates, y, _, _ = make_dataset(2, 3, 2, seed=4)
        x = dense_design_matrix(design, covariates)
        assert x.shape == (12, 5)
        npt.assert_allclose(x[:, 0], 1.0)
        # row covariate repeats over (j, k); k runs fastest
        npt.assert_allclose(x[:, 1], np.repeat(covariates.row[:, 0], 6))
        npt.assert_allclose(x[:, 4], covariates.within[..., 0].ravel())

    def test_no_covariates(self):
        design = Design(3, 2, 2)
        from crossfit.design import CovariateSet
        x = dense_design_matrix(design, CovariateSet.empty(design))
        npt.assert_array_equal(x, np.ones((12, 1)))


def test_dense_loglik_iid_case(rng):
    """With theta = (0,0,0,s2) the likelihood is the plain Gaussian one."""
    design, covariates, y, xi_true, _ = make_dataset(3, 3, 2, seed=8)
    model = DenseModel.from_parts(design, covariates, y)
    xi = np.array([1.0, *xi_true[1:]])
    s2 = 2.7
    ll = dense_loglik(model, xi, VarianceComponents(0, 0, 0, s2))
    r = y.ravel() - model.x @ xi
    expected = -0.5 * design.n * (LOG2PI + np.log(s2)) - 0.5 * r @ r / s2
    npt.assert_allclose(ll, expected, rtol=1e-12)


def test_dense_gls_maximizes_loglik(rng):
    design, covariates, y, _, _ = make_dataset(3, 2, 3, seed=13)
    model = DenseModel.from_parts(design, covariates, y)
    theta = VarianceComponents(1.0, 2.0, 0.5, 1.5)
    xi_hat = dense_gls(model, theta)
    best = dense_loglik(model, xi_hat, theta)
    for _ in range(10):
        other = xi_hat + 0.1 * rng.standard_normal(xi_hat.size)
        assert dense_loglik(model, other, theta) < best


def test_dense_gls_agrees_with_structured(rng):
    design, covariates, y, _, _ = make_dataset(3, 4, 2, seed=21)
    model = DenseModel.from_parts(design, covariates, y)
    stats = compress(design, covariates, y)
    theta = VarianceComponents(0.7, 1.1, 0.3, 0.9)
    npt.assert_allclose(dense_gls(model, theta), gls_solve(theta, stats),
                        atol=1e-9)


def test_random_instance_shapes(rng):
    design, covariates, y, xi, theta = random_instance(rng, 3, 2, 4)
    assert (design.g, design.h, design.m) == (3, 2, 4)
    assert y.shape == (3, 2, 4)
    assert covariates.row.shape == (3, 1)
    assert xi.size == 5
    assert min(theta.as_array()) > 0


def test_dense_v_consistency_with_loglik(rng):
    # a detour through the covariance matrix gives the same likelihood
    design, covariates, y, xi_true, _ = make_dataset(2, 2, 3, seed=17)
    model = DenseModel.from_parts(design, covariates, y)
    theta = VarianceComponents(0.5, 0.9, 0.4, 1.2)
    xi = np.asarray([0.5, *xi_true[1:]])
    r = y.ravel() - model.x @ xi
    v = dense_v(theta, design)
    sign, logdet = np.linalg.slogdet(v)
    expected = (-0.5 * design.n * LOG2PI - 0.5 * logdet
                - 0.5 * r @ np.linalg.solve(v, r))
    npt.assert_allclose(dense_loglik(model, xi, theta), expected, rtol=1e-11)


def test_run_validation_all_pass():
    checks = run_validation(seed=5, instances=5)
    assert len(checks) == 6
    for check in checks:
        assert check.passed, f"{check.name}: {check.max_err} > {check.tol}"
