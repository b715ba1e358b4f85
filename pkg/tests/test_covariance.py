import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossfit.covariance import (
    VarianceComponents,
    contrast_sums,
    dense_v,
    lambdas_from,
    logdet_v,
    quad_form,
    vinv_apply,
)
from crossfit.design import Design
from crossfit.errors import DimensionMismatch, NonPositiveLambda, TooLargeForDenseOracle

positive = st.floats(0.01, 50.0, allow_nan=False, allow_infinity=False)


def test_iid_spectrum():
    lams = lambdas_from(VarianceComponents(0, 0, 0, 1), Design(2, 2, 2))
    npt.assert_allclose(lams.values, 1.0)


def test_known_spectrum():
    # g=2, h=3, m=4 with variances (3, 4, 2, 1)
    lams = lambdas_from(VarianceComponents(3, 4, 2, 1), Design(2, 3, 4))
    npt.assert_allclose(lams.values, [1.0, 9.0, 45.0, 41.0, 77.0])
    npt.assert_array_equal(lams.multiplicities, [18, 2, 1, 2, 1])


def test_multiplicities_sum_to_n():
    for g, h, m in [(2, 2, 2), (3, 4, 5), (10, 3, 1)]:
        lams = lambdas_from(VarianceComponents(1, 1, 1, 1), Design(g, h, m))
        assert int(np.sum(lams.multiplicities)) == g * h * m


@settings(max_examples=50, deadline=None)
@given(positive, positive, positive, positive, st.integers(2, 6),
       st.integers(2, 6), st.integers(1, 6))
def test_lambda_identity(sa, sb, sg, se, g, h, m):
    """lam2 + lam3 = lam1 + lam4 for every parameter point."""
    lams = lambdas_from(VarianceComponents(sa, sb, sg, se), Design(g, h, m))
    npt.assert_allclose(lams.lam2 + lams.lam3, lams.lam1 + lams.lam4, rtol=1e-12)


def test_nonpositive_lambda():
    with pytest.raises(NonPositiveLambda):
        lambdas_from(VarianceComponents(1, 1, 1, 0), Design(2, 2, 2))
    with pytest.raises(NonPositiveLambda):
        lambdas_from(VarianceComponents(1, 1, 1, -2), Design(2, 2, 2))


class TestVinvApply:
    def test_identity_when_iid(self, rng):
        design = Design(3, 2, 2)
        lams = lambdas_from(VarianceComponents(0, 0, 0, 1), design)
        v = rng.standard_normal((3, 2, 2))
        npt.assert_allclose(vinv_apply(lams, design, v), v, atol=1e-12)

    def test_constant_vector_scaled_by_top_eigenvalue(self):
        design = Design(2, 3, 4)
        theta = VarianceComponents(3, 4, 2, 1)
        lams = lambdas_from(theta, design)
        ones = np.ones((2, 3, 4))
        npt.assert_allclose(vinv_apply(lams, design, ones), ones / lams.lam4,
                            rtol=1e-12)

    def test_matches_dense_inverse(self, rng):
        design = Design(3, 4, 2)
        theta = VarianceComponents(2.0, 0.5, 1.5, 1.0)
        lams = lambdas_from(theta, design)
        v = rng.standard_normal(design.n)
        expected = np.linalg.solve(dense_v(theta, design), v)
        npt.assert_allclose(vinv_apply(lams, design, v), expected, atol=1e-10)

    def test_flat_and_grid_agree(self, rng):
        design = Design(2, 3, 2)
        lams = lambdas_from(VarianceComponents(1, 2, 3, 4), design)
        grid = rng.standard_normal((2, 3, 2))
        out_grid = vinv_apply(lams, design, grid)
        out_flat = vinv_apply(lams, design, grid.ravel())
        npt.assert_allclose(out_grid.ravel(), out_flat, atol=1e-14)
        assert out_grid.shape == grid.shape
        assert out_flat.shape == (12,)

    def test_wrong_length(self):
        design = Design(2, 2, 2)
        lams = lambdas_from(VarianceComponents(1, 1, 1, 1), design)
        with pytest.raises(DimensionMismatch):
            vinv_apply(lams, design, np.ones(7))


def test_logdet_imposed_spectrum():
    # pick variances so the eigenvalues come out 1..5 on a (3,2,2) grid
    design = Design(3, 2, 2)
    theta = VarianceComponents(0.25, 1.0 / 3.0, 0.5, 1.0)
    lams = lambdas_from(theta, design)
    npt.assert_allclose(lams.values, [1, 2, 3, 4, 5])
    expected = (6 * np.log(1) + 2 * np.log(2) + 2 * np.log(3)
                + np.log(4) + np.log(5))
    npt.assert_allclose(logdet_v(lams), expected, rtol=1e-14)


def test_logdet_matches_dense(rng):
    design = Design(2, 4, 3)
    theta = VarianceComponents(1.3, 0.2, 2.1, 0.7)
    sign, dense = np.linalg.slogdet(dense_v(theta, design))
    assert sign == 1.0
    npt.assert_allclose(logdet_v(lambdas_from(theta, design)), dense, rtol=1e-12)


class TestQuadForm:
    def test_zero_vector(self):
        design = Design(2, 2, 2)
        lams = lambdas_from(VarianceComponents(1, 1, 1, 1), design)
        assert quad_form(lams, design, np.zeros((2, 2, 2))) == 0.0

    def test_anova_identity(self, rng):
        """iid case reduces to the plain sum of squares."""
        design = Design(3, 3, 2)
        lams = lambdas_from(VarianceComponents(0, 0, 0, 1), design)
        v = rng.standard_normal((3, 3, 2))
        npt.assert_allclose(quad_form(lams, design, v), np.sum(v * v), rtol=1e-12)

    def test_matches_dense(self, rng):
        design = Design(2, 3, 4)
        theta = VarianceComponents(0.8, 1.7, 0.4, 1.1)
        lams = lambdas_from(theta, design)
        v = rng.standard_normal(design.n)
        expected = v @ np.linalg.solve(dense_v(theta, design), v)
        npt.assert_allclose(quad_form(lams, design, v), expected, rtol=1e-10)

    def test_polarization(self, rng):
        # q(u+v) - q(u) - q(v) = 2 u' Vinv v, so quad_form is a true quadratic
        design = Design(2, 2, 3)
        theta = VarianceComponents(1, 2, 3, 4)
        lams = lambdas_from(theta, design)
        u = rng.standard_normal(design.n)
        v = rng.standard_normal(design.n)
        cross = u @ vinv_apply(lams, design, v)
        npt.assert_allclose(
            quad_form(lams, design, u + v)
            - quad_form(lams, design, u) - quad_form(lams, design, v),
            2.0 * cross, rtol=1e-10)


def test_contrast_sums_flat_grid_parity(rng):
    design = Design(3, 2, 4)
    grid = rng.standard_normal((3, 2, 4))
    a = contrast_sums(design, grid)
    b = contrast_sums(design, grid.ravel())
    for x, y in zip(a, b):
        npt.assert_allclose(x, y, atol=1e-14)


class TestDenseV:
    def test_entries(self):
        design = Design(2, 2, 2)
        theta = VarianceComponents(2, 3, 5, 7)
        v = dense_v(theta, design)
        n = design.n
        assert v.shape == (n, n)
        npt.assert_allclose(np.diag(v), 2 + 3 + 5 + 7)
        # same cell, different k: everything but the error variance
        npt.assert_allclose(v[0, 1], 2 + 3 + 5)
        # same row, different column: only the row effect
        npt.assert_allclose(v[0, 2], 2.0)
        # same column, different row
        npt.assert_allclose(v[0, 4], 3.0)
        # nothing shared
        npt.assert_allclose(v[0, 6], 0.0)

    def test_symmetry(self):
        design = Design(3, 2, 2)
        v = dense_v(VarianceComponents(1, 2, 3, 4), design)
        npt.assert_array_equal(v, v.T)

    def test_size_guard(self):
        with pytest.raises(TooLargeForDenseOracle):
            dense_v(VarianceComponents(1, 1, 1, 1), Design(100, 100, 10))


def test_spectrum_via_dense_eigenvalues():
    design = Design(3, 4, 2)
    theta = VarianceComponents(1.5, 2.5, 0.5, 1.0)
    lams = lambdas_from(theta, design)
    eig = np.sort(np.linalg.eigvalsh(dense_v(theta, design)))
    expected = np.sort(np.repeat(lams.values, lams.multiplicities))
    npt.assert_allclose(eig, expected, atol=1e-9)
