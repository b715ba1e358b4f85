import numpy as np
import pytest

from crossfit.covariance import VarianceComponents
from crossfit.design import CovariateSet, Design, compress, decompose_covariate


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def make_dataset(g, h, m, seed=0, variances=(9.0, 49.0, 36.0, 81.0),
                 xi=(0.0, 5.0, 7.0, 3.0, 4.0)):
    """Simulated crossed layout with a composite covariate split by level.

    Returns (design, covariates, y, xi, theta) with the covariate built
    from independent row / column / cell / observation pieces so every
    fixed-effect block is populated.
    """
    rng = np.random.default_rng(seed)
    design = Design(g, h, m)
    t = rng.standard_normal(g)
    u = rng.standard_normal(h)
    v = rng.standard_normal((g, h))
    w = rng.standard_normal((g, h, m))
    x = 4.0 + t[:, None, None] + 1.5 * u[None, :, None] + 2.0 * v[:, :, None] + 3.0 * w
    parts = decompose_covariate(x, design)
    theta = VarianceComponents(*variances)
    alpha = rng.normal(0.0, np.sqrt(theta.sigma_a2), g)
    beta = rng.normal(0.0, np.sqrt(theta.sigma_b2), h)
    gamma = rng.normal(0.0, np.sqrt(theta.sigma_g2), (g, h))
    e = rng.normal(0.0, np.sqrt(theta.sigma_e2), (g, h, m))
    y = (parts.mean * xi[0]
         + parts.row[:, None, None] * xi[1]
         + parts.col[None, :, None] * xi[2]
         + parts.inter[:, :, None] * xi[3]
         + parts.within * xi[4]
         + alpha[:, None, None] + beta[None, :, None] + gamma[:, :, None] + e)
    covariates = CovariateSet(
        row=parts.row[:, None],
        col=parts.col[:, None],
        inter=parts.inter[:, :, None],
        within=parts.within[:, :, :, None],
    )
    return design, covariates, y, np.asarray(xi, dtype=float), theta


@pytest.fixture
def small_fit_inputs():
    """A (10, 8, 4) dataset plus its sufficient statistics."""
    design, covariates, y, xi, theta = make_dataset(10, 8, 4, seed=7)
    stats = compress(design, covariates, y)
    return design, covariates, y, xi, theta, stats
