"""Covariance structure of the balanced two-way random-effects layout.

The marginal covariance of the n response values is

    V = s_a I_g (x) J_h (x) J_m  +  s_b J_g (x) I_h (x) J_m
      + s_g I_g (x) I_h (x) J_m  +  s_e I_n

(J = all-ones).  It has five eigenvalues with known multiplicities and
eigenprojections built from group averaging, so applying V^{-1}, the
log-determinant, and quadratic forms all run in O(n) without ever
materialising an n-by-n matrix.  ``dense_v`` exists only as an oracle for
small problems.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .design import Design
from .errors import DimensionMismatch, NonPositiveLambda, TooLargeForDenseOracle

# refuse to build a dense V beyond this many observations
DENSE_LIMIT = 4096


@dataclass(frozen=True)
class VarianceComponents:
    """The four variance components (row, column, interaction, residual)."""

    sigma_a2: float   # row effect variance
    sigma_b2: float   # column effect variance
    sigma_g2: float   # interaction effect variance
    sigma_e2: float   # residual variance

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.sigma_a2, self.sigma_b2, self.sigma_g2, self.sigma_e2]
        )

    @classmethod
    def from_array(cls, arr) -> "VarianceComponents":
        a, b, g, e = (float(v) for v in arr)
        return cls(a, b, g, e)


class Lambdas(NamedTuple):
    """Eigenvalues of V (finest first) and their multiplicities."""

    values: np.ndarray        # (5,)  [lam0, lam1, lam2, lam3, lam4]
    multiplicities: np.ndarray  # (5,) integer, summing to n

    @property
    def lam0(self) -> float:
        return float(self.values[0])

    @property
    def lam1(self) -> float:
        return float(self.values[1])

    @property
    def lam2(self) -> float:
        return float(self.values[2])

    @property
    def lam3(self) -> float:
        return float(self.values[3])

    @property
    def lam4(self) -> float:
        return float(self.values[4])


def lambdas_from(theta: VarianceComponents, design: Design) -> Lambdas:
    """Map variance components to the five-eigenvalue profile of V.

    lam0 = s_e                        mult  g h (m-1)
    lam1 = s_e + m s_g                mult  (g-1)(h-1)
    lam2 = lam1 + h m s_a             mult  g-1
    lam3 = lam1 + g m s_b             mult  h-1
    lam4 = lam1 + h m s_a + g m s_b   mult  1

    Raises NonPositiveLambda if any eigenvalue is <= 0 (in particular
    whenever s_e <= 0).
    """
    g, h, m = design.g, design.h, design.m
    lam0 = theta.sigma_e2
    lam1 = lam0 + m * theta.sigma_g2
    lam2 = lam1 + h * m * theta.sigma_a2
    lam3 = lam1 + g * m * theta.sigma_b2
    lam4 = lam1 + h * m * theta.sigma_a2 + g * m * theta.sigma_b2
    values = np.array([lam0, lam1, lam2, lam3, lam4])
    if np.min(values) <= 0.0:
        raise NonPositiveLambda(
            f"covariance eigenvalues must be positive, got {values.tolist()}"
        )
    mult = np.array([g * h * (m - 1), (g - 1) * (h - 1), g - 1, h - 1, 1])
    return Lambdas(values=values, multiplicities=mult)


def _as_grid(design: Design, v) -> tuple[np.ndarray, bool]:
    arr = np.asarray(v, dtype=float)
    shape = (design.g, design.h, design.m)
    if arr.shape == shape:
        return arr, False
    if arr.ndim == 1 and arr.size == design.n:
        return arr.reshape(shape), True
    raise DimensionMismatch(
        f"vector of shape {arr.shape} does not fit design "
        f"(g={design.g}, h={design.h}, m={design.m})"
    )


class ContrastSums(NamedTuple):
    """The five orthogonal pieces a vector splits into under the layout."""

    s_w: float    # sum over ijk of (v_ijk - cell mean)^2
    s_ab: float   # sum over ij of (doubly centered cell mean)^2
    s_a: float    # sum over i of (row mean - grand)^2
    s_b: float    # sum over j of (col mean - grand)^2
    vbar: float   # grand mean


def contrast_sums(design: Design, v) -> ContrastSums:
    """Orthogonal contrast sums of squares of a vector on the layout."""
    grid, _ = _as_grid(design, v)
    cell = grid.mean(axis=2)
    row = cell.mean(axis=1)
    col = cell.mean(axis=0)
    grand = float(row.mean())
    dc = cell - row[:, None] - col[None, :] + grand
    return ContrastSums(
        s_w=float(((grid - cell[:, :, None]) ** 2).sum()),
        s_ab=float((dc**2).sum()),
        s_a=float(((row - grand) ** 2).sum()),
        s_b=float(((col - grand) ** 2).sum()),
        vbar=grand,
    )


def vinv_apply(lams: Lambdas, design: Design, v) -> np.ndarray:
    """Apply V^{-1} to a vector using the eigenprojections.

    Accepts a (g, h, m) grid or a flat n-vector (replicate fastest) and
    returns the result in the same shape.
    """
    grid, was_flat = _as_grid(design, v)
    l0, l1, l2, l3, l4 = lams.values
    cell = grid.mean(axis=2)
    row = cell.mean(axis=1)
    col = cell.mean(axis=0)
    grand = row.mean()
    dc = cell - row[:, None] - col[None, :] + grand
    out = (grid - cell[:, :, None]) / l0
    out += (
        dc / l1 + (row - grand)[:, None] / l2 + (col - grand)[None, :] / l3 + grand / l4
    )[:, :, None]
    return out.reshape(design.n) if was_flat else out


def logdet_v(lams: Lambdas) -> float:
    """log det V = sum of multiplicity * log(eigenvalue)."""
    if np.min(lams.values) <= 0.0:
        raise NonPositiveLambda(
            f"log-determinant undefined for eigenvalues {lams.values.tolist()}"
        )
    return float(lams.multiplicities @ np.log(lams.values))


def quad_form(lams: Lambdas, design: Design, v) -> float:
    """Quadratic form v' V^{-1} v via the contrast decomposition.

    Equals  s_w/lam0 + m s_ab/lam1 + hm s_a/lam2 + gm s_b/lam3 + n vbar^2/lam4.
    """
    cs = contrast_sums(design, v)
    g, h, m = design.g, design.h, design.m
    l0, l1, l2, l3, l4 = lams.values
    return (
        cs.s_w / l0
        + m * cs.s_ab / l1
        + h * m * cs.s_a / l2
        + g * m * cs.s_b / l3
        + design.n * cs.vbar**2 / l4
    )


def dense_v(theta: VarianceComponents, design: Design) -> np.ndarray:
    """Materialise the n-by-n covariance matrix (small problems only)."""
    if design.n > DENSE_LIMIT:
        raise TooLargeForDenseOracle(
            f"n = {design.n} exceeds the dense-matrix guard ({DENSE_LIMIT})"
        )
    g, h, m = design.g, design.h, design.m
    ident = np.eye
    ones = np.ones
    v = theta.sigma_a2 * np.kron(ident(g), np.kron(ones((h, h)), ones((m, m))))
    v += theta.sigma_b2 * np.kron(ones((g, g)), np.kron(ident(h), ones((m, m))))
    v += theta.sigma_g2 * np.kron(ident(g), np.kron(ident(h), ones((m, m))))
    v += theta.sigma_e2 * ident(design.n)
    return v
