"""Balanced two-way layouts and their sufficient statistics.

Data live on a (g, h, m) grid: g row groups crossed with h column groups,
m replicates per cell.  Flat vectors always run with the replicate index
fastest, then columns, then rows, i.e. C order of the (g, h, m) array.

Covariates are declared at one of four levels and stored compressed:

    row          x_i      varies over rows only          -> (g, p_a)
    column       x_j      varies over columns only       -> (h, p_b)
    interaction  x_ij     varies over cells              -> (g, h, p_ab)
    within       x_ijk    varies freely                  -> (g, h, m, p_w)

``compress`` reduces a dataset to the group means, centered level
matrices, and Gram blocks that every downstream computation (likelihood,
score, GLS, traces) consumes; after it runs, nothing else needs the raw
n-vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadIndex,
    DimensionMismatch,
    DuplicateCell,
    EmptyData,
    LevelViolation,
    MissingCell,
)

LEVELS = ("row", "column", "interaction", "within")

# Constancy tolerance for level classification, relative to covariate scale.
CONSTANCY_TOL = 1e-9


@dataclass(frozen=True)
class Design:
    """Dimensions of a balanced two-way crossed layout."""

    g: int  # number of row groups (>= 2)
    h: int  # number of column groups (>= 2)
    m: int  # replicates per cell (>= 1)

    def __post_init__(self):
        for name, lo in (("g", 2), ("h", 2), ("m", 1)):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < lo:
                raise BadIndex(f"{name} must be an integer >= {lo}, got {v!r}")

    @property
    def n(self) -> int:
        return self.g * self.h * self.m

    @property
    def eta(self) -> float:
        """Row/column group-count ratio g/h."""
        return self.g / self.h


@dataclass
class CovariateSet:
    """Compressed covariate storage, one block per level."""

    row: np.ndarray        # (g, p_a)
    col: np.ndarray        # (h, p_b)
    inter: np.ndarray      # (g, h, p_ab)
    within: np.ndarray     # (g, h, m, p_w)
    names: dict = field(default_factory=lambda: {lv: [] for lv in LEVELS})

    @classmethod
    def empty(cls, design: Design) -> "CovariateSet":
        g, h, m = design.g, design.h, design.m
        return cls(
            row=np.zeros((g, 0)),
            col=np.zeros((h, 0)),
            inter=np.zeros((g, h, 0)),
            within=np.zeros((g, h, m, 0)),
        )

    @property
    def p_a(self) -> int:
        return self.row.shape[1]

    @property
    def p_b(self) -> int:
        return self.col.shape[1]

    @property
    def p_ab(self) -> int:
        return self.inter.shape[2]

    @property
    def p_w(self) -> int:
        return self.within.shape[3]

    def check_shapes(self, design: Design) -> None:
        g, h, m = design.g, design.h, design.m
        if (
            self.row.shape[0] != g
            or self.col.shape[0] != h
            or self.inter.shape[:2] != (g, h)
            or self.within.shape[:3] != (g, h, m)
        ):
            raise DimensionMismatch(
                f"covariate blocks {self.row.shape}/{self.col.shape}/"
                f"{self.inter.shape}/{self.within.shape} do not match design "
                f"(g={g}, h={h}, m={m})"
            )


@dataclass
class CovariateParts:
    """Orthogonal decomposition of one covariate over the layout."""

    mean: float            # grand mean
    row: np.ndarray        # (g,)   row means, centered
    col: np.ndarray        # (h,)   column means, centered
    inter: np.ndarray      # (g, h) cell means, doubly centered
    within: np.ndarray     # (g, h, m) deviations from cell means

    def reconstruct(self) -> np.ndarray:
        return (
            self.mean
            + self.row[:, None, None]
            + self.col[None, :, None]
            + self.inter[:, :, None]
            + self.within
        )


def _column(table, name):
    try:
        col = table[name]
    except (KeyError, IndexError, TypeError):
        raise BadIndex(f"input table has no column {name!r}") from None
    return np.asarray(col)


def validate_design(table) -> Design:
    """Check balance of an observation table and return its dimensions.

    Args:
        table: mapping-like object (dict of arrays, DataFrame) with integer
            columns ``i``, ``j``, ``k`` indexing group rows, group columns,
            and replicates from 1.

    Returns:
        The Design (g, h, m) implied by the index ranges.

    Raises:
        EmptyData, BadIndex, MissingCell, DuplicateCell.
    """
    i = _column(table, "i")
    j = _column(table, "j")
    k = _column(table, "k")
    if len(i) == 0:
        raise EmptyData("observation table has no rows")
    for name, v in (("i", i), ("j", j), ("k", k)):
        if not np.issubdtype(v.dtype, np.integer):
            as_float = v.astype(float)
            if not np.all(as_float == np.round(as_float)):
                raise BadIndex(f"index column {name!r} is not integral")
            v = as_float.astype(int)
        if v.min() < 1:
            raise BadIndex(f"index column {name!r} must start at 1")
        if name == "i":
            i = v
        elif name == "j":
            j = v
        else:
            k = v

    g, h, m = int(i.max()), int(j.max()), int(k.max())
    design = Design(g, h, m)
    if len(i) > design.n:
        # more rows than cells: at least one triple repeats
        flat = (i - 1) * h * m + (j - 1) * m + (k - 1)
        _raise_duplicate(flat, h, m)
    counts = np.zeros(design.n, dtype=int)
    flat = (i - 1) * h * m + (j - 1) * m + (k - 1)
    np.add.at(counts, flat, 1)
    if counts.max() > 1:
        _raise_duplicate(flat, h, m)
    if counts.min() == 0:
        miss = int(np.flatnonzero(counts == 0)[0])
        mi, rem = divmod(miss, h * m)
        mj, mk = divmod(rem, m)
        raise MissingCell(mi + 1, mj + 1, mk + 1)
    return design


def _raise_duplicate(flat, h, m):
    vals, counts = np.unique(flat, return_counts=True)
    dup = int(vals[counts > 1][0])
    di, rem = divmod(dup, h * m)
    dj, dk = divmod(rem, m)
    raise DuplicateCell(di + 1, dj + 1, dk + 1)


def grid_from_table(table, design: Design, column: str) -> np.ndarray:
    """Scatter one table column onto the (g, h, m) grid."""
    i = _column(table, "i").astype(int)
    j = _column(table, "j").astype(int)
    k = _column(table, "k").astype(int)
    v = _column(table, column).astype(float)
    grid = np.empty((design.g, design.h, design.m))
    grid[i - 1, j - 1, k - 1] = v
    return grid


def classify_covariates(table, design: Design, declarations) -> CovariateSet:
    """Validate declared covariate levels and build compressed storage.

    Args:
        table: observation table (see validate_design) also holding the
            covariate columns.
        design: dimensions from validate_design.
        declarations: ordered mapping  name -> level  with level one of
            "row", "column", "interaction", "within".

    Raises:
        LevelViolation if a covariate varies inside a group it was declared
        constant on (tolerance CONSTANCY_TOL relative to covariate scale).
    """
    g, h, m = design.g, design.h, design.m
    by_level = {lv: [] for lv in LEVELS}
    names = {lv: [] for lv in LEVELS}
    for name, level in declarations.items():
        if level not in LEVELS:
            raise BadIndex(f"unknown covariate level {level!r} for {name!r}")
        grid = grid_from_table(table, design, name)
        scale = max(1.0, float(np.max(np.abs(grid))))
        tol = CONSTANCY_TOL * scale
        if level == "row":
            spread = float((grid.max(axis=(1, 2)) - grid.min(axis=(1, 2))).max())
            if spread > tol:
                raise LevelViolation(name, level, spread, tol)
            by_level[level].append(grid.mean(axis=(1, 2)))
        elif level == "column":
            spread = float((grid.max(axis=(0, 2)) - grid.min(axis=(0, 2))).max())
            if spread > tol:
                raise LevelViolation(name, level, spread, tol)
            by_level[level].append(grid.mean(axis=(0, 2)))
        elif level == "interaction":
            spread = float((grid.max(axis=2) - grid.min(axis=2)).max())
            if spread > tol:
                raise LevelViolation(name, level, spread, tol)
            by_level[level].append(grid.mean(axis=2))
        else:
            by_level[level].append(grid)
        names[level].append(name)

    def stack(arrs, shape):
        if not arrs:
            return np.zeros(shape)
        return np.stack(arrs, axis=-1)

    return CovariateSet(
        row=stack(by_level["row"], (g, 0)),
        col=stack(by_level["column"], (h, 0)),
        inter=stack(by_level["interaction"], (g, h, 0)),
        within=stack(by_level["within"], (g, h, m, 0)),
        names=names,
    )


def decompose_covariate(values: np.ndarray, design: Design) -> CovariateParts:
    """Split one covariate into orthogonal row/column/cell/replicate parts.

    The five parts sum back to the original grid and the four non-constant
    parts are mutually orthogonal as n-vectors.
    """
    grid = np.asarray(values, dtype=float)
    if grid.shape != (design.g, design.h, design.m):
        if grid.size == design.n:
            grid = grid.reshape(design.g, design.h, design.m)
        else:
            raise DimensionMismatch(
                f"covariate has {grid.size} values, design needs {design.n}"
            )
    cell = grid.mean(axis=2)
    row = cell.mean(axis=1)
    col = cell.mean(axis=0)
    grand = float(row.mean())
    return CovariateParts(
        mean=grand,
        row=row - grand,
        col=col - grand,
        inter=cell - row[:, None] - col[None, :] + grand,
        within=grid - cell[:, :, None],
    )


# ---------------------------------------------------------------------------
# sufficient statistics
# ---------------------------------------------------------------------------

@dataclass
class SuffStats:
    """Everything the likelihood machinery needs, with the n-vector gone.

    Centered level matrices stack the covariate blocks that are visible at
    that level of averaging:

        ua  (g,   p_a + p_ab + p_w)   rows:   [x_a | inter row means | within row means], centered
        ub  (h,   p_b + p_ab + p_w)   columns, centered
        uab (g*h, p_ab + p_w)         cell means, doubly centered
        uw  (n,   p_w)                within deviations from cell means

    Gram blocks sa/sb/sab/sw are the cross-product matrices of those
    stacks; *_xy are their products with the matching y contrasts; qa..qw
    the y contrast sums of squares.
    """

    design: Design
    p_a: int
    p_b: int
    p_ab: int
    p_w: int

    # grand means
    ybar: float
    xbar_a: np.ndarray
    xbar_b: np.ndarray
    xbar_ab: np.ndarray
    xbar_w: np.ndarray

    # group means of y
    ybar_row: np.ndarray   # (g,)
    ybar_col: np.ndarray   # (h,)
    ybar_cell: np.ndarray  # (g, h)

    # centered level matrices
    ua: np.ndarray
    ub: np.ndarray
    uab: np.ndarray

    # y contrasts at each level
    ya: np.ndarray         # (g,)    ybar_row - ybar
    yb: np.ndarray         # (h,)
    yab: np.ndarray        # (g*h,)  doubly centered cell means

    # Gram blocks and crosses
    sa: np.ndarray
    sb: np.ndarray
    sab: np.ndarray
    sw: np.ndarray
    sa_xy: np.ndarray
    sb_xy: np.ndarray
    sab_xy: np.ndarray
    sw_xy: np.ndarray

    # y quadratics
    qa: float
    qb: float
    qab: float
    qw: float

    @property
    def p(self) -> int:
        """Total slope count across all four levels."""
        return self.p_a + self.p_b + self.p_ab + self.p_w

    @property
    def n_xi(self) -> int:
        return 1 + self.p

    # --- index helpers into the full coefficient vector [1|a|b|ab|w] ------

    @property
    def sl_a(self) -> slice:
        return slice(1, 1 + self.p_a)

    @property
    def sl_b(self) -> slice:
        return slice(1 + self.p_a, 1 + self.p_a + self.p_b)

    @property
    def sl_ab(self) -> slice:
        o = 1 + self.p_a + self.p_b
        return slice(o, o + self.p_ab)

    @property
    def sl_w(self) -> slice:
        o = 1 + self.p_a + self.p_b + self.p_ab
        return slice(o, o + self.p_w)

    @property
    def idx_rowlevel(self) -> np.ndarray:
        """Full-vector indices of the [a | ab | w] stack used at row level."""
        return np.r_[
            np.arange(self.sl_a.start, self.sl_a.stop),
            np.arange(self.sl_ab.start, self.sl_ab.stop),
            np.arange(self.sl_w.start, self.sl_w.stop),
        ]

    @property
    def idx_collevel(self) -> np.ndarray:
        return np.r_[
            np.arange(self.sl_b.start, self.sl_b.stop),
            np.arange(self.sl_ab.start, self.sl_ab.stop),
            np.arange(self.sl_w.start, self.sl_w.stop),
        ]

    @property
    def idx_celllevel(self) -> np.ndarray:
        return np.r_[
            np.arange(self.sl_ab.start, self.sl_ab.stop),
            np.arange(self.sl_w.start, self.sl_w.stop),
        ]

    @property
    def idx_within(self) -> np.ndarray:
        return np.arange(self.sl_w.start, self.sl_w.stop)

    def cbar(self) -> np.ndarray:
        """Grand-mean covariate row [1, x̄_a, x̄_b, x̄_ab, x̄_w]."""
        return np.concatenate(
            [[1.0], self.xbar_a, self.xbar_b, self.xbar_ab, self.xbar_w]
        )

    def var_y(self) -> float:
        """Population variance of y, recovered from the contrast quadratics."""
        d = self.design
        total = (
            self.qw
            + d.m * self.qab
            + d.h * d.m * self.qa
            + d.g * d.m * self.qb
        )
        return total / d.n


def compress(design: Design, covariates: CovariateSet, y) -> SuffStats:
    """Reduce a dataset to its sufficient statistics.

    Args:
        design: layout dimensions.
        covariates: compressed covariate blocks (shapes checked).
        y: responses as a (g, h, m) grid or flat length-n vector in
            replicate-fastest order.

    Returns:
        SuffStats with group means, centered level matrices, Gram blocks,
        covariate/response crosses, and response quadratics.
    """
    g, h, m = design.g, design.h, design.m
    covariates.check_shapes(design)
    y = np.asarray(y, dtype=float)
    if y.shape != (g, h, m):
        if y.size != design.n:
            raise DimensionMismatch(f"y has {y.size} values, design needs {design.n}")
        y = y.reshape(g, h, m)

    ybar_cell = y.mean(axis=2)
    ybar_row = ybar_cell.mean(axis=1)
    ybar_col = ybar_cell.mean(axis=0)
    ybar = float(ybar_row.mean())

    xa, xb, xab, xw = covariates.row, covariates.col, covariates.inter, covariates.within
    xbar_a = xa.mean(axis=0) if covariates.p_a else np.zeros(0)
    xbar_b = xb.mean(axis=0) if covariates.p_b else np.zeros(0)
    xbar_ab = xab.mean(axis=(0, 1)) if covariates.p_ab else np.zeros(0)
    xbar_w = xw.mean(axis=(0, 1, 2)) if covariates.p_w else np.zeros(0)

    # group means of the finer-level covariates
    xab_row = xab.mean(axis=1)          # (g, p_ab)
    xab_col = xab.mean(axis=0)          # (h, p_ab)
    xw_cell = xw.mean(axis=2)           # (g, h, p_w)
    xw_row = xw_cell.mean(axis=1)       # (g, p_w)
    xw_col = xw_cell.mean(axis=0)       # (h, p_w)

    ua = np.hstack([xa - xbar_a, xab_row - xbar_ab, xw_row - xbar_w])
    ub = np.hstack([xb - xbar_b, xab_col - xbar_ab, xw_col - xbar_w])

    def double_center(cell_means):
        rm = cell_means.mean(axis=1, keepdims=True)
        cm = cell_means.mean(axis=0, keepdims=True)
        return cell_means - rm - cm + cell_means.mean(axis=(0, 1))

    uab = np.concatenate(
        [double_center(xab), double_center(xw_cell)], axis=2
    ).reshape(g * h, covariates.p_ab + covariates.p_w)
    uw = (xw - xw_cell[:, :, None, :]).reshape(design.n, covariates.p_w)

    ya = ybar_row - ybar
    yb = ybar_col - ybar
    yab = (
        ybar_cell - ybar_row[:, None] - ybar_col[None, :] + ybar
    ).reshape(g * h)
    yw = (y - ybar_cell[:, :, None]).reshape(design.n)

    return SuffStats(
        design=design,
        p_a=covariates.p_a,
        p_b=covariates.p_b,
        p_ab=covariates.p_ab,
        p_w=covariates.p_w,
        ybar=ybar,
        xbar_a=xbar_a,
        xbar_b=xbar_b,
        xbar_ab=xbar_ab,
        xbar_w=xbar_w,
        ybar_row=ybar_row,
        ybar_col=ybar_col,
        ybar_cell=ybar_cell,
        ua=ua,
        ub=ub,
        uab=uab,
        ya=ya,
        yb=yb,
        yab=yab,
        sa=ua.T @ ua,
        sb=ub.T @ ub,
        sab=uab.T @ uab,
        sw=uw.T @ uw,
        sa_xy=ua.T @ ya,
        sb_xy=ub.T @ yb,
        sab_xy=uab.T @ yab,
        sw_xy=uw.T @ yw,
        qa=float(ya @ ya),
        qb=float(yb @ yb),
        qab=float(yab @ yab),
        qw=float(yw @ yw),
    )
