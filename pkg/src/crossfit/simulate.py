"""Coverage studies: generate, fit, and summarise many replicates.

Each replicate draws one covariate surface and one set of random effects,
builds the response from the orthogonal covariate parts,

    y = xbar xi0 + rowpart xi1 + colpart xi2 + interpart xi3
        + withinpart xi4 + alpha + beta + gamma + e,

fits the model, and records whether each parameter's confidence interval
covers its true value.  Replicate r always uses the RNG stream
SeedSequence(entropy=seed, spawn_key=(r,)) with a fixed draw order, and
results are reduced in replicate order, so reports are bit-identical no
matter how many worker processes run (CROSSFIT_THREADS).

Non-normal effect sources use a two-component normal mixture with mean
zero and the declared variance (one fixed N(0.5, 1) component with weight
0.3; the second component's mean and variance are solved from the
constraints).
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Optional

import numpy as np

from .covariance import VarianceComponents
from .design import CovariateSet, Design, decompose_covariate
from .design import compress
from .errors import (
    ConfigError,
    CrossfitError,
    InvalidMixture,
    TooManyFailures,
)
from .estimate import fit_ml
from .inference import confidence_intervals, fhat, fit_residuals, residual_moments
from .reml import fit_reml

SOURCES = ("alpha", "beta", "gamma", "e")
DISTRIBUTIONS = ("normal", "mixture")

# fixed first mixture component: N(MIX_MU1, MIX_V1) with weight MIX_W
MIX_W = 0.3
MIX_MU1 = 0.5
MIX_V1 = 1.0

# share of failed replicates beyond which a study aborts
MAX_FAILURE_RATE = 0.05

PARAM_NAMES = (
    "xi0", "xi1", "sigma_a2", "xi2", "sigma_b2",
    "xi3", "sigma_g2", "xi4", "sigma_e2",
)

THREADS_ENV = "CROSSFIT_THREADS"


@dataclass
class SimConfig:
    """One simulation cell: design size, truth, laws, and bookkeeping."""

    g: int
    h: int
    m: int
    replicates: int = 1000
    seed: int = 0
    xi_true: tuple = (0.0, 5.0, 7.0, 3.0, 4.0)
    variances: VarianceComponents = field(
        default_factory=lambda: VarianceComponents(9.0, 49.0, 36.0, 81.0)
    )
    dists: dict = field(default_factory=lambda: {s: "normal" for s in SOURCES})
    method: str = "reml"
    level: float = 0.95

    def validate(self) -> None:
        if not (isinstance(self.g, int) and self.g >= 2):
            raise ConfigError(f"g must be an integer >= 2, got {self.g!r}")
        if not (isinstance(self.h, int) and self.h >= 2):
            raise ConfigError(f"h must be an integer >= 2, got {self.h!r}")
        if not (isinstance(self.m, int) and self.m >= 2):
            raise ConfigError(f"m must be an integer >= 2, got {self.m!r}")
        if not (isinstance(self.replicates, int) and self.replicates >= 1):
            raise ConfigError(f"replicates must be a positive integer, got {self.replicates!r}")
        if not (isinstance(self.seed, int) and self.seed >= 0):
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if len(self.xi_true) != 5:
            raise ConfigError("xi_true needs exactly 5 values (intercept + 4 slopes)")
        if self.method not in ("ml", "reml"):
            raise ConfigError(f"method must be 'ml' or 'reml', got {self.method!r}")
        if not 0.0 < self.level < 1.0:
            raise ConfigError(f"level must be in (0, 1), got {self.level!r}")
        for src, dist in self.dists.items():
            if src not in SOURCES:
                raise ConfigError(f"unknown effect source {src!r} in dists")
            if dist not in DISTRIBUTIONS:
                raise ConfigError(f"unknown distribution {dist!r} for {src!r}")
        for src, dist in self.dists.items():
            if dist == "mixture":
                mixture_second_component(getattr_variance(self.variances, src))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["xi_true"] = list(self.xi_true)
        d["variances"] = {
            "sigma_a2": self.variances.sigma_a2,
            "sigma_b2": self.variances.sigma_b2,
            "sigma_g2": self.variances.sigma_g2,
            "sigma_e2": self.variances.sigma_e2,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {
            "g", "h", "m", "replicates", "seed", "xi_true",
            "variances", "dists", "method", "level",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "xi_true" in kwargs:
            kwargs["xi_true"] = tuple(float(v) for v in kwargs["xi_true"])
        if "variances" in kwargs:
            v = kwargs["variances"]
            if isinstance(v, dict):
                try:
                    v = VarianceComponents(
                        float(v["sigma_a2"]), float(v["sigma_b2"]),
                        float(v["sigma_g2"]), float(v["sigma_e2"]),
                    )
                except KeyError as exc:
                    raise ConfigError(f"variances is missing {exc}") from exc
            elif not isinstance(v, VarianceComponents):
                v = VarianceComponents(*(float(x) for x in v))
            kwargs["variances"] = v
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def getattr_variance(variances: VarianceComponents, source: str) -> float:
    return {
        "alpha": variances.sigma_a2,
        "beta": variances.sigma_b2,
        "gamma": variances.sigma_g2,
        "e": variances.sigma_e2,
    }[source]


def mixture_second_component(sigma2: float) -> tuple[float, float]:
    """Mean and variance of the free mixture component for a target variance."""
    mu2 = -MIX_W * MIX_MU1 / (1.0 - MIX_W)
    v2 = (sigma2 - MIX_W * (MIX_V1 + MIX_MU1**2) - (1.0 - MIX_W) * mu2**2) / (
        1.0 - MIX_W
    )
    if v2 <= 0.0:
        raise InvalidMixture(
            f"target variance {sigma2} too small for the fixed mixture component"
        )
    return mu2, v2


def draw_effect(rng: np.random.Generator, size, sigma2: float, dist: str) -> np.ndarray:
    """Draw mean-zero effects with the requested variance and law."""
    if dist == "normal":
        return rng.normal(0.0, np.sqrt(sigma2), size=size)
    mu2, v2 = mixture_second_component(sigma2)
    u = rng.random(size=size)
    z = rng.normal(size=size)
    first = u < MIX_W
    return np.where(first, MIX_MU1 + np.sqrt(MIX_V1) * z, mu2 + np.sqrt(v2) * z)


def gen_covariate(design: Design, rng: np.random.Generator) -> np.ndarray:
    """Covariate surface 4 + t_i + 1.5 u_j + 2 v_ij + 3 w_ijk, all iid N(0,1)."""
    g, h, m = design.g, design.h, design.m
    t = rng.normal(size=g)
    u = rng.normal(size=h)
    v = rng.normal(size=(g, h))
    w = rng.normal(size=(g, h, m))
    return 4.0 + t[:, None, None] + 1.5 * u[None, :, None] + 2.0 * v[:, :, None] + 3.0 * w


def gen_effects(design: Design, variances: VarianceComponents, dists: dict,
                rng: np.random.Generator):
    """Draw the four random-effect arrays in a fixed order."""
    g, h, m = design.g, design.h, design.m
    alpha = draw_effect(rng, g, variances.sigma_a2, dists.get("alpha", "normal"))
    beta = draw_effect(rng, h, variances.sigma_b2, dists.get("beta", "normal"))
    gamma = draw_effect(rng, (g, h), variances.sigma_g2, dists.get("gamma", "normal"))
    e = draw_effect(rng, (g, h, m), variances.sigma_e2, dists.get("e", "normal"))
    return alpha, beta, gamma, e


def replicate_rng(seed: int, r: int) -> np.random.Generator:
    """The RNG stream for replicate r: independent of thread scheduling."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(r,)))


def _run_replicate(config: SimConfig, r: int) -> dict:
    design = Design(config.g, config.h, config.m)
    rng = replicate_rng(config.seed, r)
    x = gen_covariate(design, rng)
    alpha, beta, gamma, e = gen_effects(design, config.variances, config.dists, rng)
    parts = decompose_covariate(x, design)
    xi = config.xi_true
    y = (
        parts.mean * xi[0]
        + parts.row[:, None, None] * xi[1]
        + parts.col[None, :, None] * xi[2]
        + parts.inter[:, :, None] * xi[3]
        + parts.within * xi[4]
        + alpha[:, None, None]
        + beta[None, :, None]
        + gamma[:, :, None]
        + e
    )
    cov = CovariateSet(
        row=parts.row[:, None],
        col=parts.col[:, None],
        inter=parts.inter[:, :, None],
        within=parts.within[:, :, :, None],
    )
    stats = compress(design, cov, y)
    fitter = fit_reml if config.method == "reml" else fit_ml
    try:
        fit = fitter(stats)
    except CrossfitError as exc:
        return {"ok": False, "replicate": r, "error": f"{type(exc).__name__}: {exc}"}

    residuals = fit_residuals(y, cov, fit.params, design)
    moments = residual_moments(residuals, design)
    cov_est = fhat(fit, moments, on_boundary="ignore")
    table = confidence_intervals(fit, cov_est, level=config.level)

    v = config.variances
    truth = np.array([
        parts.mean * xi[0], xi[1], v.sigma_a2, xi[2], v.sigma_b2,
        xi[3], v.sigma_g2, xi[4], v.sigma_e2,
    ])
    contains, length, var_length, degenerate = [], [], [], []
    for row, tv in zip(table.rows, truth):
        if row.degenerate:
            contains.append(False)
            degenerate.append(True)
            length.append(np.nan)
            var_length.append(np.nan)
        else:
            contains.append(bool(row.lower <= tv <= row.upper))
            degenerate.append(False)
            if row.sd_lower is not None:
                length.append(row.sd_upper - row.sd_lower)
                var_length.append(row.upper - row.lower)
            else:
                length.append(row.upper - row.lower)
                var_length.append(np.nan)
    return {
        "ok": True,
        "replicate": r,
        "omega": [float(w) for w in fit.params.omega()],
        "contains": contains,
        "length": length,
        "var_length": var_length,
        "degenerate": degenerate,
        "boundary": list(fit.boundary),
        "iterations": fit.iterations,
    }


@dataclass
class ParamSummary:
    name: str
    truth: float
    coverage: float
    mc_se: float          # binomial Monte Carlo standard error of coverage
    mean_length: float    # slope scale, or sigma scale for variance rows
    mean_var_length: Optional[float]  # sigma^2 scale (variance rows only)
    n_degenerate: int
    n_used: int


@dataclass
class SimReport:
    config: SimConfig
    summaries: list
    n_replicates: int
    n_ok: int
    n_failed: int
    failures: list
    n_boundary: int
    elapsed_seconds: float
    threads: int

    def summary(self, name: str) -> ParamSummary:
        for s in self.summaries:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "schema_version": "1",
            "config": self.config.to_dict(),
            "n_replicates": self.n_replicates,
            "n_ok": self.n_ok,
            "n_failed": self.n_failed,
            "failures": self.failures[:20],
            "n_boundary": self.n_boundary,
            "threads": self.threads,
            "elapsed_seconds": self.elapsed_seconds,
            "parameters": [
                {
                    "name": s.name,
                    "truth": s.truth,
                    "coverage": s.coverage,
                    "mc_se": s.mc_se,
                    "mean_length": s.mean_length,
                    "mean_var_length": s.mean_var_length,
                    "n_degenerate": s.n_degenerate,
                    "n_used": s.n_used,
                }
                for s in self.summaries
            ],
        }

    def csv_rows(self) -> list:
        """Rows Estimate,g,h,m,Cvge,Len mirroring the report tables."""
        out = []
        for s in self.summaries:
            out.append(
                f"{s.name},{self.config.g},{self.config.h},{self.config.m},"
                f"{s.coverage:.4f},{s.mean_length:.4f}"
            )
        return out


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    return max(1, workers)


def run_study(config: SimConfig) -> SimReport:
    """Run every replicate of one cell and aggregate coverage and lengths.

    Replicates that fail to fit are excluded and counted; the study aborts
    with TooManyFailures if more than MAX_FAILURE_RATE of them fail.
    """
    config.validate()
    start = time.perf_counter()
    workers = thread_count()
    reps = range(config.replicates)
    task = partial(_run_replicate, config)
    if workers > 1 and config.replicates > 1:
        chunk = max(1, config.replicates // (workers * 8))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(task, reps, chunksize=chunk))
    else:
        results = [task(r) for r in reps]

    ok = [res for res in results if res["ok"]]
    failures = [(res["replicate"], res["error"]) for res in results if not res["ok"]]
    n_failed = len(failures)
    if n_failed > MAX_FAILURE_RATE * config.replicates:
        raise TooManyFailures(
            f"{n_failed}/{config.replicates} replicates failed to fit "
            f"(tolerated share {MAX_FAILURE_RATE:.0%}); first failures: "
            f"{failures[:5]}"
        )

    v = config.variances
    xi = config.xi_true
    truths = [
        xi[0], xi[1], v.sigma_a2, xi[2], v.sigma_b2,
        xi[3], v.sigma_g2, xi[4], v.sigma_e2,
    ]
    summaries = []
    n_used = len(ok)
    for idx, name in enumerate(PARAM_NAMES):
        if n_used == 0:
            summaries.append(
                ParamSummary(name, truths[idx], np.nan, np.nan, np.nan, None, 0, 0)
            )
            continue
        hits = np.array([res["contains"][idx] for res in ok], dtype=float)
        lens = np.array([res["length"][idx] for res in ok], dtype=float)
        vlens = np.array([res["var_length"][idx] for res in ok], dtype=float)
        degen = sum(res["degenerate"][idx] for res in ok)
        coverage = float(hits.mean())
        mc_se = float(np.sqrt(coverage * (1.0 - coverage) / n_used))
        good = ~np.isnan(lens)
        mean_len = float(lens[good].mean()) if good.any() else np.nan
        goodv = ~np.isnan(vlens)
        mean_vlen = float(vlens[goodv].mean()) if goodv.any() else None
        summaries.append(
            ParamSummary(
                name=name,
                truth=float(truths[idx]),
                coverage=coverage,
                mc_se=mc_se,
                mean_length=mean_len,
                mean_var_length=mean_vlen,
                n_degenerate=int(degen),
                n_used=n_used,
            )
        )
    n_boundary = sum(1 for res in ok if res["boundary"])
    return SimReport(
        config=config,
        summaries=summaries,
        n_replicates=config.replicates,
        n_ok=n_used,
        n_failed=n_failed,
        failures=failures,
        n_boundary=n_boundary,
        elapsed_seconds=time.perf_counter() - start,
        threads=workers,
    )
