"""Variance estimation, tests, and diagnostics for the estimators.

Influence-function variances and normal-approximation intervals are the
default; a nonparametric bootstrap that refits all working models per
resample is available as a cross-check. Also here: the specification test
for equal control-outcome means across data sources, overlap diagnostics,
and the bias bound under a source-specific control-mean shift.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .dataset import OUTCOME_BINARY, CompositeDataset
from .errors import ConfigError, EmptyCell, ReplicateFailure
from .estimators import DENOM_EPS, Estimate, IFVector
from .nuisance import (
    IDENTITY,
    LOGIT,
    ModelSpec,
    NuisanceSet,
    expit,
    fit_glm,
    trimmed_propensity,
)

TWO_SIDED = "two_sided"
GREATER = "greater"
LESS = "less"
SIDEDNESS = (TWO_SIDED, GREATER, LESS)

VARIANCE_IF = "influence_function"
VARIANCE_BOOTSTRAP = "bootstrap"


@dataclass
class InferenceResult:
    estimate: Estimate
    variance: float
    se: float
    ci: tuple[float, float]
    level: float
    p_value: float
    null_value: float
    sidedness: str
    variance_method: str

    def to_dict(self) -> dict:
        out = self.estimate.to_dict()
        out.update(
            {
                "variance": self.variance,
                "se": self.se,
                "ci": [self.ci[0], self.ci[1]],
                "level": self.level,
                "p_value": self.p_value,
                "null_value": self.null_value,
                "sidedness": self.sidedness,
                "variance_method": self.variance_method,
            }
        )
        return out


# --------------------------- IF variance ------------------------------


def if_variance(ifv: IFVector) -> float:
    """Estimator variance from mean-zero influence values: var(IF)/n."""
    values = np.asarray(ifv.values, dtype=float)
    n = values.shape[0]
    if n < 2:
        return 0.0
    return float(np.var(values, ddof=1) / n)


def test(
    est: Estimate,
    variance: float,
    null_value: float = 0.0,
    sidedness: str = TWO_SIDED,
    level: float = 0.95,
    variance_method: str = VARIANCE_IF,
) -> InferenceResult:
    """Normal-approximation z-test and confidence interval."""
    if sidedness not in SIDEDNESS:
        raise ConfigError(f"unknown sidedness {sidedness!r}")
    if not 0.0 < level < 1.0:
        raise ConfigError(f"level must be in (0,1), got {level}")
    if variance < 0:
        raise ConfigError(f"negative variance {variance}")
    se = float(np.sqrt(variance))
    if se == 0.0:
        z = np.inf if est.point > null_value else (-np.inf if est.point < null_value else 0.0)
    else:
        z = (est.point - null_value) / se
    if sidedness == GREATER:
        p = float(stats.norm.sf(z))
    elif sidedness == LESS:
        p = float(stats.norm.cdf(z))
    else:
        p = float(2.0 * stats.norm.sf(abs(z)))
    crit = float(stats.norm.ppf(0.5 + level / 2.0))
    ci = (est.point - crit * se, est.point + crit * se)
    return InferenceResult(
        estimate=est,
        variance=variance,
        se=se,
        ci=ci,
        level=level,
        p_value=p,
        null_value=null_value,
        sidedness=sidedness,
        variance_method=variance_method,
    )


# ----------------------------- bootstrap ------------------------------


@dataclass
class BootstrapResult:
    variance: float
    ci: tuple[float, float]
    replicates: int
    failures: int
    points: np.ndarray

    def to_dict(self) -> dict:
        return {
            "variance": self.variance,
            "ci": [self.ci[0], self.ci[1]],
            "replicates": self.replicates,
            "failures": self.failures,
        }


def _canonical_order(ds: CompositeDataset) -> np.ndarray:
    keys = [ds.x[:, j] for j in range(ds.k - 1, -1, -1)]
    keys.extend([ds.y, ds.t, ds.d])
    return np.lexsort(tuple(keys))


def _bootstrap_one(args):
    ds, estimator_fn, seed, rep, stratified = args
    rng = np.random.default_rng([seed, rep])
    n = ds.n
    if stratified:
        idx1 = np.where(ds.d == 1)[0]
        idx0 = np.where(ds.d == 0)[0]
        take1 = idx1[rng.integers(0, idx1.size, idx1.size)]
        take0 = idx0[rng.integers(0, idx0.size, idx0.size)] if idx0.size else np.array([], dtype=int)
        idx = np.concatenate([take1, take0])
    else:
        idx = rng.integers(0, n, n)
    try:
        return float(estimator_fn(ds.take(idx))), None
    except Exception as exc:  # noqa: BLE001 - failures are counted, not raised
        return None, f"{type(exc).__name__}: {exc}"


def bootstrap_variance(
    ds: CompositeDataset,
    estimator_fn: Callable[[CompositeDataset], float],
    n_replicates: int = 500,
    seed: int = 0,
    level: float = 0.95,
    stratified: bool = False,
    jobs: int = 1,
    max_failure_rate: float = 0.05,
) -> BootstrapResult:
    """Nonparametric bootstrap that refits everything per resample.

    Rows are resampled i.i.d. from a canonical ordering of the dataset, so
    the result depends only on the data values and the seed, never on row
    order or on the number of worker processes. Replicate r uses the RNG
    stream (seed, r). At least 100 replicates are recommended.
    """
    if n_replicates < 2:
        raise ConfigError("bootstrap needs at least 2 replicates; 100+ recommended")
    base = ds.take(_canonical_order(ds))
    tasks = [(base, estimator_fn, seed, rep, stratified) for rep in range(n_replicates)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_bootstrap_one, tasks, chunksize=16))
    else:
        outcomes = [_bootstrap_one(task) for task in tasks]
    points = np.array([p for p, _ in outcomes if p is not None], dtype=float)
    failures = n_replicates - points.size
    if failures > max_failure_rate * n_replicates:
        raise ReplicateFailure(
            f"{failures}/{n_replicates} bootstrap replicates failed",
            failures=failures,
            messages=[m for _, m in outcomes if m is not None][:5],
        )
    variance = float(np.var(points, ddof=1)) if points.size > 1 else 0.0
    lo = float(np.quantile(points, (1.0 - level) / 2.0))
    hi = float(np.quantile(points, (1.0 + level) / 2.0))
    return BootstrapResult(
        variance=variance,
        ci=(lo, hi),
        replicates=int(points.size),
        failures=int(failures),
        points=points,
    )


# ----------------------- exchangeability test -------------------------


@dataclass
class ExchangeabilityTest:
    statistic: float
    df: int
    p_value: float
    coefficients_tested: list[str]
    source_main_effect: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "df": self.df,
            "p_value": self.p_value,
            "coefficients_tested": self.coefficients_tested,
            "source_main_effect": self.source_main_effect,
        }


def test_mean_exchangeability(ds: CompositeDataset, spec: ModelSpec | None = None) -> ExchangeabilityTest:
    """Wald test of source-by-covariate interactions on control outcomes.

    Fits one outcome model on all control rows with source main effect and
    source-covariate interactions, then tests the interaction block. Equal
    control-outcome means across sources given covariates imply all
    interaction coefficients are zero. The source main effect is reported
    separately but not included in the test.
    """
    controls = ds.t == 0
    d = ds.d[controls]
    if not (d == 1).any() or not (d == 0).any():
        raise EmptyCell("exchangeability test needs control rows from both sources")
    family = LOGIT if ds.outcome_kind == OUTCOME_BINARY else IDENTITY
    if spec is None:
        spec = ModelSpec.linear_in(ds.k, family)
    x = ds.x[controls]
    y = ds.y[controls]
    base_cols = [term.apply(x) for term in spec.terms]
    term_names = [term.name(ds.covariate_names) for term in spec.terms]
    cols = [np.ones(x.shape[0])] + base_cols + [d.astype(float)]
    names = ["intercept"] + term_names + ["source"]
    inter_slice = slice(len(cols), len(cols) + len(base_cols))
    cols.extend(d * col for col in base_cols)
    names.extend(f"source:{name}" for name in term_names)
    design = np.column_stack(cols)
    fit = fit_glm(design, y, family, column_names=names)

    # model-based covariance of the coefficients
    if family == LOGIT:
        mu = expit(design @ fit.coef)
        w = mu * (1.0 - mu)
        info = design.T @ (design * w[:, None])
        cov = np.linalg.inv(info)
    else:
        resid = y - design @ fit.coef
        dof = max(design.shape[0] - design.shape[1], 1)
        sigma2 = float(resid @ resid) / dof
        cov = sigma2 * np.linalg.inv(design.T @ design)

    theta = fit.coef[inter_slice]
    block = cov[inter_slice, inter_slice]
    statistic = float(theta @ np.linalg.solve(block, theta))
    df = theta.shape[0]
    p_value = float(stats.chi2.sf(statistic, df))
    main_idx = len(base_cols) + 1
    main_se = float(np.sqrt(cov[main_idx, main_idx]))
    main = {
        "estimate": float(fit.coef[main_idx]),
        "se": main_se,
        "p_value": float(2.0 * stats.norm.sf(abs(fit.coef[main_idx]) / main_se))
        if main_se > 0
        else 1.0,
    }
    return ExchangeabilityTest(
        statistic=statistic,
        df=df,
        p_value=p_value,
        coefficients_tested=names[inter_slice],
        source_main_effect=main,
    )


# ----------------------------- bias bound -----------------------------


@dataclass
class BiasBound:
    lambda_estimate: float | None
    lambda_abs_bound: float
    b_bound: float
    mean_weight: float

    def to_dict(self) -> dict:
        return {
            "lambda_estimate": self.lambda_estimate,
            "lambda_abs_bound": self.lambda_abs_bound,
            "b_bound": self.b_bound,
            "mean_weight": self.mean_weight,
        }


def bias_bound(
    ds: CompositeDataset,
    nuis: NuisanceSet,
    b: Callable[[np.ndarray], np.ndarray] | None = None,
    bound: float | None = None,
) -> BiasBound:
    """Asymptotic bias of the borrowing tau estimator under a control shift.

    ``b(x)`` is the source difference in conditional control-outcome means.
    The bias is the mean of w(x) * b(x) with w the borrowing weight; if only
    a magnitude bound on b is supplied (or derived from a supplied b), the
    reported absolute bound is bound * mean(w), which never exceeds the
    bound itself.
    """
    if b is None and bound is None:
        raise ConfigError("bias_bound needs b(x), a bound, or both")
    if nuis.pi is None:
        raise EmptyCell("bias bound needs a fitted selection propensity")
    pi, _ = trimmed_propensity(nuis.pi, ds.x)
    if nuis.p is not None:
        p, _ = trimmed_propensity(nuis.p, ds.x)
    else:
        p = np.ones(ds.n)
    r = nuis.r.predict_r(ds.x)
    denom = np.maximum(pi * (1.0 - p) + (1.0 - pi) * r, DENOM_EPS)
    weight = (pi / ds.q_hat) * ((1.0 - pi) * r / denom)
    mean_weight = float(np.mean(weight))
    lambda_estimate = None
    if b is not None:
        b_values = np.asarray(b(ds.x), dtype=float)
        lambda_estimate = float(np.mean(weight * b_values))
        if bound is None:
            bound = float(np.max(np.abs(b_values)))
    return BiasBound(
        lambda_estimate=lambda_estimate,
        lambda_abs_bound=float(bound * mean_weight),
        b_bound=float(bound),
        mean_weight=mean_weight,
    )


# ------------------------- overlap diagnostics ------------------------


@dataclass
class OverlapReport:
    summaries: dict
    trim_counts: dict
    flagged_rows: list[int]
    notes: list[str]

    def to_dict(self) -> dict:
        return {
            "summaries": self.summaries,
            "trim_counts": self.trim_counts,
            "flagged_rows": self.flagged_rows,
            "notes": self.notes,
        }


def _five_numbers(values: np.ndarray) -> dict:
    qs = np.quantile(values, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {
        "min": float(qs[0]),
        "q25": float(qs[1]),
        "median": float(qs[2]),
        "q75": float(qs[3]),
        "max": float(qs[4]),
    }


def overlap_diagnostics(ds: CompositeDataset, nuis: NuisanceSet) -> OverlapReport:
    """Distribution of the fitted propensities and weight denominators.

    Flags rows where the product of the treatment and selection propensities
    approaches one, the edge of the relaxed overlap condition.
    """
    notes: list[str] = []
    summaries: dict = {}
    trim_counts: dict = {}
    if ds.n2 == 0 or nuis.pi is None:
        notes.append(
            "no external rows: selection propensity is identically one; "
            "only trial-based estimation is available"
        )
        pi = np.ones(ds.n)
        trim_counts["pi"] = 0
    else:
        pi, trims_pi = trimmed_propensity(nuis.pi, ds.x)
        summaries["selection_propensity"] = _five_numbers(pi)
        trim_counts["pi"] = trims_pi
    if nuis.p is not None:
        p, trims_p = trimmed_propensity(nuis.p, ds.x)
        trim_counts["p"] = trims_p
    else:
        p = np.ones(ds.n)
        trim_counts["p"] = 0
        notes.append("treated-only design: treatment propensity fixed at one")
    summaries["treatment_propensity"] = _five_numbers(p)
    product = pi * p
    summaries["propensity_product"] = _five_numbers(product)
    r = nuis.r.predict_r(ds.x)
    denom = pi * (1.0 - p) + (1.0 - pi) * r
    summaries["weight_denominator"] = _five_numbers(denom)
    trim_counts["denominator_floored"] = int(np.sum(denom < DENOM_EPS))
    flagged = np.where(product > 1.0 - DENOM_EPS)[0]
    if flagged.size:
        notes.append(
            f"{flagged.size} rows violate the relaxed overlap condition "
            "(propensity product near one)"
        )
    return OverlapReport(
        summaries=summaries,
        trim_counts=trim_counts,
        flagged_rows=[int(i) for i in flagged],
        notes=notes,
    )
