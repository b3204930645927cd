"""Synthetic data generation and the Monte Carlo verification engine.

Four scenarios toggle whether the outcome-mean functions and the propensity
functions are linear in the observed covariates (so the analyst's raw-x
working models are correct) or in standardized nonlinear distortions of
them (so the same working models are misspecified):

    i   both sets of working models correct
    ii  outcome models correct, propensity models misspecified
    iii propensity models correct, outcome models misspecified
    iv  both sets misspecified

Control-outcome noise is heteroscedastic with different log-linear variance
functions per data source, so the variance ratio is a non-constant
log-linear function of x1. Control-outcome means never depend on the data
source (unless an engagement shift is injected), so mean exchangeability
holds by construction.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .dataset import OUTCOME_CONTINUOUS, CompositeDataset
from .errors import ConfigError, EcborrowError, ReplicateFailure
from .estimators import (
    METHOD_BASELINE,
    METHOD_FULL,
    METHOD_TRIAL,
    efficiency_gain_analytic,
    estimate_psi,
    estimate_tau_full,
    estimate_tau_trial,
    estimate_xi,
    influence_values,
)
from .inference import if_variance
from .nuisance import (
    IDENTITY,
    LOGIT,
    RATIO_CONSTANT,
    RATIO_LOGLINEAR,
    ModelSpec,
    NuisanceSet,
    expit,
    fit_outcome_models,
    fit_selection_ps,
    fit_treatment_ps,
    fit_variance_ratio,
)

SCENARIOS = ("i", "ii", "iii", "iv")

# Moments of the distorted features under the standard normal design,
# used to standardize them so the selection and treatment rates stay near
# one half in every scenario. Feature 1 is exp(x1/2) + x2^2 - 1 with mean
# e^{1/8} and variance (e^{1/2} - e^{1/4}) + 2; feature 2 is
# x2/(1+e^{x1}) + 10 - (x1^2 - 1) with mean 10 and variance
# E[(1+e^{x1})^{-2}] + 2, where E[(1+e^{x1})^{-2}] is fixed by quadrature.
_INV_SQ_LOGISTIC = 0.29337903585809294  # E[(1+e^Z)^{-2}], Z standard normal
_D1_MEAN = float(np.exp(0.125))
_D1_SD = float(np.sqrt(np.exp(0.5) - np.exp(0.25) + 2.0))
_D2_MEAN = 10.0
_D2_SD = float(np.sqrt(_INV_SQ_LOGISTIC + 2.0))

ORACLE_SEED = 20_240_601
ORACLE_DRAWS = 10_000_000
ORACLE_CHUNKS = 20
DRAW_RETENTION_CAP = 1_000_000

ALL_ESTIMATORS = (
    "tau_full",
    "tau_full_const",
    "tau_trial",
    "psi_full",
    "psi_base",
    "xi_full",
    "xi_base",
)

_ESTIMATOR_META = {
    "tau_full": ("tau", METHOD_FULL, RATIO_LOGLINEAR),
    "tau_full_const": ("tau", METHOD_FULL, RATIO_CONSTANT),
    "tau_trial": ("tau", METHOD_TRIAL, None),
    "psi_full": ("psi", METHOD_FULL, RATIO_LOGLINEAR),
    "psi_base": ("psi", METHOD_BASELINE, None),
    "xi_full": ("xi", METHOD_FULL, RATIO_LOGLINEAR),
    "xi_base": ("xi", METHOD_BASELINE, None),
}


@dataclass(frozen=True)
class ScenarioConfig:
    """Data-generating truth plus which working models the analyst gets right."""

    scenario: str = "i"
    n: int = 1000
    outcome_kind: str = OUTCOME_CONTINUOUS
    selection_coefs: tuple[float, float, float] = (0.3, 0.4, -0.4)
    treatment_coefs: tuple[float, float, float] = (0.0, 0.2, 0.2)
    control_mean_coefs: tuple[float, float, float] = (1.0, 1.0, 0.5)
    effect_coefs: tuple[float, float, float] = (1.0, 0.5, 0.0)
    log_var_trial: tuple[float, float] = (0.2, 0.2)
    log_var_external: tuple[float, float] = (0.4, -0.2)
    engagement_coefs: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.n < 10:
            raise ConfigError("scenario sample size must be at least 10")
        if self.outcome_kind != OUTCOME_CONTINUOUS:
            raise ConfigError("the scenario study uses a continuous response")

    @property
    def outcome_distorted(self) -> bool:
        return self.scenario in ("iii", "iv")

    @property
    def propensity_distorted(self) -> bool:
        return self.scenario in ("ii", "iv")

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "n": self.n,
            "outcome_kind": self.outcome_kind,
            "selection_coefs": list(self.selection_coefs),
            "treatment_coefs": list(self.treatment_coefs),
            "control_mean_coefs": list(self.control_mean_coefs),
            "effect_coefs": list(self.effect_coefs),
            "log_var_trial": list(self.log_var_trial),
            "log_var_external": list(self.log_var_external),
            "engagement_coefs": list(self.engagement_coefs),
        }


def distort(x: np.ndarray) -> np.ndarray:
    """Standardized nonlinear features used by the misspecified arms.

    Exponential, ratio, and quadratic components keep the features poorly
    approximated by anything linear in x, so raw-x working models stay
    meaningfully wrong in the distorted arms.
    """
    w1 = np.exp(x[:, 0] / 2.0) + x[:, 1] ** 2 - 1.0
    w2 = x[:, 1] / (1.0 + np.exp(x[:, 0])) + 10.0 - (x[:, 0] ** 2 - 1.0)
    return np.column_stack([(w1 - _D1_MEAN) / _D1_SD, (w2 - _D2_MEAN) / _D2_SD])


def _linear(coefs: tuple[float, float, float], z: np.ndarray) -> np.ndarray:
    return coefs[0] + coefs[1] * z[:, 0] + coefs[2] * z[:, 1]


@dataclass
class TruthFrame:
    """Row-level potential outcomes, kept out of the analyst-facing dataset."""

    y0: np.ndarray
    y1: np.ndarray


def generate(cfg: ScenarioConfig, seed) -> tuple[CompositeDataset, TruthFrame]:
    """Draw one synthetic composite dataset plus its hidden truth."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((cfg.n, 2))
    z_ps = distort(x) if cfg.propensity_distorted else x
    z_out = distort(x) if cfg.outcome_distorted else x

    pi_true = expit(_linear(cfg.selection_coefs, z_ps))
    d = (rng.random(cfg.n) < pi_true).astype(int)
    p_true = expit(_linear(cfg.treatment_coefs, z_ps))
    t = (d == 1) & (rng.random(cfg.n) < p_true)
    t = t.astype(int)

    sd = np.where(
        d == 1,
        np.exp(0.5 * (cfg.log_var_trial[0] + cfg.log_var_trial[1] * x[:, 0])),
        np.exp(0.5 * (cfg.log_var_external[0] + cfg.log_var_external[1] * x[:, 0])),
    )
    noise = rng.standard_normal(cfg.n) * sd
    engagement = _linear(cfg.engagement_coefs, x)
    y0 = _linear(cfg.control_mean_coefs, z_out) + d * engagement + noise
    y1 = y0 + _linear(cfg.effect_coefs, z_out)
    y = np.where(t == 1, y1, y0)

    ds = CompositeDataset(
        y, x, t, d, covariate_names=("x1", "x2"), outcome_kind=OUTCOME_CONTINUOUS
    )
    return ds, TruthFrame(y0=y0, y1=y1)


# ----------------------------- oracle truth ----------------------------


@dataclass(frozen=True)
class TrueEffects:
    tau: float
    psi: float
    xi: float
    q: float
    se_tau: float
    se_psi: float
    se_xi: float
    draws: int

    def by_estimand(self) -> dict:
        return {"tau": self.tau, "psi": self.psi, "xi": self.xi}

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "psi": self.psi,
            "xi": self.xi,
            "q": self.q,
            "se_tau": self.se_tau,
            "se_psi": self.se_psi,
            "se_xi": self.se_xi,
            "draws": self.draws,
        }


_TRUTH_CACHE: dict = {}


def _truth_key(cfg: ScenarioConfig) -> tuple:
    # engagement and n do not move the potential-outcome contrasts
    return (
        cfg.scenario,
        cfg.selection_coefs,
        cfg.treatment_coefs,
        cfg.control_mean_coefs,
        cfg.effect_coefs,
    )


def true_effects(cfg: ScenarioConfig, draws: int = ORACLE_DRAWS) -> TrueEffects:
    """Population effects under the scenario, by large-sample integration.

    Conditioning on the data source is handled by weighting with the true
    selection probability rather than drawing source labels, which removes
    the Bernoulli noise. Results are cached per scenario truth.
    """
    key = _truth_key(cfg) + (draws,)
    if key in _TRUTH_CACHE:
        return _TRUTH_CACHE[key]
    chunks = ORACLE_CHUNKS
    size = draws // chunks
    sums = np.zeros(4)  # pi*g, (1-pi)*g, g, pi
    per_chunk = np.zeros((chunks, 3))
    for c in range(chunks):
        rng = np.random.default_rng([ORACLE_SEED, c])
        x = rng.standard_normal((size, 2))
        z_ps = distort(x) if cfg.propensity_distorted else x
        z_out = distort(x) if cfg.outcome_distorted else x
        pi = expit(_linear(cfg.selection_coefs, z_ps))
        g = _linear(cfg.effect_coefs, z_out)
        sums += [np.sum(pi * g), np.sum((1 - pi) * g), np.sum(g), np.sum(pi)]
        per_chunk[c] = [
            np.sum(pi * g) / np.sum(pi),
            np.sum((1 - pi) * g) / np.sum(1 - pi),
            np.mean(g),
        ]
    total = chunks * size
    q = sums[3] / total
    tau = sums[0] / sums[3]
    xi = sums[1] / (total - sums[3])
    psi = sums[2] / total
    ses = per_chunk.std(axis=0, ddof=1) / np.sqrt(chunks)
    result = TrueEffects(
        tau=float(tau),
        psi=float(psi),
        xi=float(xi),
        q=float(q),
        se_tau=float(ses[0]),
        se_psi=float(ses[2]),
        se_xi=float(ses[1]),
        draws=total,
    )
    if max(result.se_tau, result.se_psi, result.se_xi) >= 1e-3:
        raise EcborrowError(
            f"oracle truth too noisy (max se {max(ses):.2e}); increase draws"
        )
    _TRUTH_CACHE[key] = result
    return result


# --------------------------- analyst models ----------------------------


def analyst_specs(k: int = 2) -> dict:
    """Raw-covariate working models: correct in the undistorted arms."""
    return {
        "m1": ModelSpec.linear_in(k, IDENTITY),
        "m0": ModelSpec.linear_in(k, IDENTITY),
        "p": ModelSpec.linear_in(k, LOGIT),
        "pi": ModelSpec.linear_in(k, LOGIT),
        "variance": ModelSpec.linear_in(k, IDENTITY),
    }


# --------------------------- Monte Carlo core --------------------------


def _fit_replicate_nuisances(ds: CompositeDataset) -> dict:
    specs = analyst_specs(ds.k)
    m1, m0_pooled = fit_outcome_models(ds, specs["m1"], specs["m0"], pool_controls=True)
    _, m0_trial = fit_outcome_models(ds, specs["m1"], specs["m0"], pool_controls=False)
    p = fit_treatment_ps(ds, specs["p"])
    pi = fit_selection_ps(ds, specs["pi"])
    r_loglin = fit_variance_ratio(ds, m0_pooled, RATIO_LOGLINEAR, specs["variance"])
    r_const = fit_variance_ratio(ds, m0_pooled, RATIO_CONSTANT)
    return {
        "full_loglin": NuisanceSet(m0=m0_pooled, r=r_loglin, m0_pooled=True, m1=m1, p=p, pi=pi),
        "full_const": NuisanceSet(m0=m0_pooled, r=r_const, m0_pooled=True, m1=m1, p=p, pi=pi),
        "base": NuisanceSet(m0=m0_trial, r=r_loglin, m0_pooled=False, m1=m1, p=p, pi=pi),
    }


def _point_and_variance(ds, nuis, estimand, method, fn) -> tuple[float, float]:
    est = fn(ds, nuis)
    ifv = influence_values(ds, nuis, estimand, method, est.point)
    return est.point, if_variance(ifv)


def _mc_replicate(args) -> dict:
    cfg, master_seed, rep, estimators = args
    try:
        ds, _ = generate(cfg, [master_seed, rep])
        sets = _fit_replicate_nuisances(ds)
        record: dict = {}
        for name in estimators:
            estimand, method, ratio = _ESTIMATOR_META[name]
            if name in ("tau_full", "tau_full_const"):
                nuis = sets["full_loglin" if ratio == RATIO_LOGLINEAR else "full_const"]
                point, var = _point_and_variance(
                    ds, nuis, estimand, method, estimate_tau_full
                )
            elif name == "tau_trial":
                point, var = _point_and_variance(
                    ds, sets["base"], estimand, method, estimate_tau_trial
                )
            elif name in ("psi_full", "psi_base"):
                nuis = sets["full_loglin"] if method == METHOD_FULL else sets["base"]
                point, var = _point_and_variance(
                    ds, nuis, estimand, method,
                    lambda d_, n_: estimate_psi(d_, n_, method),
                )
            else:
                nuis = sets["full_loglin"] if method == METHOD_FULL else sets["base"]
                point, var = _point_and_variance(
                    ds, nuis, estimand, method,
                    lambda d_, n_: estimate_xi(d_, n_, method),
                )
            record[name] = (point, var)
        record["analytic_gain"] = efficiency_gain_analytic(ds, sets["full_loglin"])
        return {"rep": rep, "ok": True, "record": record}
    except EcborrowError as exc:
        return {"rep": rep, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


@dataclass
class MCSummary:
    name: str
    estimand: str
    method: str
    ratio_mode: str | None
    reps: int
    truth: float
    mean_bias: float
    sd: float | None
    mse: float
    coverage: float
    mean_variance_estimate: float

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "estimand": self.estimand,
            "method": self.method,
            "ratio_mode": self.ratio_mode,
            "reps": self.reps,
            "truth": self.truth,
            "mean_bias": self.mean_bias,
            "sd": self.sd,
            "mse": self.mse,
            "coverage": self.coverage,
            "mean_variance_estimate": self.mean_variance_estimate,
        }


@dataclass
class MCResult:
    config: ScenarioConfig
    reps: int
    master_seed: int
    level: float
    truth: TrueEffects
    summaries: dict
    failures: int
    failure_messages: list[str]
    mean_analytic_gain: float
    draws: dict | None = None

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "reps": self.reps,
            "master_seed": self.master_seed,
            "level": self.level,
            "truth": self.truth.to_dict(),
            "summaries": {name: s.to_dict() for name, s in self.summaries.items()},
            "failures": self.failures,
            "failure_messages": self.failure_messages,
            "mean_analytic_gain": self.mean_analytic_gain,
        }


def run_monte_carlo(
    cfg: ScenarioConfig,
    reps: int,
    master_seed: int = 0,
    jobs: int = 1,
    estimators: tuple[str, ...] = ALL_ESTIMATORS,
    level: float = 0.95,
    keep_draws: bool = False,
) -> MCResult:
    """Replicate generate-fit-estimate and aggregate bias, mse, coverage.

    Replicate r draws from the RNG stream (master_seed, r), and aggregation
    runs in replicate order, so results are identical for any ``jobs``.
    """
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    unknown = set(estimators) - set(ALL_ESTIMATORS)
    if unknown:
        raise ConfigError(f"unknown estimators: {sorted(unknown)}")
    if keep_draws and reps * len(estimators) > DRAW_RETENTION_CAP:
        raise ConfigError(
            "draw retention above the in-memory cap; lower reps or drop estimators"
        )
    truth = true_effects(cfg)
    tasks = [(cfg, master_seed, rep, tuple(estimators)) for rep in range(reps)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            raw = list(pool.map(_mc_replicate, tasks, chunksize=8))
    else:
        raw = [_mc_replicate(task) for task in tasks]
    raw.sort(key=lambda item: item["rep"])
    failures = [item for item in raw if not item["ok"]]
    if len(failures) > 0.02 * reps:
        raise ReplicateFailure(
            f"{len(failures)}/{reps} Monte Carlo replicates failed",
            messages=[f["error"] for f in failures[:5]],
        )
    records = [item["record"] for item in raw if item["ok"]]
    n_ok = len(records)
    crit = float(stats.norm.ppf(0.5 + level / 2.0))
    truths = truth.by_estimand()
    summaries: dict = {}
    draws: dict = {} if keep_draws else None
    for name in estimators:
        estimand, method, ratio = _ESTIMATOR_META[name]
        points = np.array([rec[name][0] for rec in records])
        variances = np.array([rec[name][1] for rec in records])
        target = truths[estimand]
        errors = points - target
        ses = np.sqrt(variances)
        cover = np.abs(errors) <= crit * ses
        mean_bias = float(np.mean(errors))
        sd = float(np.std(errors)) if n_ok > 1 else None
        mse = float(np.mean(errors**2))
        summaries[name] = MCSummary(
            name=name,
            estimand=estimand,
            method=method,
            ratio_mode=ratio,
            reps=n_ok,
            truth=float(target),
            mean_bias=mean_bias,
            sd=sd,
            mse=mse,
            coverage=float(np.mean(cover)),
            mean_variance_estimate=float(np.mean(variances)),
        )
        if keep_draws:
            draws[name] = points
    gains = np.array([rec["analytic_gain"] for rec in records])
    return MCResult(
        config=cfg,
        reps=reps,
        master_seed=master_seed,
        level=level,
        truth=truth,
        summaries=summaries,
        failures=len(failures),
        failure_messages=[f["error"] for f in failures],
        mean_analytic_gain=float(np.mean(gains)),
        draws=draws,
    )


def constant_ratio_variant(
    cfg: ScenarioConfig, reps: int, master_seed: int = 0, jobs: int = 1
) -> MCSummary:
    """Borrowing tau estimator run with a constant variance ratio."""
    result = run_monte_carlo(
        cfg, reps, master_seed=master_seed, jobs=jobs, estimators=("tau_full_const",)
    )
    return result.summaries["tau_full_const"]


def export_boxplot_data(results: list[MCResult], path: str | Path) -> int:
    """Write per-replicate biases in long format for external plotting."""
    path = Path(path)
    rows = 0
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "estimator", "replicate", "bias"])
        for result in results:
            if result.draws is None:
                raise ConfigError(
                    "boxplot export needs raw draws; run with keep_draws=True"
                )
            truths = result.truth.by_estimand()
            for name in result.summaries:
                target = truths[_ESTIMATOR_META[name][0]]
                for rep, point in enumerate(result.draws[name]):
                    writer.writerow(
                        [result.config.scenario, name, rep, repr(float(point - target))]
                    )
                    rows += 1
    return rows


def zero_effect_variant(cfg: ScenarioConfig) -> ScenarioConfig:
    """Same design with the treatment shift removed (all effects zero)."""
    return replace(cfg, effect_coefs=(0.0, 0.0, 0.0))
