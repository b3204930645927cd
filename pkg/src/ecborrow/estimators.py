"""Doubly robust treatment-effect estimators and their efficiency quantities.

Three estimands: the effect in the trial population (tau), in the external
population (xi), and in the pooled population (psi). Each has a full-data
variant that borrows external controls through the selection propensity and
the variance ratio, and a comparator that ignores external outcomes
(trial-based for tau; baseline for psi/xi, obtained by zeroing the variance
ratio and refitting the control mean on trial controls only).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import OUTCOME_BINARY, CompositeDataset
from .errors import (
    ConfigError,
    EmptyCell,
    InvariantViolation,
    MismatchedPoint,
    OverlapNoExternal,
    VarianceModelRequired,
)
from .nuisance import RATIO_KNOWN_ONE, NuisanceSet, trimmed_propensity

DENOM_EPS = 1e-6   # floor on the pooled-control weight denominator and on p
IF_MEAN_TOL = 1e-8  # influence values must average to zero at the estimate

ESTIMAND_TAU = "tau"
ESTIMAND_PSI = "psi"
ESTIMAND_XI = "xi"
ESTIMANDS = (ESTIMAND_TAU, ESTIMAND_PSI, ESTIMAND_XI)

METHOD_TRIAL = "trial_based"
METHOD_FULL = "full_data"
METHOD_TREATED_ONLY = "treated_only"
METHOD_BASELINE = "baseline"

VALID_METHODS = {
    ESTIMAND_TAU: (METHOD_FULL, METHOD_TRIAL, METHOD_TREATED_ONLY),
    ESTIMAND_PSI: (METHOD_FULL, METHOD_BASELINE),
    ESTIMAND_XI: (METHOD_FULL, METHOD_BASELINE),
}


@dataclass
class Estimate:
    estimand: str
    method: str
    point: float
    n_used: int
    nuisance_fingerprint: str
    trim_count: int

    def __post_init__(self):
        if self.estimand not in ESTIMANDS:
            raise ConfigError(f"unknown estimand {self.estimand!r}")
        if self.method not in VALID_METHODS[self.estimand]:
            raise ConfigError(
                f"method {self.method!r} is not valid for estimand {self.estimand!r}"
            )

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "method": self.method,
            "point": self.point,
            "n_used": self.n_used,
            "nuisance_fingerprint": self.nuisance_fingerprint,
            "trim_count": self.trim_count,
        }


@dataclass
class IFVector:
    values: np.ndarray
    estimand: str
    method: str


# --------------------------- control weight ---------------------------


def control_weight(
    pi_x: np.ndarray,
    p_x: np.ndarray,
    r_x: np.ndarray,
    d: np.ndarray,
    t: np.ndarray,
) -> tuple[np.ndarray, int]:
    """Weight attached to control residuals in the full-data moments.

    Trial controls get pi / denom, external rows pi * r / denom, everything
    else zero, with denom = pi * (1 - p) + (1 - pi) * r. The denominator is
    floored at DENOM_EPS; the number of floored rows is returned.
    """
    pi_x = np.asarray(pi_x, dtype=float)
    p_x = np.asarray(p_x, dtype=float)
    r_x = np.asarray(r_x, dtype=float)
    d = np.asarray(d)
    t = np.asarray(t)
    numer = d * (1 - t) * pi_x + (1 - d) * pi_x * r_x
    denom = pi_x * (1.0 - p_x) + (1.0 - pi_x) * r_x
    floored = int(np.sum(denom < DENOM_EPS))
    denom = np.maximum(denom, DENOM_EPS)
    return numer / denom, floored


# --------------------------- moment pieces ----------------------------


@dataclass
class _Pieces:
    """Per-row ingredients shared by every full-data moment."""

    delta: np.ndarray
    resid0: np.ndarray
    resid1: np.ndarray
    p: np.ndarray
    pi: np.ndarray
    r: np.ndarray
    weight: np.ndarray
    core: np.ndarray  # d*t*resid1/p - weight*resid0
    trim_count: int
    q_hat: float


def _full_pieces(
    ds: CompositeDataset, nuis: NuisanceSet, zero_ratio: bool = False
) -> _Pieces:
    if ds.n2 == 0:
        raise OverlapNoExternal(
            "full-data estimation needs external rows; use the trial-based method"
        )
    if nuis.m1 is None or nuis.p is None:
        raise EmptyCell("full-data moments need fitted treated-arm models")
    if nuis.pi is None:
        raise EmptyCell("full-data moments need a fitted selection propensity")
    m1 = nuis.m1.predict(ds.x)
    m0 = nuis.m0.predict(ds.x)
    p, trims_p = trimmed_propensity(nuis.p, ds.x)
    pi, trims_pi = trimmed_propensity(nuis.pi, ds.x)
    floored_p = int(np.sum(p < DENOM_EPS))
    p = np.maximum(p, DENOM_EPS)
    r = np.zeros(ds.n) if zero_ratio else nuis.r.predict_r(ds.x)
    weight, floored_w = control_weight(pi, p, r, ds.d, ds.t)
    resid0 = ds.y - m0
    resid1 = ds.y - m1
    core = ds.d * ds.t * resid1 / p - weight * resid0
    return _Pieces(
        delta=m1 - m0,
        resid0=resid0,
        resid1=resid1,
        p=p,
        pi=pi,
        r=r,
        weight=weight,
        core=core,
        trim_count=trims_p + trims_pi + floored_p + floored_w,
        q_hat=ds.q_hat,
    )


# ----------------------------- estimators -----------------------------


def estimate_tau_trial(ds: CompositeDataset, nuis: NuisanceSet) -> Estimate:
    """Treatment effect in the trial, using trial rows only."""
    if nuis.m0_pooled:
        raise ConfigError("trial-based estimation needs m0 fit on trial controls only")
    if nuis.m1 is None or nuis.p is None:
        raise EmptyCell("trial-based estimation needs both trial arms")
    trial = ds.d == 1
    x = ds.x[trial]
    y = ds.y[trial]
    t = ds.t[trial]
    if not (t == 1).any() or not (t == 0).any():
        raise EmptyCell("trial-based estimation needs both trial arms")
    m1 = nuis.m1.predict(x)
    m0 = nuis.m0.predict(x)
    p, trims = trimmed_propensity(nuis.p, x)
    floored = int(np.sum(p < DENOM_EPS))
    p = np.maximum(p, DENOM_EPS)
    rows = (m1 - m0) + t * (y - m1) / p - (1 - t) * (y - m0) / (1.0 - p)
    return Estimate(
        estimand=ESTIMAND_TAU,
        method=METHOD_TRIAL,
        point=float(np.mean(rows)),
        n_used=int(trial.sum()),
        nuisance_fingerprint=nuis.fingerprint(),
        trim_count=trims + floored,
    )


def estimate_tau_full(
    ds: CompositeDataset, nuis: NuisanceSet, zero_ratio: bool = False
) -> Estimate:
    """Treatment effect in the trial, borrowing external controls.

    With ``zero_ratio`` the variance ratio is replaced by zero, which
    removes the external contribution; combined with an unpooled m0 this
    reproduces the trial-based estimator.
    """
    if not zero_ratio and not nuis.m0_pooled:
        raise ConfigError("full-data estimation needs m0 fit on all controls")
    pieces = _full_pieces(ds, nuis, zero_ratio=zero_ratio)
    rows = ds.d * pieces.delta + pieces.core
    return Estimate(
        estimand=ESTIMAND_TAU,
        method=METHOD_FULL,
        point=float(np.mean(rows) / pieces.q_hat),
        n_used=ds.n,
        nuisance_fingerprint=nuis.fingerprint(),
        trim_count=pieces.trim_count,
    )


def estimate_tau_treated_only(ds: CompositeDataset, nuis: NuisanceSet) -> Estimate:
    """Treatment effect when the trial has no control arm (p set to 1)."""
    if int(((ds.d == 1) & (ds.t == 0)).sum()) > 0:
        raise InvariantViolation(
            "treated-only estimation requested but the trial has control rows"
        )
    if ds.n2 == 0:
        raise OverlapNoExternal("treated-only estimation needs external controls")
    if nuis.pi is None:
        raise EmptyCell("treated-only estimation needs a fitted selection propensity")
    m0 = nuis.m0.predict(ds.x)
    pi, trims = trimmed_propensity(nuis.pi, ds.x)
    resid0 = ds.y - m0
    rows = ds.d * resid0 - (1 - ds.d) * (pi / (1.0 - pi)) * resid0
    return Estimate(
        estimand=ESTIMAND_TAU,
        method=METHOD_TREATED_ONLY,
        point=float(np.mean(rows) / ds.q_hat),
        n_used=ds.n,
        nuisance_fingerprint=nuis.fingerprint(),
        trim_count=trims,
    )


def _check_comparator_nuisances(nuis: NuisanceSet, method: str) -> bool:
    if method == METHOD_FULL:
        if not nuis.m0_pooled:
            raise ConfigError("full-data estimation needs m0 fit on all controls")
        return False
    if method == METHOD_BASELINE:
        if nuis.m0_pooled:
            raise ConfigError("baseline estimation needs m0 fit on trial controls only")
        return True
    raise ConfigError(f"method {method!r} is not valid here")


def estimate_psi(ds: CompositeDataset, nuis: NuisanceSet, method: str = METHOD_FULL) -> Estimate:
    """Treatment effect in the pooled population."""
    zero_ratio = _check_comparator_nuisances(nuis, method)
    pieces = _full_pieces(ds, nuis, zero_ratio=zero_ratio)
    rows = pieces.delta + pieces.core / pieces.pi
    return Estimate(
        estimand=ESTIMAND_PSI,
        method=method,
        point=float(np.mean(rows)),
        n_used=ds.n,
        nuisance_fingerprint=nuis.fingerprint(),
        trim_count=pieces.trim_count,
    )


def estimate_xi(ds: CompositeDataset, nuis: NuisanceSet, method: str = METHOD_FULL) -> Estimate:
    """Treatment effect in the external population."""
    zero_ratio = _check_comparator_nuisances(nuis, method)
    if ds.q_hat >= 1.0:
        raise OverlapNoExternal("external-population effect needs external rows")
    pieces = _full_pieces(ds, nuis, zero_ratio=zero_ratio)
    rows = (1 - ds.d) * pieces.delta + pieces.core * (1.0 - pieces.pi) / pieces.pi
    return Estimate(
        estimand=ESTIMAND_XI,
        method=method,
        point=float(np.mean(rows) / (1.0 - ds.q_hat)),
        n_used=ds.n,
        nuisance_fingerprint=nuis.fingerprint(),
        trim_count=pieces.trim_count,
    )


def estimate(
    ds: CompositeDataset, nuis: NuisanceSet, estimand: str, method: str
) -> Estimate:
    """Dispatch to the named estimator."""
    if estimand == ESTIMAND_TAU:
        if method == METHOD_TRIAL:
            return estimate_tau_trial(ds, nuis)
        if method == METHOD_FULL:
            return estimate_tau_full(ds, nuis)
        if method == METHOD_TREATED_ONLY:
            return estimate_tau_treated_only(ds, nuis)
    elif estimand == ESTIMAND_PSI and method in (METHOD_FULL, METHOD_BASELINE):
        return estimate_psi(ds, nuis, method)
    elif estimand == ESTIMAND_XI and method in (METHOD_FULL, METHOD_BASELINE):
        return estimate_xi(ds, nuis, method)
    raise ConfigError(f"no estimator for estimand {estimand!r} with method {method!r}")


# -------------------------- influence values --------------------------


def influence_values(
    ds: CompositeDataset,
    nuis: NuisanceSet,
    estimand: str,
    method: str,
    point: float,
) -> IFVector:
    """Per-row influence values of the named estimator at its estimate.

    The values average to zero (within IF_MEAN_TOL) when ``point`` is the
    matching estimator output; otherwise MismatchedPoint is raised.
    """
    if estimand not in ESTIMANDS or method not in VALID_METHODS[estimand]:
        raise ConfigError(
            f"no influence function for estimand {estimand!r} with method {method!r}"
        )
    if estimand == ESTIMAND_TAU and method == METHOD_TRIAL:
        if nuis.m0_pooled:
            raise ConfigError("trial-based influence values need unpooled m0")
        m1 = nuis.m1.predict(ds.x)
        m0 = nuis.m0.predict(ds.x)
        p, _ = trimmed_propensity(nuis.p, ds.x)
        p = np.maximum(p, DENOM_EPS)
        resid1 = ds.y - m1
        resid0 = ds.y - m0
        values = (ds.d / ds.q_hat) * (
            (m1 - m0) - point + ds.t * resid1 / p - (1 - ds.t) * resid0 / (1.0 - p)
        )
    elif estimand == ESTIMAND_TAU and method == METHOD_TREATED_ONLY:
        m0 = nuis.m0.predict(ds.x)
        pi, _ = trimmed_propensity(nuis.pi, ds.x)
        resid0 = ds.y - m0
        values = (
            ds.d * (resid0 - point) - (1 - ds.d) * (pi / (1.0 - pi)) * resid0
        ) / ds.q_hat
    else:
        pieces = _full_pieces(ds, nuis, zero_ratio=method == METHOD_BASELINE)
        if estimand == ESTIMAND_TAU:
            values = (ds.d * (pieces.delta - point) + pieces.core) / pieces.q_hat
        elif estimand == ESTIMAND_PSI:
            values = pieces.delta - point + pieces.core / pieces.pi
        else:
            values = (
                (1 - ds.d) * (pieces.delta - point)
                + pieces.core * (1.0 - pieces.pi) / pieces.pi
            ) / (1.0 - pieces.q_hat)
    mean = float(np.mean(values))
    if abs(mean) > IF_MEAN_TOL:
        raise MismatchedPoint(
            f"influence values average to {mean:.3e}; point does not match the estimator",
            estimand=estimand,
            method=method,
        )
    return IFVector(values=values, estimand=estimand, method=method)


def efficiency_bound_plugin(
    ds: CompositeDataset, nuis: NuisanceSet, estimand: str, method: str
) -> float:
    """Plug-in estimate of the asymptotic variance bound, E[IF^2]."""
    point = estimate(ds, nuis, estimand, method).point
    ifv = influence_values(ds, nuis, estimand, method, point)
    return float(np.mean(ifv.values**2))


# ------------------------- efficiency formulas -------------------------


def _var_trial_controls(ds: CompositeDataset, nuis: NuisanceSet) -> np.ndarray:
    """V1(x): conditional control-outcome variance in the trial."""
    if ds.outcome_kind == OUTCOME_BINARY:
        m0 = nuis.m0.predict(ds.x)
        return m0 * (1.0 - m0)
    if nuis.r.mode == RATIO_KNOWN_ONE:
        raise VarianceModelRequired(
            "continuous outcomes need a constant or loglinear variance-ratio fit"
        )
    return nuis.r.predict_var_trial(ds.x)


def efficiency_gain_analytic(ds: CompositeDataset, nuis: NuisanceSet) -> float:
    """Drop in the tau variance bound from borrowing external controls.

    Averages, over trial rows, the gap between the trial-only and
    borrowing-adjusted inverse control-variance weights times V1(x)/q.
    """
    if nuis.p is None or nuis.pi is None:
        raise EmptyCell("gain formula needs fitted treatment and selection propensities")
    trial = ds.d == 1
    x = ds.x[trial]
    p, _ = trimmed_propensity(nuis.p, x)
    pi, _ = trimmed_propensity(nuis.pi, x)
    r = nuis.r.predict_r(x)
    v1 = _var_trial_controls(ds, nuis)[trial]
    gap = 1.0 / (1.0 - p) - 1.0 / (1.0 - p + (1.0 - pi) / pi * r)
    return float(np.mean(gap * v1 / ds.q_hat))


def _gap_pieces(ds: CompositeDataset, nuis: NuisanceSet):
    if nuis.p is None or nuis.pi is None:
        raise EmptyCell("gap formulas need fitted treatment and selection propensities")
    p, _ = trimmed_propensity(nuis.p, ds.x)
    pi, _ = trimmed_propensity(nuis.pi, ds.x)
    r = nuis.r.predict_r(ds.x)
    v1 = _var_trial_controls(ds, nuis)
    base = pi * (1.0 - p)
    return base, pi, r, v1


def variance_gap_psi(ds: CompositeDataset, nuis: NuisanceSet) -> float:
    """Asymptotic variance advantage of the full-data psi estimator."""
    base, pi, r, v1 = _gap_pieces(ds, nuis)
    gap = 1.0 / np.maximum(base, DENOM_EPS) - 1.0 / np.maximum(base + (1.0 - pi) * r, DENOM_EPS)
    return float(np.mean(gap * v1))


def variance_gap_xi(ds: CompositeDataset, nuis: NuisanceSet) -> float:
    """Asymptotic variance advantage of the full-data xi estimator."""
    if ds.q_hat >= 1.0:
        raise OverlapNoExternal("gap for the external-population effect needs external rows")
    base, pi, r, v1 = _gap_pieces(ds, nuis)
    one_minus_pi_sq = (1.0 - pi) ** 2
    gap = one_minus_pi_sq / np.maximum(base, DENOM_EPS) - one_minus_pi_sq / np.maximum(
        base + (1.0 - pi) * r, DENOM_EPS
    )
    return float(np.mean(gap * v1 / (1.0 - ds.q_hat) ** 2))
