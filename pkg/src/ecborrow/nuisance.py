"""Working models: outcome means, propensities, and the variance ratio.

All four nuisances are generalized linear models fit by maximum likelihood:
identity-link Gaussian models solved in closed form, logit-link binomial
models by iteratively reweighted least squares with step-halving. Covariate
transforms are declared per model, so misspecification studies only swap
the transform, never the fitting code.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .dataset import CompositeDataset
from .errors import (
    ConfigError,
    DegenerateVariance,
    EmptyCell,
    NonConvergence,
    RankDeficient,
    SeparationDetected,
)

IDENTITY = "identity"
LOGIT = "logit"

GLM_TOL = 1e-10          # sup-norm of the score at convergence
MAX_ITER = 100
MAX_HALVINGS = 40
SEPARATION_BOUND = 30.0  # |coef| beyond this on the logit scale flags separation
TRIM_EPS = 1e-3          # propensity predictions trimmed into [eps, 1-eps]
VAR_FLOOR = 1e-8         # floor inside log(residual^2 + floor)

RATIO_KNOWN_ONE = "known_one"
RATIO_CONSTANT = "constant"
RATIO_LOGLINEAR = "loglinear"
RATIO_MODES = (RATIO_KNOWN_ONE, RATIO_CONSTANT, RATIO_LOGLINEAR)


# --------------------------- covariate terms ---------------------------

_TERM_RE = re.compile(r"^\s*(raw|pow|inter|log1pexp)\s*\(\s*(\d+)\s*(?:,\s*(-?\d+)\s*)?\)\s*$")


@dataclass(frozen=True)
class Term:
    """One design column: raw(i), pow(i,k), inter(i,j) or log1pexp(i)."""

    kind: str
    i: int
    j: int = 0

    def apply(self, x: np.ndarray) -> np.ndarray:
        col = x[:, self.i]
        if self.kind == "raw":
            return col
        if self.kind == "pow":
            return col ** self.j
        if self.kind == "inter":
            return col * x[:, self.j]
        if self.kind == "log1pexp":
            return np.logaddexp(0.0, col)
        raise ConfigError(f"unknown term kind {self.kind!r}")

    def name(self, covariate_names: Sequence[str] | None = None) -> str:
        def nm(idx: int) -> str:
            return covariate_names[idx] if covariate_names else f"x{idx + 1}"

        if self.kind == "raw":
            return nm(self.i)
        if self.kind == "pow":
            return f"pow({nm(self.i)},{self.j})"
        if self.kind == "inter":
            return f"inter({nm(self.i)},{nm(self.j)})"
        return f"log1pexp({nm(self.i)})"

    def serialize(self) -> str:
        if self.kind == "raw":
            return f"raw({self.i})"
        if self.kind == "pow":
            return f"pow({self.i},{self.j})"
        if self.kind == "inter":
            return f"inter({self.i},{self.j})"
        return f"log1pexp({self.i})"

    @classmethod
    def parse(cls, text: str) -> "Term":
        m = _TERM_RE.match(text)
        if not m:
            raise ConfigError(f"cannot parse term {text!r}")
        kind, i, j = m.group(1), int(m.group(2)), m.group(3)
        if kind in ("pow", "inter"):
            if j is None:
                raise ConfigError(f"term {text!r} needs two arguments")
            return cls(kind, i, int(j))
        if j is not None:
            raise ConfigError(f"term {text!r} takes one argument")
        return cls(kind, i)


@dataclass(frozen=True)
class ModelSpec:
    """Family plus covariate transform for one working model."""

    family: str
    terms: tuple[Term, ...]
    include_intercept: bool = True

    def __post_init__(self):
        if self.family not in (IDENTITY, LOGIT):
            raise ConfigError(f"unknown family {self.family!r}")

    @classmethod
    def linear_in(cls, k: int, family: str = IDENTITY, include_intercept: bool = True) -> "ModelSpec":
        """Intercept plus raw covariates x1..xk."""
        return cls(family, tuple(Term("raw", i) for i in range(k)), include_intercept)

    def design(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cols = []
        if self.include_intercept:
            cols.append(np.ones(x.shape[0]))
        cols.extend(term.apply(x) for term in self.terms)
        return np.column_stack(cols)

    def column_names(self, covariate_names: Sequence[str] | None = None) -> list[str]:
        names = ["intercept"] if self.include_intercept else []
        names.extend(term.name(covariate_names) for term in self.terms)
        return names

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "terms": [term.serialize() for term in self.terms],
            "include_intercept": self.include_intercept,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(
            family=data.get("family", IDENTITY),
            terms=tuple(Term.parse(t) for t in data.get("terms", [])),
            include_intercept=bool(data.get("include_intercept", True)),
        )


# ------------------------------- fitting -------------------------------


@dataclass
class FittedGLM:
    family: str
    coef: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    n_obs: int
    spec: ModelSpec | None = None
    column_names: list[str] = field(default_factory=list)

    def linear_predictor(self, design: np.ndarray) -> np.ndarray:
        return np.asarray(design, dtype=float) @ self.coef

    def predict_design(self, design: np.ndarray) -> np.ndarray:
        eta = self.linear_predictor(design)
        if self.family == LOGIT:
            return expit(eta)
        return eta

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.spec is None:
            raise ConfigError("model was fit on a raw design; use predict_design")
        return self.predict_design(self.spec.design(x))


def expit(eta: np.ndarray) -> np.ndarray:
    """Numerically stable inverse logit."""
    eta = np.asarray(eta, dtype=float)
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ez = np.exp(eta[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_rank(design: np.ndarray, column_names: list[str] | None) -> None:
    n, p = design.shape
    if n < p:
        raise RankDeficient(
            f"{n} rows cannot identify {p} coefficients", columns=column_names or []
        )
    _, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(design.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int((diag > tol).sum())
    if rank < p:
        names = column_names or [f"col{i}" for i in range(p)]
        collinear = [names[piv[i]] for i in range(rank, p)]
        raise RankDeficient(
            f"design is rank deficient ({rank} < {p})", columns=collinear
        )


def _logit_loglik(design, response, coef, weights) -> float:
    eta = design @ coef
    return float(np.sum(weights * (response * eta - np.logaddexp(0.0, eta))))


def fit_glm(
    design: np.ndarray,
    response: np.ndarray,
    family: str,
    weights: np.ndarray | None = None,
    spec: ModelSpec | None = None,
    column_names: list[str] | None = None,
) -> FittedGLM:
    """Maximum-likelihood fit of one GLM.

    Identity family solves the weighted least-squares problem directly;
    logit family runs IRLS with step-halving until the score sup-norm is
    below GLM_TOL or MAX_ITER is hit.
    """
    design = np.atleast_2d(np.asarray(design, dtype=float))
    response = np.asarray(response, dtype=float)
    n, p = design.shape
    if response.shape[0] != n:
        raise ConfigError(f"design has {n} rows, response has {response.shape[0]}")
    if n == 0:
        raise EmptyCell("cannot fit a model on zero rows")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    _check_rank(design * np.sqrt(w)[:, None], column_names)

    if family == IDENTITY:
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(design * sw[:, None], response * sw, rcond=None)
        resid = response - design @ coef
        wsum = w.sum()
        sigma2 = max(float(np.sum(w * resid**2) / wsum), 1e-300)
        loglik = -0.5 * wsum * (np.log(2.0 * np.pi * sigma2) + 1.0)
        return FittedGLM(IDENTITY, coef, True, 1, loglik, n, spec, column_names or [])

    if family != LOGIT:
        raise ConfigError(f"unknown family {family!r}")

    coef = np.zeros(p)
    loglik = _logit_loglik(design, response, coef, w)
    trace: list[dict] = []
    for iteration in range(1, MAX_ITER + 1):
        mu = expit(design @ coef)
        score = design.T @ (w * (response - mu))
        score_norm = float(np.max(np.abs(score)))
        trace.append({"iteration": iteration, "loglik": loglik, "score_norm": score_norm})
        if score_norm <= GLM_TOL:
            return FittedGLM(LOGIT, coef, True, iteration, loglik, n, spec, column_names or [])
        info_w = w * mu * (1.0 - mu)
        hessian = design.T @ (design * info_w[:, None])
        try:
            step = np.linalg.solve(hessian, score)
        except np.linalg.LinAlgError:
            raise SeparationDetected(
                "singular information matrix; fitted probabilities degenerate",
            ) from None
        candidate = coef + step
        new_loglik = _logit_loglik(design, response, candidate, w)
        halvings = 0
        while new_loglik < loglik - 1e-12 and halvings < MAX_HALVINGS:
            step *= 0.5
            candidate = coef + step
            new_loglik = _logit_loglik(design, response, candidate, w)
            halvings += 1
        coef = candidate
        loglik = new_loglik
        if float(np.max(np.abs(coef))) > SEPARATION_BOUND:
            raise SeparationDetected(
                "coefficients diverging on the logit scale; data likely separated",
                max_coef=float(np.max(np.abs(coef))),
            )
    raise NonConvergence(
        f"IRLS did not converge in {MAX_ITER} iterations", trace=trace
    )


def fit_model(ds_x: np.ndarray, response: np.ndarray, spec: ModelSpec,
              covariate_names: Sequence[str] | None = None,
              weights: np.ndarray | None = None) -> FittedGLM:
    """Fit ``spec`` on raw covariates, building the design from its terms."""
    design = spec.design(ds_x)
    return fit_glm(
        design,
        response,
        spec.family,
        weights=weights,
        spec=spec,
        column_names=spec.column_names(covariate_names),
    )


# ------------------------- model-set fitting --------------------------


def fit_outcome_models(
    ds: CompositeDataset,
    spec1: ModelSpec,
    spec0: ModelSpec,
    pool_controls: bool,
) -> tuple[FittedGLM, FittedGLM]:
    """Fit the treated-arm and control outcome means.

    The treated model uses trial treated rows. With ``pool_controls`` the
    control model uses every control row (trial and external); otherwise
    trial controls only.
    """
    treated = (ds.d == 1) & (ds.t == 1)
    if pool_controls:
        controls = ds.t == 0
    else:
        controls = (ds.d == 1) & (ds.t == 0)
    if not treated.any():
        raise EmptyCell("no treated trial rows to fit the treated outcome model")
    if not controls.any():
        raise EmptyCell("no control rows to fit the control outcome model")
    m1 = fit_model(ds.x[treated], ds.y[treated], spec1, ds.covariate_names)
    m0 = fit_model(ds.x[controls], ds.y[controls], spec0, ds.covariate_names)
    return m1, m0


def fit_treatment_ps(ds: CompositeDataset, spec: ModelSpec) -> FittedGLM:
    """Logit model of treatment assignment among trial rows."""
    if spec.family != LOGIT:
        raise ConfigError("treatment propensity model must use the logit family")
    trial = ds.d == 1
    t = ds.t[trial]
    if not (t == 1).any() or not (t == 0).any():
        raise EmptyCell("trial needs both arms to fit the treatment propensity")
    return fit_model(ds.x[trial], t, spec, ds.covariate_names)


def fit_selection_ps(ds: CompositeDataset, spec: ModelSpec) -> FittedGLM:
    """Logit model of trial membership on the pooled sample."""
    if spec.family != LOGIT:
        raise ConfigError("selection propensity model must use the logit family")
    if ds.n2 == 0:
        raise EmptyCell("no external rows; selection propensity is degenerate")
    return fit_model(ds.x, ds.d, spec, ds.covariate_names)


# --------------------------- variance ratio ---------------------------


@dataclass
class VarianceRatioModel:
    """Ratio of control-outcome variance, trial over external.

    known_one: ratio fixed at 1 (appropriate for binary outcomes).
    constant: ratio of mean squared control residuals.
    loglinear: identity GLM of log(residual^2 + floor) in each source group;
    the per-group fits also provide smoothed conditional variances, rescaled
    so group means match the raw mean squared residuals.
    """

    mode: str
    spec: ModelSpec | None = None
    coef_trial: np.ndarray | None = None
    coef_external: np.ndarray | None = None
    log_scale_trial: float = 0.0
    log_scale_external: float = 0.0
    const_ratio: float = 1.0
    const_var_trial: float | None = None
    const_var_external: float | None = None

    @property
    def params(self) -> np.ndarray:
        if self.mode == RATIO_KNOWN_ONE:
            return np.array([])
        if self.mode == RATIO_CONSTANT:
            return np.array([self.const_ratio, self.const_var_trial, self.const_var_external])
        return np.concatenate(
            [
                self.coef_trial,
                self.coef_external,
                [self.log_scale_trial, self.log_scale_external],
            ]
        )

    def predict_r(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        if self.mode == RATIO_KNOWN_ONE:
            return np.ones(n)
        if self.mode == RATIO_CONSTANT:
            return np.full(n, self.const_ratio)
        design = self.spec.design(x)
        return np.exp(design @ self.coef_trial - design @ self.coef_external)

    def predict_var_trial(self, x: np.ndarray) -> np.ndarray:
        """Smoothed var(Y | X, trial controls); unavailable for known_one."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        if self.mode == RATIO_KNOWN_ONE:
            raise DegenerateVariance(
                "known_one ratio model carries no variance level; fit constant or loglinear"
            )
        if self.mode == RATIO_CONSTANT:
            return np.full(n, self.const_var_trial)
        design = self.spec.design(x)
        return np.exp(design @ self.coef_trial + self.log_scale_trial)


def fit_variance_ratio(
    ds: CompositeDataset,
    m0: FittedGLM,
    mode: str,
    spec: ModelSpec | None = None,
) -> VarianceRatioModel:
    """Estimate the control-outcome variance ratio from m0 residuals."""
    if mode not in RATIO_MODES:
        raise ConfigError(f"unknown ratio mode {mode!r}")
    if mode == RATIO_KNOWN_ONE:
        return VarianceRatioModel(RATIO_KNOWN_ONE)
    trial_controls = (ds.d == 1) & (ds.t == 0)
    external = ds.d == 0
    if int(trial_controls.sum()) < 2 or int(external.sum()) < 2:
        raise EmptyCell(
            "variance-ratio estimation needs at least two control rows per source"
        )
    resid2_trial = (ds.y[trial_controls] - m0.predict(ds.x[trial_controls])) ** 2
    resid2_external = (ds.y[external] - m0.predict(ds.x[external])) ** 2
    if np.all(resid2_trial < VAR_FLOOR) or np.all(resid2_external < VAR_FLOOR):
        raise DegenerateVariance(
            "all squared residuals below the variance floor in one source group"
        )
    if mode == RATIO_CONSTANT:
        v1 = float(np.mean(resid2_trial))
        v0 = float(np.mean(resid2_external))
        return VarianceRatioModel(
            RATIO_CONSTANT,
            const_ratio=v1 / v0,
            const_var_trial=v1,
            const_var_external=v0,
        )
    if spec is None:
        spec = ModelSpec.linear_in(ds.k, IDENTITY)
    if spec.family != IDENTITY:
        raise ConfigError("loglinear variance regression must use the identity family")
    fit_trial = fit_model(
        ds.x[trial_controls], np.log(resid2_trial + VAR_FLOOR), spec, ds.covariate_names
    )
    fit_external = fit_model(
        ds.x[external], np.log(resid2_external + VAR_FLOOR), spec, ds.covariate_names
    )
    # Calibrate the level so each group's smoothed variance averages to its
    # raw mean squared residual (log-scale fits are biased low otherwise).
    scale_trial = float(
        np.log(np.mean(resid2_trial) / np.mean(np.exp(fit_trial.predict(ds.x[trial_controls]))))
    )
    scale_external = float(
        np.log(np.mean(resid2_external) / np.mean(np.exp(fit_external.predict(ds.x[external]))))
    )
    return VarianceRatioModel(
        RATIO_LOGLINEAR,
        spec=spec,
        coef_trial=fit_trial.coef,
        coef_external=fit_external.coef,
        log_scale_trial=scale_trial,
        log_scale_external=scale_external,
    )


# ---------------------------- nuisance set ----------------------------


@dataclass
class NuisanceSet:
    """The fitted working models one estimator run consumes.

    ``m1`` and ``p`` may be absent in treated-only designs; ``pi`` may be
    absent when there are no external rows.
    """

    m0: FittedGLM
    r: VarianceRatioModel
    m0_pooled: bool
    m1: FittedGLM | None = None
    p: FittedGLM | None = None
    pi: FittedGLM | None = None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for model in (self.m1, self.m0, self.p, self.pi):
            if model is None:
                h.update(b"absent")
            else:
                h.update(model.family.encode())
                h.update(np.ascontiguousarray(model.coef, dtype=float).tobytes())
        h.update(self.r.mode.encode())
        h.update(np.ascontiguousarray(self.r.params, dtype=float).tobytes())
        h.update(b"pooled" if self.m0_pooled else b"unpooled")
        return h.hexdigest()[:16]


def trimmed_propensity(
    model: FittedGLM, x: np.ndarray, trim_eps: float = TRIM_EPS
) -> tuple[np.ndarray, int]:
    """Propensity predictions trimmed into [eps, 1-eps]; counts trims."""
    raw = model.predict(x)
    clipped = np.clip(raw, trim_eps, 1.0 - trim_eps)
    return clipped, int(np.sum(clipped != raw))


def fit_nuisances(
    ds: CompositeDataset,
    outcome_spec1: ModelSpec,
    outcome_spec0: ModelSpec,
    treatment_spec: ModelSpec | None,
    selection_spec: ModelSpec | None,
    ratio_mode: str = RATIO_KNOWN_ONE,
    ratio_spec: ModelSpec | None = None,
    pool_controls: bool = True,
    treated_only: bool = False,
) -> NuisanceSet:
    """Fit the full working-model set for one estimator configuration."""
    trial_treated = (ds.d == 1) & (ds.t == 1)
    if treated_only:
        if not trial_treated.any():
            raise EmptyCell("treated-only mode requires treated trial rows")
        controls = ds.t == 0 if pool_controls else (ds.d == 1) & (ds.t == 0)
        if not controls.any():
            raise EmptyCell("no control rows to fit the control outcome model")
        m0 = fit_model(ds.x[controls], ds.y[controls], outcome_spec0, ds.covariate_names)
        m1, p = None, None
    else:
        m1, m0 = fit_outcome_models(ds, outcome_spec1, outcome_spec0, pool_controls)
        p = fit_treatment_ps(ds, treatment_spec) if treatment_spec is not None else None
    pi = None
    if selection_spec is not None and ds.n2 > 0:
        pi = fit_selection_ps(ds, selection_spec)
    r = fit_variance_ratio(ds, m0, ratio_mode, ratio_spec)
    return NuisanceSet(m0=m0, r=r, m0_pooled=pool_controls, m1=m1, p=p, pi=pi)
