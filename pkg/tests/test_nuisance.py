import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecborrow.dataset import CompositeDataset
from ecborrow.errors import (
    ConfigError,
    DegenerateVariance,
    EmptyCell,
    RankDeficient,
    SeparationDetected,
)
from ecborrow.nuisance import (
    GLM_TOL,
    IDENTITY,
    LOGIT,
    RATIO_CONSTANT,
    RATIO_KNOWN_ONE,
    RATIO_LOGLINEAR,
    FittedGLM,
    ModelSpec,
    Term,
    expit,
    fit_glm,
    fit_model,
    fit_outcome_models,
    fit_selection_ps,
    fit_treatment_ps,
    fit_variance_ratio,
    trimmed_propensity,
)
from ecborrow.simlab import ScenarioConfig, generate

from oracles import newton_logit, wls_normal_equations


# ------------------------------ fit_glm --------------------------------


def test_identity_exact_interpolation():
    fit = fit_glm(np.array([[1.0, 0.0], [1.0, 1.0]]), np.array([1.0, 3.0]), IDENTITY)
    assert fit.coef == pytest.approx([1.0, 2.0], abs=1e-12)


def test_logit_balanced_intercept_is_zero():
    design = np.ones((10, 1))
    response = np.array([1, 0] * 5, dtype=float)
    fit = fit_glm(design, response, LOGIT)
    assert fit.coef[0] == pytest.approx(0.0, abs=1e-10)
    assert fit.converged


def test_logit_matches_newton_oracle_on_fixtures():
    rng = np.random.default_rng(42)
    for _ in range(20):
        n = 20
        design = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
        prob = expit(design @ np.array([0.2, 0.8, -0.5]))
        response = (rng.random(n) < prob).astype(float)
        if response.min() == response.max():
            response[0] = 1 - response[0]
        try:
            fit = fit_glm(design, response, LOGIT)
        except SeparationDetected:
            continue
        oracle = newton_logit(design, response)
        assert np.max(np.abs(fit.coef - oracle)) < 1e-8


def test_identity_matches_wls_oracle():
    rng = np.random.default_rng(5)
    design = np.column_stack([np.ones(40), rng.standard_normal((40, 3))])
    response = rng.standard_normal(40)
    weights = rng.uniform(0.2, 2.0, 40)
    fit = fit_glm(design, response, IDENTITY, weights=weights)
    oracle = wls_normal_equations(design, response, weights)
    assert np.max(np.abs(fit.coef - oracle)) < 1e-10


def test_logit_weighted_matches_oracle():
    rng = np.random.default_rng(6)
    n = 60
    design = np.column_stack([np.ones(n), rng.standard_normal(n)])
    response = (rng.random(n) < 0.5).astype(float)
    weights = rng.uniform(0.5, 1.5, n)
    fit = fit_glm(design, response, LOGIT, weights=weights)
    oracle = newton_logit(design, response, weights)
    assert np.max(np.abs(fit.coef - oracle)) < 1e-8


def test_score_norm_at_solution():
    rng = np.random.default_rng(11)
    n = 80
    design = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
    response = (rng.random(n) < expit(design[:, 1])).astype(float)
    fit = fit_glm(design, response, LOGIT)
    mu = expit(design @ fit.coef)
    score = design.T @ (response - mu)
    assert np.max(np.abs(score)) <= GLM_TOL


def test_refit_on_permuted_rows_identical():
    rng = np.random.default_rng(13)
    n = 90
    design = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
    response = (rng.random(n) < expit(0.3 + design[:, 1])).astype(float)
    perm = rng.permutation(n)
    fit = fit_glm(design, response, LOGIT)
    fit_perm = fit_glm(design[perm], response[perm], LOGIT)
    assert np.max(np.abs(fit.coef - fit_perm.coef)) < 1e-12
    gauss = fit_glm(design, response, IDENTITY)
    gauss_perm = fit_glm(design[perm], response[perm], IDENTITY)
    assert np.max(np.abs(gauss.coef - gauss_perm.coef)) < 1e-12


def test_separation_detected():
    x = np.linspace(-2, 2, 20)
    design = np.column_stack([np.ones(20), x])
    response = (x > 0).astype(float)
    with pytest.raises(SeparationDetected):
        fit_glm(design, response, LOGIT)


def test_rank_deficient_names_columns():
    rng = np.random.default_rng(3)
    col = rng.standard_normal(30)
    design = np.column_stack([np.ones(30), col, 2 * col])
    with pytest.raises(RankDeficient) as err:
        fit_glm(design, rng.standard_normal(30), IDENTITY,
                column_names=["intercept", "a", "b"])
    assert err.value.columns


# ----------------------------- transforms ------------------------------


def test_term_parse_and_serialize_round_trip():
    for text in ("raw(0)", "pow(1,3)", "inter(0,1)", "log1pexp(1)"):
        term = Term.parse(text)
        assert term.serialize() == text


def test_term_parse_rejects_garbage():
    with pytest.raises(ConfigError):
        Term.parse("cube(0)")
    with pytest.raises(ConfigError):
        Term.parse("pow(0)")
    with pytest.raises(ConfigError):
        Term.parse("raw(0,1)")


def test_modelspec_round_trip():
    spec = ModelSpec(LOGIT, (Term("raw", 0), Term("pow", 1, 2), Term("inter", 0, 1)))
    again = ModelSpec.from_dict(spec.to_dict())
    assert again == spec


@settings(max_examples=50, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6))
def test_design_finite_for_finite_x(value):
    spec = ModelSpec(
        IDENTITY,
        (Term("raw", 0), Term("pow", 0, 2), Term("inter", 0, 0), Term("log1pexp", 0)),
    )
    row = spec.design(np.array([[value]]))
    assert np.isfinite(row).all()


def test_design_column_names():
    spec = ModelSpec(IDENTITY, (Term("raw", 0), Term("inter", 0, 1)))
    assert spec.column_names(("age", "bmi")) == ["intercept", "age", "inter(age,bmi)"]


# --------------------------- model-set fits ----------------------------


def _shaped_dataset(seed=1, n11=182, n10=180, n00=110) -> CompositeDataset:
    rng = np.random.default_rng(seed)
    n = n11 + n10 + n00
    x = rng.standard_normal((n, 2))
    d = np.array([1] * (n11 + n10) + [0] * n00)
    t = np.array([1] * n11 + [0] * (n10 + n00))
    y = 0.5 + 0.3 * x[:, 0] + t * 0.4 + rng.standard_normal(n)
    return CompositeDataset(y, x, t, d)


def test_outcome_models_pooling_row_counts():
    ds = _shaped_dataset()
    spec = ModelSpec.linear_in(2, IDENTITY)
    _, m0_pooled = fit_outcome_models(ds, spec, spec, pool_controls=True)
    _, m0_trial = fit_outcome_models(ds, spec, spec, pool_controls=False)
    assert m0_pooled.n_obs == 180 + 110
    assert m0_trial.n_obs == 180


def test_outcome_models_empty_cell():
    ds = _shaped_dataset(n11=60, n10=0, n00=40)
    spec = ModelSpec.linear_in(2, IDENTITY)
    with pytest.raises(EmptyCell):
        fit_outcome_models(ds, spec, spec, pool_controls=False)
    # pooled controls still exist via the external arm
    _, m0 = fit_outcome_models(ds, spec, spec, pool_controls=True)
    assert m0.n_obs == 40


def test_treatment_ps_randomized_coefs_near_zero():
    rng = np.random.default_rng(21)
    n = 4000
    x = rng.standard_normal((n, 2))
    d = np.ones(n, dtype=int)
    t = (rng.random(n) < 0.4).astype(int)
    y = rng.standard_normal(n)
    ds = CompositeDataset(y, x, t, d)
    fit = fit_treatment_ps(ds, ModelSpec.linear_in(2, LOGIT))
    # randomization: covariate effects are zero, intercept near logit(0.4)
    assert abs(fit.coef[1]) < 0.15
    assert abs(fit.coef[2]) < 0.15
    frac = t.mean()
    assert fit.coef[0] == pytest.approx(np.log(frac / (1 - frac)), abs=0.02)


def test_treatment_ps_all_treated_empty_cell():
    ds = _shaped_dataset(n11=80, n10=0, n00=40)
    with pytest.raises(EmptyCell):
        fit_treatment_ps(ds, ModelSpec.linear_in(2, LOGIT))


def test_selection_ps_intercept_only_matches_q_hat():
    ds = _shaped_dataset()
    fit = fit_selection_ps(ds, ModelSpec(LOGIT, ()))
    assert expit(fit.coef)[0] == pytest.approx(ds.q_hat, abs=1e-10)


def test_selection_ps_no_external_empty_cell():
    ds = _shaped_dataset(n00=0)
    with pytest.raises(EmptyCell):
        fit_selection_ps(ds, ModelSpec.linear_in(2, LOGIT))


def test_fitted_treatment_ps_tracks_truth_on_grid():
    ds, _ = generate(ScenarioConfig(scenario="i", n=40000), 123)
    fit = fit_treatment_ps(ds, ModelSpec.linear_in(2, LOGIT))
    grid = np.array([[x1, x2] for x1 in (-1.0, 0.0, 1.0) for x2 in (-1.0, 0.0, 1.0)])
    truth = expit(0.2 * grid[:, 0] + 0.2 * grid[:, 1])
    assert np.max(np.abs(fit.predict(grid) - truth)) < 0.03


# --------------------------- variance ratio ----------------------------


def test_known_one_predicts_exactly_one(random_dataset):
    spec = ModelSpec.linear_in(2, IDENTITY)
    _, m0 = fit_outcome_models(random_dataset, spec, spec, pool_controls=True)
    ratio = fit_variance_ratio(random_dataset, m0, RATIO_KNOWN_ONE)
    assert np.all(ratio.predict_r(random_dataset.x) == 1.0)
    assert ratio.params.size == 0


def test_constant_ratio_near_one_when_noise_equal():
    rng = np.random.default_rng(31)
    n = 6000
    x = rng.standard_normal((n, 2))
    d = (rng.random(n) < 0.5).astype(int)
    t = ((d == 1) & (rng.random(n) < 0.5)).astype(int)
    y = 1.0 + x[:, 0] + rng.standard_normal(n)
    ds = CompositeDataset(y, x, t, d)
    spec = ModelSpec.linear_in(2, IDENTITY)
    _, m0 = fit_outcome_models(ds, spec, spec, pool_controls=True)
    ratio = fit_variance_ratio(ds, m0, RATIO_CONSTANT)
    assert ratio.const_ratio == pytest.approx(1.0, abs=0.1)


def test_loglinear_recovers_log_ratio_shape():
    ds, _ = generate(ScenarioConfig(scenario="i", n=20000), 77)
    spec = ModelSpec.linear_in(2, IDENTITY)
    _, m0 = fit_outcome_models(ds, spec, spec, pool_controls=True)
    ratio = fit_variance_ratio(ds, m0, RATIO_LOGLINEAR, spec)
    # log r(x) = (0.2 + 0.2 x1) - (0.4 - 0.2 x1) = -0.2 + 0.4 x1
    slope = ratio.coef_trial[1] - ratio.coef_external[1]
    intercept = np.log(ratio.predict_r(np.zeros((1, 2))))[0]
    assert slope == pytest.approx(0.4, abs=0.15)
    assert intercept == pytest.approx(-0.2, abs=0.15)


def test_variance_ratio_needs_rows():
    ds = _shaped_dataset(n11=40, n10=1, n00=40)
    spec = ModelSpec.linear_in(2, IDENTITY)
    _, m0 = fit_outcome_models(ds, spec, spec, pool_controls=True)
    with pytest.raises(EmptyCell):
        fit_variance_ratio(ds, m0, RATIO_CONSTANT)


def test_degenerate_variance_detected():
    rng = np.random.default_rng(8)
    n = 60
    x = rng.standard_normal((n, 2))
    d = np.array([1] * 40 + [0] * 20)
    t = np.array([1] * 20 + [0] * 40)
    y = 1.0 + 2.0 * x[:, 0] - x[:, 1] + t * 0.5  # zero control noise
    ds = CompositeDataset(y, x, t, d)
    spec = ModelSpec.linear_in(2, IDENTITY)
    _, m0 = fit_outcome_models(ds, spec, spec, pool_controls=True)
    with pytest.raises(DegenerateVariance):
        fit_variance_ratio(ds, m0, RATIO_CONSTANT)


def test_loglinear_smoothed_variance_calibrated():
    ds, _ = generate(ScenarioConfig(scenario="i", n=20000), 99)
    spec = ModelSpec.linear_in(2, IDENTITY)
    _, m0 = fit_outcome_models(ds, spec, spec, pool_controls=True)
    ratio = fit_variance_ratio(ds, m0, RATIO_LOGLINEAR, spec)
    trial_controls = (ds.d == 1) & (ds.t == 0)
    resid2 = (ds.y[trial_controls] - m0.predict(ds.x[trial_controls])) ** 2
    smoothed = ratio.predict_var_trial(ds.x[trial_controls])
    assert np.mean(smoothed) == pytest.approx(np.mean(resid2), rel=1e-9)


# ------------------------------- predict -------------------------------


def test_predict_through_link():
    lin = FittedGLM(IDENTITY, np.array([1.0, 2.0]), True, 1, 0.0, 2,
                    ModelSpec.linear_in(1, IDENTITY))
    assert lin.predict(np.array([[1.0]]))[0] == pytest.approx(3.0)
    logit0 = FittedGLM(LOGIT, np.array([0.0]), True, 1, 0.0, 2, ModelSpec(LOGIT, ()))
    assert logit0.predict(np.array([[0.5]]))[0] == pytest.approx(0.5)


def test_trimming_counts_and_clips():
    raw = 0.9999
    model = FittedGLM(
        LOGIT, np.array([np.log(raw / (1 - raw))]), True, 1, 0.0, 1, ModelSpec(LOGIT, ())
    )
    values, trimmed = trimmed_propensity(model, np.zeros((3, 1)), trim_eps=1e-3)
    assert np.all(values == 0.999)
    assert trimmed == 3


def test_fingerprint_stable_and_sensitive(random_dataset):
    from conftest import fit_sets

    sets = fit_sets(random_dataset)
    a = sets["pooled"].fingerprint()
    b = fit_sets(random_dataset)["pooled"].fingerprint()
    assert a == b
    assert a != sets["unpooled"].fingerprint()


def test_fit_model_applies_transform(random_dataset):
    spec = ModelSpec(IDENTITY, (Term("raw", 0), Term("pow", 0, 2)))
    controls = random_dataset.t == 0
    fit = fit_model(
        random_dataset.x[controls], random_dataset.y[controls], spec,
        random_dataset.covariate_names,
    )
    assert fit.coef.shape == (3,)
    assert fit.column_names == ["intercept", "x1", "pow(x1,2)"]
