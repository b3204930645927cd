"""Command-line front end.

Subcommands: ``estimate`` analyzes a CSV, ``diagnose`` runs the
exchangeability test and overlap diagnostics, ``simulate`` runs scenario
replications, ``report`` renders a results JSON as a text table. Options
can come from a JSON config file; explicit flags override it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from . import simlab
from .dataset import (
    OUTCOME_BINARY,
    ColumnSchema,
    CompositeDataset,
    load_csv,
    summarize,
    validate,
)
from .errors import ConfigError, EcborrowError, EmptyCell, OverlapNoExternal
from .estimators import (
    ESTIMAND_PSI,
    ESTIMAND_TAU,
    ESTIMAND_XI,
    METHOD_BASELINE,
    METHOD_FULL,
    METHOD_TREATED_ONLY,
    METHOD_TRIAL,
    estimate,
    influence_values,
)
from .inference import (
    VARIANCE_BOOTSTRAP,
    VARIANCE_IF,
    bias_bound,
    bootstrap_variance,
    if_variance,
    overlap_diagnostics,
    test,
    test_mean_exchangeability,
)
from .nuisance import (
    IDENTITY,
    LOGIT,
    RATIO_KNOWN_ONE,
    RATIO_MODES,
    ModelSpec,
    NuisanceSet,
    fit_model,
    fit_outcome_models,
    fit_selection_ps,
    fit_treatment_ps,
    fit_variance_ratio,
)

log = logging.getLogger("ecborrow")

_RATIO_FLAGS = {"known1": "known_one", "constant": "constant", "loglinear": "loglinear"}
_SIDE_FLAGS = {"greater": "greater", "less": "less", "two-sided": "two_sided"}

DEFAULTS = {
    "schema": None,
    "estimand": "tau,psi,xi",
    "method": "both",
    "ratio": None,
    "treated_only": False,
    "variance": "if",
    "B": None,
    "null": 0.0,
    "side": "greater",
    "level": 0.95,
    "seed": 0,
    "jobs": 1,
    "models": None,
    "bias_bound": None,
    "scenario": "i",
    "reps": 200,
    "n": 1000,
    "dgp": None,
    "boxplot_csv": None,
    "out": None,
    "input": None,
    "results": None,
}


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


@dataclass
class RunConfig:
    """One command's resolved options, after CLI/file/default merging."""

    command: str
    input: str | None = None
    schema: object = None
    estimand: str = "tau,psi,xi"
    method: str = "both"
    ratio: str | None = None
    treated_only: bool = False
    variance: str = "if"
    B: int | None = None
    null: float = 0.0
    side: str = "greater"
    level: float = 0.95
    seed: int = 0
    jobs: int = 1
    models: dict | None = None
    bias_bound: float | None = None
    scenario: str = "i"
    reps: int = 200
    n: int = 1000
    dgp: dict | None = None
    boxplot_csv: str | None = None
    out: str | None = None
    results: str | None = None

    def __post_init__(self):
        if self.side not in _SIDE_FLAGS:
            raise ConfigError(f"unknown sidedness {self.side!r}")
        if not 0.0 < float(self.level) < 1.0:
            raise ConfigError(f"level must be in (0,1), got {self.level}")
        if self.variance not in ("if", "bootstrap"):
            raise ConfigError(f"unknown variance method {self.variance!r}")
        if self.variance == "if" and self.B is not None:
            raise ConfigError("--B is only meaningful with --variance bootstrap")
        if self.variance == "bootstrap":
            self.B = 500 if self.B is None else int(self.B)
            if self.B < 100:
                raise ConfigError("bootstrap needs B >= 100")
        if self.treated_only and self.method == "trial":
            raise ConfigError("treated-only mode excludes the trial-based method")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")

    @property
    def sidedness(self) -> str:
        return _SIDE_FLAGS[self.side]

    @property
    def estimands(self) -> list[str]:
        raw = self.estimand
        if isinstance(raw, (list, tuple)):
            raw = ",".join(raw)
        names = [e.strip() for e in str(raw).split(",") if e.strip()]
        for name in names:
            if name not in (ESTIMAND_TAU, ESTIMAND_PSI, ESTIMAND_XI):
                raise ConfigError(f"unknown estimand {name!r}")
        return names


def _merge_options(args: argparse.Namespace) -> RunConfig:
    """Precedence: explicit CLI flags > config file > defaults."""
    merged = dict(DEFAULTS)
    merged.update(_load_config_file(getattr(args, "config", None)))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    unknown = set(merged) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(command=args.command, **merged)


def _parse_schema(raw) -> ColumnSchema | None:
    if raw is None:
        return None
    if isinstance(raw, dict):
        return ColumnSchema.from_mapping(raw)
    text = str(raw)
    if text.startswith("@"):
        text = Path(text[1:]).read_text(encoding="utf-8")
    elif text.endswith(".json") and Path(text).exists():
        text = Path(text).read_text(encoding="utf-8")
    try:
        return ColumnSchema.from_mapping(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"schema is not valid JSON: {exc}") from None


def _model_specs(ds: CompositeDataset, cfg: RunConfig) -> dict:
    outcome_family = LOGIT if ds.outcome_kind == OUTCOME_BINARY else IDENTITY
    specs = {
        "m1": ModelSpec.linear_in(ds.k, outcome_family),
        "m0": ModelSpec.linear_in(ds.k, outcome_family),
        "p": ModelSpec.linear_in(ds.k, LOGIT),
        "pi": ModelSpec.linear_in(ds.k, LOGIT),
        "variance": ModelSpec.linear_in(ds.k, IDENTITY),
    }
    for name, payload in (cfg.models or {}).items():
        if name not in specs:
            raise ConfigError(f"unknown model name {name!r} in config")
        specs[name] = ModelSpec.from_dict(payload)
    return specs


def _resolve_ratio(ds: CompositeDataset, cfg: RunConfig) -> str:
    raw = cfg.ratio
    if ds.outcome_kind == OUTCOME_BINARY:
        if raw is not None and _RATIO_FLAGS.get(raw, raw) != RATIO_KNOWN_ONE:
            log.info("outcome is binary: variance ratio forced to one (known1)")
        else:
            log.info("outcome is binary: variance ratio set to one (known1)")
        return RATIO_KNOWN_ONE
    if raw is None:
        return "loglinear"
    mode = _RATIO_FLAGS.get(raw, raw)
    if mode not in RATIO_MODES:
        raise ConfigError(f"unknown ratio mode {raw!r}")
    return mode


@dataclass
class EstimatorPlan:
    """Everything needed to recompute one estimate from raw data.

    Used both for the primary analysis and inside bootstrap replicates,
    which refit every working model on each resample.
    """

    estimand: str
    method: str
    specs: dict
    ratio_mode: str

    def fit_sets(self, ds: CompositeDataset) -> dict:
        sets: dict = {}
        if self.method == METHOD_TREATED_ONLY:
            # outcome model on all controls; no treated-arm models needed, and
            # the variance ratio cancels from the estimator, so it stays at one
            controls = ds.t == 0
            if not controls.any():
                raise EmptyCell("no control rows to fit the control outcome model")
            m0 = fit_model(ds.x[controls], ds.y[controls], self.specs["m0"], ds.covariate_names)
            pi = fit_selection_ps(ds, self.specs["pi"])
            r = fit_variance_ratio(ds, m0, RATIO_KNOWN_ONE)
            sets["treated_only"] = NuisanceSet(m0=m0, r=r, m0_pooled=True, pi=pi)
            return sets
        m1, m0_pooled = fit_outcome_models(ds, self.specs["m1"], self.specs["m0"], True)
        p = fit_treatment_ps(ds, self.specs["p"])
        pi = fit_selection_ps(ds, self.specs["pi"]) if ds.n2 > 0 else None
        r = fit_variance_ratio(ds, m0_pooled, self.ratio_mode, self.specs["variance"])
        sets["pooled"] = NuisanceSet(m0=m0_pooled, r=r, m0_pooled=True, m1=m1, p=p, pi=pi)
        _, m0_trial = fit_outcome_models(ds, self.specs["m1"], self.specs["m0"], False)
        sets["unpooled"] = NuisanceSet(m0=m0_trial, r=r, m0_pooled=False, m1=m1, p=p, pi=pi)
        return sets

    def nuisances_for(self, sets: dict) -> NuisanceSet:
        if self.method == METHOD_TREATED_ONLY:
            return sets["treated_only"]
        if self.method in (METHOD_TRIAL, METHOD_BASELINE):
            return sets["unpooled"]
        return sets["pooled"]

    def __call__(self, ds: CompositeDataset) -> float:
        sets = self.fit_sets(ds)
        return estimate(ds, self.nuisances_for(sets), self.estimand, self.method).point


def _requested_pairs(ds: CompositeDataset, cfg: RunConfig) -> list[tuple[str, str]]:
    pairs: list[tuple[str, str]] = []
    for estimand in cfg.estimands:
        if cfg.treated_only or cfg.method == "treated-only":
            if estimand != ESTIMAND_TAU:
                raise ConfigError("treated-only mode only estimates tau")
            pairs.append((estimand, METHOD_TREATED_ONLY))
            continue
        comparator = METHOD_TRIAL if estimand == ESTIMAND_TAU else METHOD_BASELINE
        if cfg.method == "full":
            pairs.append((estimand, METHOD_FULL))
        elif cfg.method == "trial":
            pairs.append((estimand, comparator))
        elif cfg.method == "both":
            pairs.append((estimand, METHOD_FULL))
            pairs.append((estimand, comparator))
        else:
            raise ConfigError(f"unknown method flag {cfg.method!r}")
    if ds.n2 == 0:
        for estimand, method in pairs:
            if method != METHOD_TRIAL:
                raise OverlapNoExternal(
                    "dataset has no external rows; only the trial-based tau "
                    "estimator is available"
                )
    return pairs


def cmd_estimate(cfg: RunConfig) -> dict:
    if not cfg.input:
        raise ConfigError("estimate needs --input")
    ds = load_csv(cfg.input, _parse_schema(cfg.schema))
    ratio_mode = _resolve_ratio(ds, cfg)
    specs = _model_specs(ds, cfg)
    pairs = _requested_pairs(ds, cfg)
    level = float(cfg.level)
    null_value = float(cfg.null)

    results = []
    plans = [EstimatorPlan(est, meth, specs, ratio_mode) for est, meth in pairs]
    shared_sets: dict = {}
    for plan in plans:
        key = plan.method == METHOD_TREATED_ONLY
        if key not in shared_sets:
            shared_sets[key] = plan.fit_sets(ds)
        sets = shared_sets[key]
        nuis = plan.nuisances_for(sets)
        est = estimate(ds, nuis, plan.estimand, plan.method)
        if cfg.variance == "if":
            ifv = influence_values(ds, nuis, plan.estimand, plan.method, est.point)
            var = if_variance(ifv)
            method_label = VARIANCE_IF
            extra = {}
        else:
            boot = bootstrap_variance(
                ds, plan, n_replicates=cfg.B, seed=cfg.seed, level=level, jobs=cfg.jobs
            )
            var = boot.variance
            method_label = VARIANCE_BOOTSTRAP
            extra = {"bootstrap": boot.to_dict()}
        inference = test(
            est,
            var,
            null_value=null_value,
            sidedness=cfg.sidedness,
            level=level,
            variance_method=method_label,
        )
        payload = inference.to_dict()
        payload.update(extra)
        results.append(payload)

    return {
        "command": "estimate",
        "input": str(cfg.input),
        "dataset": summarize(ds).to_dict(),
        "ratio_mode": ratio_mode,
        "variance_method": cfg.variance,
        "null_value": null_value,
        "sidedness": cfg.sidedness,
        "level": level,
        "seed": cfg.seed,
        "estimates": results,
    }


def cmd_diagnose(cfg: RunConfig) -> dict:
    if not cfg.input:
        raise ConfigError("diagnose needs --input")
    ds = load_csv(cfg.input, _parse_schema(cfg.schema))
    ratio_mode = _resolve_ratio(ds, cfg)
    specs = _model_specs(ds, cfg)
    report: dict = {
        "command": "diagnose",
        "input": str(cfg.input),
        "dataset": summarize(ds).to_dict(),
        "validation": validate(ds).to_dict(),
        "ratio_mode": ratio_mode,
    }
    exchange = test_mean_exchangeability(ds)
    report["exchangeability"] = exchange.to_dict()
    plan = EstimatorPlan(ESTIMAND_TAU, METHOD_FULL, specs, ratio_mode)
    sets = plan.fit_sets(ds)
    nuis = sets["pooled"]
    report["overlap"] = overlap_diagnostics(ds, nuis).to_dict()
    if cfg.bias_bound is not None:
        report["bias_bound"] = bias_bound(ds, nuis, bound=float(cfg.bias_bound)).to_dict()
    return report


def cmd_simulate(cfg: RunConfig) -> dict:
    scenarios = simlab.SCENARIOS if cfg.scenario == "all" else (cfg.scenario,)
    keep = cfg.boxplot_csv is not None
    dgp = cfg.dgp or {}
    if not isinstance(dgp, dict):
        raise ConfigError("config key 'dgp' must be an object of ScenarioConfig fields")
    dgp = {key: tuple(val) if isinstance(val, list) else val for key, val in dgp.items()}
    runs = {}
    results = []
    for sc in scenarios:
        try:
            scenario_cfg = simlab.ScenarioConfig(scenario=sc, n=int(cfg.n), **dgp)
        except TypeError as exc:
            raise ConfigError(f"bad 'dgp' config: {exc}") from None
        result = simlab.run_monte_carlo(
            scenario_cfg, int(cfg.reps), master_seed=cfg.seed, jobs=cfg.jobs,
            keep_draws=keep,
        )
        results.append(result)
        runs[sc] = result.to_dict()
    if keep:
        rows = simlab.export_boxplot_data(results, cfg.boxplot_csv)
        log.info("wrote %d boxplot rows to %s", rows, cfg.boxplot_csv)
    return {
        "command": "simulate",
        "reps": int(cfg.reps),
        "n": int(cfg.n),
        "seed": cfg.seed,
        "scenarios": runs,
    }


def cmd_report(cfg: RunConfig) -> dict:
    if not cfg.results:
        raise ConfigError("report needs --results pointing at an estimate JSON")
    path = Path(cfg.results)
    if not path.exists():
        raise ConfigError(f"results file not found: {path}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    lines = render_report(payload)
    print("\n".join(lines))
    return {"command": "report", "lines": lines}


def render_report(payload: dict) -> list[str]:
    """Text tables for estimate and simulate JSON payloads."""
    command = payload.get("command")
    if command == "estimate" and "estimates" in payload:
        return render_estimates(payload)
    if command == "simulate" and "scenarios" in payload:
        return render_simulation(payload)
    raise ConfigError("report expects JSON written by the estimate or simulate command")


def render_estimates(payload: dict) -> list[str]:
    """Point x100, variance x10000, p-value per estimate."""
    header = f"{'estimand':<10}{'method':<14}{'point x100':>12}{'var x10000':>12}{'p-value':>10}"
    lines = [header, "-" * len(header)]
    for item in payload["estimates"]:
        lines.append(
            f"{item['estimand']:<10}{item['method']:<14}"
            f"{item['point'] * 100:>12.2f}{item['variance'] * 10000:>12.2f}"
            f"{item['p_value']:>10.3f}"
        )
    return lines


def render_simulation(payload: dict) -> list[str]:
    """Per-scenario coverage table across estimators."""
    header = (
        f"{'scenario':<10}{'estimator':<16}{'bias':>10}{'sd':>10}"
        f"{'mse':>10}{'coverage':>10}"
    )
    lines = [header, "-" * len(header)]
    for scenario in sorted(payload["scenarios"]):
        summaries = payload["scenarios"][scenario]["summaries"]
        for name in sorted(summaries):
            s = summaries[name]
            sd = f"{s['sd']:>10.4f}" if s["sd"] is not None else f"{'-':>10}"
            lines.append(
                f"{scenario:<10}{name:<16}{s['mean_bias']:>10.4f}{sd}"
                f"{s['mse']:>10.4f}{s['coverage']:>10.3f}"
            )
    return lines


# ------------------------------ plumbing ------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecborrow",
        description="Treatment-effect estimation with external control borrowing",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--out", help="write the JSON report here as well as stdout")

    p_est = sub.add_parser("estimate", help="analyze a CSV dataset")
    common(p_est)
    p_est.add_argument("--input")
    p_est.add_argument("--schema", help="JSON column map, inline or @file")
    p_est.add_argument("--estimand", help="comma list from tau,psi,xi")
    p_est.add_argument("--method", choices=["full", "trial", "treated-only", "both"])
    p_est.add_argument("--ratio", choices=list(_RATIO_FLAGS))
    p_est.add_argument("--treated-only", dest="treated_only", action="store_const", const=True)
    p_est.add_argument("--variance", choices=["if", "bootstrap"])
    p_est.add_argument("--B", type=int, dest="B")
    p_est.add_argument("--null", type=float)
    p_est.add_argument("--side", choices=list(_SIDE_FLAGS))
    p_est.add_argument("--level", type=float)

    p_diag = sub.add_parser("diagnose", help="exchangeability test and overlap diagnostics")
    common(p_diag)
    p_diag.add_argument("--input")
    p_diag.add_argument("--schema")
    p_diag.add_argument("--ratio", choices=list(_RATIO_FLAGS))
    p_diag.add_argument("--bias-bound", dest="bias_bound", type=float)

    p_sim = sub.add_parser("simulate", help="run scenario replications")
    common(p_sim)
    p_sim.add_argument("--scenario", choices=[*simlab.SCENARIOS, "all"])
    p_sim.add_argument("--reps", type=int)
    p_sim.add_argument("--n", type=int)
    p_sim.add_argument("--boxplot-csv", dest="boxplot_csv")

    p_rep = sub.add_parser("report", help="render an estimate JSON as a text table")
    p_rep.add_argument("--results")
    p_rep.add_argument("--config", help=argparse.SUPPRESS)

    return parser


_COMMANDS = {
    "estimate": cmd_estimate,
    "diagnose": cmd_diagnose,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _merge_options(args)
        payload = _COMMANDS[args.command](cfg)
    except EcborrowError as exc:
        error_payload = {"error": exc.to_dict()}
        print(json.dumps(error_payload, indent=2, sort_keys=True))
        return exc.exit_code
    if args.command != "report":
        text = json.dumps(payload, indent=2, sort_keys=True)
        print(text)
        if cfg.out:
            Path(cfg.out).write_text(text + "\n", encoding="utf-8")
    return 0


if __name__ == "__main__":
    sys.exit(main())
