"""Monte Carlo study: data generation, four estimators, performance metrics.

Data-generating mechanism per replication: draw three covariates (two
binary, one continuous) from a Gaussian copula with exchangeable latent
correlation rho; select rows into the pooled trial population by a
logistic model in (1, X); allocate selected rows to trials by multinomial
logit (trial 1 as reference); randomize treatment 1:1; draw binary
potential outcomes from logistic models. The unselected rows form the
target population, and each replication's estimand is the target mean of
expit(theta1'X) - expit(theta0'X).

Each trial is then reduced to aggregate data: marginal and one-at-a-time
subgroup risk differences with binomial standard errors (the continuous
covariate is dichotomized at its population median for subgroup reporting)
plus covariate means/proportions/SDs.

Estimators: ``cima`` (the tilting + GMM pipeline with the linear working
model and the target sample as base distribution, SE-only trial variance
inputs), ``meta`` (REML random-effects pooling), ``metareg`` (REML
meta-regression on trial-level covariate means, predicted at the target
means), and ``ipd`` (pooled individual-data logistic g-formula benchmark).

Scenario catalogs enumerate the full 2^4 factorial of the four parameter
groups. The mapping from scenario number to combination is: 5-trial
scenarios order (outcome coefficients, allocation, selection, covariate
distribution) from slowest- to fastest-varying; single-trial scenarios
order (outcome coefficients, selection, covariate distribution, n).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
import yaml
from scipy.optimize import minimize_scalar

from . import estimands, gmm, inference, tilting
from ._logistic import expit, irls_logistic, sandwich_cov
from .aggdata import (Covariate, CovariateSample, CovariateSchema,
                      EffectEstimate, MetaDataset, MomentSpec, MomentSummary,
                      Stratum, TrialAggregate)
from .cate import LinearCate
from .errors import AggcateError, DataValidationError, NumericalError

logger = logging.getLogger(__name__)

METHODS = ("cima", "meta", "metareg", "ipd")


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    setting: str                       # "5trial" | "single"
    n_total: int
    m: int
    eta: tuple[float, float, float, float]   # p1, p2, mu, rho
    beta: tuple[float, float, float, float]
    gammas: tuple[tuple[float, float, float, float], ...]  # trial 1 first, zeros
    theta1: tuple[float, float, float, float]
    theta0: tuple[float, float, float, float]


def _log(*vals):
    return tuple(math.log(v) for v in vals)


_ETAS = [(0.3, 0.3, 0.0, 0.3), (0.5, 0.5, 0.0, 0.5)]
_BETAS_5 = [_log(2, 0.5, 0.5, 0.5), _log(0.8, 2, 2, 2)]
_BETAS_1 = [_log(1.2, 0.5, 0.5, 0.5), _log(0.5, 2, 2, 2)]
_GAMMAS = [
    ((0.0, 0.0, 0.0, 0.0),
     _log(2, 0.5, 2, 0.5), _log(2, 0.8, 1.25, 0.8),
     _log(2, 0.5, 2, 0.5), _log(2, 0.8, 1.25, 0.8)),
    ((0.0, 0.0, 0.0, 0.0),
     _log(2, 2, 0.5, 2), _log(2, 1.25, 0.8, 1.25),
     _log(2, 2, 0.5, 2), _log(2, 1.25, 0.8, 2)),
]
_THETAS = [
    (_log(0.5, 2, 0.5, 1.25), _log(0.5, 0.5, 2, 0.8)),
    (_log(0.5, 1.25, 0.8, 1.1), _log(0.5, 0.8, 1.25, 0.9)),
]
_NS_SINGLE = [1000, 2000]


def five_trial_scenarios() -> list[Scenario]:
    out = []
    for t in range(2):
        for g in range(2):
            for b in range(2):
                for e in range(2):
                    sid = 8 * t + 4 * g + 2 * b + e + 1
                    out.append(Scenario(
                        scenario_id=f"5trial-{sid:02d}", setting="5trial",
                        n_total=5000, m=5, eta=_ETAS[e], beta=_BETAS_5[b],
                        gammas=_GAMMAS[g], theta1=_THETAS[t][0],
                        theta0=_THETAS[t][1]))
    return out


def single_trial_scenarios() -> list[Scenario]:
    out = []
    for t in range(2):
        for b in range(2):
            for e in range(2):
                for v in range(2):
                    sid = 8 * t + 4 * b + 2 * e + v + 1
                    out.append(Scenario(
                        scenario_id=f"single-{sid:02d}", setting="single",
                        n_total=_NS_SINGLE[v], m=1, eta=_ETAS[e],
                        beta=_BETAS_1[b], gammas=((0.0, 0.0, 0.0, 0.0),),
                        theta1=_THETAS[t][0], theta0=_THETAS[t][1]))
    return out


def scenario_catalog() -> list[Scenario]:
    return five_trial_scenarios() + single_trial_scenarios()


def write_scenario_catalog(path) -> None:
    doc = [{
        "scenario_id": s.scenario_id, "setting": s.setting,
        "n_total": s.n_total, "m": s.m, "eta": list(s.eta),
        "beta": list(s.beta), "gammas": [list(g) for g in s.gammas],
        "theta1": list(s.theta1), "theta0": list(s.theta0),
    } for s in scenario_catalog()]
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


def load_scenario_catalog(path) -> list[Scenario]:
    with open(path) as f:
        doc = yaml.safe_load(f)
    return [Scenario(
        scenario_id=e["scenario_id"], setting=e["setting"],
        n_total=int(e["n_total"]), m=int(e["m"]), eta=tuple(e["eta"]),
        beta=tuple(e["beta"]), gammas=tuple(tuple(g) for g in e["gammas"]),
        theta1=tuple(e["theta1"]), theta0=tuple(e["theta0"]))
        for e in doc]


@dataclass
class SimData:
    """One replication's generated data."""

    dataset: MetaDataset
    target: CovariateSample
    truth: float
    trial_design: np.ndarray           # pooled trial rows, columns (1, X)
    trial_treat: np.ndarray
    trial_outcome: np.ndarray
    trial_sizes: dict[str, int]


def _sim_schema(cut: float, trial_ids) -> CovariateSchema:
    cuts = tuple(((t, "x3"), (Stratum("low", hi=cut), Stratum("high", lo=cut)))
                 for t in trial_ids)
    return CovariateSchema(
        covariates=(Covariate("x1", "binary"), Covariate("x2", "binary"),
                    Covariate("x3", "continuous")),
        subgroup_cuts=cuts)


def _draw_covariates(rng, n: int, eta) -> np.ndarray:
    p1, p2, mu, rho = eta
    R = np.full((3, 3), rho)
    np.fill_diagonal(R, 1.0)
    Z = rng.standard_normal((n, 3)) @ np.linalg.cholesky(R).T
    from scipy.stats import norm
    x1 = (Z[:, 0] > norm.ppf(1 - p1)).astype(float)
    x2 = (Z[:, 1] > norm.ppf(1 - p2)).astype(float)
    x3 = mu + Z[:, 2]
    return np.column_stack([x1, x2, x3])


def _arm_effect(y1: np.ndarray, y0: np.ndarray):
    p1, p0 = y1.mean(), y0.mean()
    se = math.sqrt(p1 * (1 - p1) / len(y1) + p0 * (1 - p0) / len(y0))
    return p1 - p0, se


def run_dgp(scenario: Scenario, rep_seed) -> SimData:
    """Generate one replication; re-draws (new sub-seed) on degenerate arms."""
    base_ss = rep_seed if isinstance(rep_seed, np.random.SeedSequence) \
        else np.random.SeedSequence(rep_seed)
    for attempt in range(10):
        rng = np.random.default_rng(base_ss.spawn(1)[0])
        data = _try_dgp(scenario, rng)
        if data is not None:
            return data
        logger.warning("scenario %s: degenerate trial arm, re-drawing "
                       "(attempt %d)", scenario.scenario_id, attempt + 1)
    raise NumericalError(
        f"scenario {scenario.scenario_id}: could not draw non-degenerate "
        "trial data in 10 attempts")


def _try_dgp(scenario: Scenario, rng) -> SimData | None:
    n = scenario.n_total
    X = _draw_covariates(rng, n, scenario.eta)
    design = np.column_stack([np.ones(n), X])
    beta = np.asarray(scenario.beta)
    in_trials = rng.random(n) < expit(design @ beta)
    n_sel = int(in_trials.sum())
    if n_sel < 40 * scenario.m or n - n_sel < 30:
        return None

    gam = np.asarray(scenario.gammas)          # m x 4
    logits = design[in_trials] @ gam.T
    logits -= logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    u = rng.random(n_sel)
    trial_idx = (P.cumsum(axis=1) < u[:, None]).sum(axis=1)

    A = (rng.random(n_sel) < 0.5).astype(float)
    sel_design = design[in_trials]
    p1 = expit(sel_design @ np.asarray(scenario.theta1))
    p0 = expit(sel_design @ np.asarray(scenario.theta0))
    y1 = (rng.random(n_sel) < p1).astype(float)
    y0 = (rng.random(n_sel) < p0).astype(float)
    Y = np.where(A == 1, y1, y0)

    cut = scenario.eta[2]                      # population median of x3
    trial_ids = tuple(f"trial{s + 1}" for s in range(scenario.m))
    schema = _sim_schema(cut, trial_ids)
    Xsel = X[in_trials]

    trials = []
    sizes = {}
    for s, tid in enumerate(trial_ids):
        rows = trial_idx == s
        n_s = int(rows.sum())
        a, y = A[rows], Y[rows]
        xs = Xsel[rows]
        t_mask, c_mask = a == 1, a == 0
        if t_mask.sum() < 2 or c_mask.sum() < 2:
            return None
        est, se = _arm_effect(y[t_mask], y[c_mask])
        if se <= 0:
            return None
        effects = [EffectEstimate(tid, None, None, est, se)]
        strata = [("x1", "0", xs[:, 0] == 0), ("x1", "1", xs[:, 0] == 1),
                  ("x2", "0", xs[:, 1] == 0), ("x2", "1", xs[:, 1] == 1),
                  ("x3", "low", xs[:, 2] < cut), ("x3", "high", xs[:, 2] >= cut)]
        for cov, level, mask in strata:
            tm, cm = mask & t_mask, mask & c_mask
            if tm.sum() < 2 or cm.sum() < 2:
                continue  # unreported subgroup, allowed
            est_k, se_k = _arm_effect(y[tm], y[cm])
            if se_k <= 0:
                continue
            effects.append(EffectEstimate(tid, cov, level, est_k, se_k))
        sd3 = float(xs[:, 2].std(ddof=1))
        moments = (
            MomentSummary(tid, MomentSpec("proportion", "x1", "1"),
                          float(xs[:, 0].mean()), n_s),
            MomentSummary(tid, MomentSpec("proportion", "x2", "1"),
                          float(xs[:, 1].mean()), n_s),
            MomentSummary(tid, MomentSpec("mean", "x3"),
                          float(xs[:, 2].mean()), n_s),
            MomentSummary(tid, MomentSpec("second_moment", "x3"),
                          sd3 ** 2 * (n_s - 1) / n_s + float(xs[:, 2].mean()) ** 2,
                          n_s),
        )
        trials.append(TrialAggregate(tid, tuple(effects), moments, n_s))
        sizes[tid] = n_s

    dataset = MetaDataset(schema=schema, trials=tuple(trials))
    Xtar = X[~in_trials]
    target = CovariateSample(schema, {
        "x1": Xtar[:, 0].astype(np.int8), "x2": Xtar[:, 1].astype(np.int8),
        "x3": Xtar[:, 2]}, "target")
    tar_design = design[~in_trials]
    truth = float(np.mean(expit(tar_design @ np.asarray(scenario.theta1))
                          - expit(tar_design @ np.asarray(scenario.theta0))))
    return SimData(dataset=dataset, target=target, truth=truth,
                   trial_design=sel_design, trial_treat=A, trial_outcome=Y,
                   trial_sizes=sizes)


def cima_estimate(dataset: MetaDataset, target: CovariateSample,
                  weighting: str = "inverse-se2"):
    """The aggregate-data pipeline with the linear working CATE model."""
    base = CovariateSample(dataset.schema, target.columns, "base")
    tilts = tilting.solve_all_tilts(base, dataset)
    reps = tilting.evaluate_representers(tilts, base, dataset)
    model = LinearCate.from_formula("~ 1 + x1 + x2 + x3", dataset.schema)
    system = gmm.build_system(reps, dataset, model, base, tilts)
    fit = gmm.fit(system, weighting=weighting)
    jac = gmm.compute_jacobians(system, fit.theta, W=fit.W)
    covs = inference.default_trial_covariances(dataset, tilts, base)
    variance = inference.assemble_variance(fit, system, jac, covs,
                                           n_target=target.n)
    res = estimands.transport_ate(fit, target, variance)
    return res.psi_hat, res.se


def ipd_gformula(trial_design: np.ndarray, treat: np.ndarray,
                 outcome: np.ndarray, target_design: np.ndarray):
    """Pooled logistic g-formula with treatment-by-covariate interactions."""
    Z = np.column_stack([trial_design, treat,
                         treat[:, None] * trial_design[:, 1:]])
    beta = irls_logistic(Z, outcome)
    cov = sandwich_cov(Z, outcome, beta)
    n0, k = target_design.shape
    Z1 = np.column_stack([target_design, np.ones(n0), target_design[:, 1:]])
    Z0 = np.column_stack([target_design, np.zeros(n0),
                          np.zeros((n0, k - 1))])
    p1, p0 = expit(Z1 @ beta), expit(Z0 @ beta)
    rd = p1 - p0
    psi = float(rd.mean())
    grad = (p1 * (1 - p1))[:, None] * Z1 - (p0 * (1 - p0))[:, None] * Z0
    jpsi = grad.mean(axis=0)
    var = float(((rd - psi) ** 2).sum()) / n0 ** 2 + float(jpsi @ cov @ jpsi)
    return psi, math.sqrt(var)


def _reml_nll_intercept(tau2: float, y: np.ndarray, v: np.ndarray) -> float:
    w = 1.0 / (v + tau2)
    mu = float(w @ y / w.sum())
    return 0.5 * (np.log(v + tau2).sum() + math.log(w.sum())
                  + float(w @ (y - mu) ** 2))


def meta_random_effects(tau: np.ndarray, se: np.ndarray):
    """REML random-effects pooling. Returns (pooled, pooled_se, tau2)."""
    tau, se = np.asarray(tau, dtype=float), np.asarray(se, dtype=float)
    if len(tau) < 2:
        raise DataValidationError("random-effects pooling needs >= 2 trials")
    v = se ** 2
    hi = max(10.0 * float(np.var(tau)), 10.0 * float(v.max()), 1e-6)
    res = minimize_scalar(_reml_nll_intercept, bounds=(0.0, hi),
                          args=(tau, v), method="bounded",
                          options={"xatol": 1e-12})
    tau2 = float(res.x)
    if _reml_nll_intercept(0.0, tau, v) <= res.fun:
        tau2 = 0.0
    w = 1.0 / (v + tau2)
    pooled = float(w @ tau / w.sum())
    return pooled, math.sqrt(1.0 / w.sum()), tau2


def _reml_nll_regression(tau2: float, y: np.ndarray, v: np.ndarray,
                         X: np.ndarray) -> float:
    w = 1.0 / (v + tau2)
    XtWX = (X * w[:, None]).T @ X
    sign, logdet = np.linalg.slogdet(XtWX)
    if sign <= 0:
        return np.inf
    beta = np.linalg.solve(XtWX, (X * w[:, None]).T @ y)
    r = y - X @ beta
    return 0.5 * (np.log(v + tau2).sum() + logdet + float(w @ r ** 2))


def meta_regression(tau: np.ndarray, se: np.ndarray, X: np.ndarray,
                    x_target: np.ndarray):
    """REML meta-regression of effects on trial-level covariate means,
    predicted at the target means. Returns (prediction, prediction_se,
    tau2, beta)."""
    tau, se = np.asarray(tau, dtype=float), np.asarray(se, dtype=float)
    X = np.asarray(X, dtype=float)
    m, p = X.shape
    if m <= p:
        raise DataValidationError(
            f"meta-regression needs more trials ({m}) than regressors ({p})")
    if np.linalg.matrix_rank(X) < p:
        raise NumericalError(
            "meta-regression design is rank deficient (limited between-trial "
            "variation in covariate means)")
    v = se ** 2
    hi = max(10.0 * float(np.var(tau)), 10.0 * float(v.max()), 1e-6)
    res = minimize_scalar(_reml_nll_regression, bounds=(0.0, hi),
                          args=(tau, v, X), method="bounded",
                          options={"xatol": 1e-12})
    tau2 = float(res.x)
    if _reml_nll_regression(0.0, tau, v, X) <= res.fun:
        tau2 = 0.0
    w = 1.0 / (v + tau2)
    XtWX = (X * w[:, None]).T @ X
    beta = np.linalg.solve(XtWX, (X * w[:, None]).T @ tau)
    cov = np.linalg.inv(XtWX)
    pred = float(x_target @ beta)
    pred_se = math.sqrt(float(x_target @ cov @ x_target))
    return pred, pred_se, tau2, beta


def _trial_mean_design(dataset: MetaDataset) -> np.ndarray:
    rows = []
    for t in dataset.trials:
        vals = {m.spec.label(): m.value for m in t.moments}
        rows.append([1.0, vals["proportion(x1=1)"], vals["proportion(x2=1)"],
                     vals["mean(x3)"]])
    return np.asarray(rows)


def run_replication(scenario: Scenario, rep_seed, methods=METHODS) -> dict:
    """One replication: returns per-method (estimate, se) or None on failure."""
    data = run_dgp(scenario, rep_seed)
    out: dict = {"truth": data.truth}
    tau = np.array([t.effects[0].estimate for t in data.dataset.trials])
    se = np.array([t.effects[0].se for t in data.dataset.trials])
    for method in methods:
        try:
            if method == "cima":
                out[method] = cima_estimate(data.dataset, data.target)
            elif method == "ipd":
                tar = np.column_stack([
                    np.ones(data.target.n), data.target.numeric_column("x1"),
                    data.target.numeric_column("x2"),
                    data.target.numeric_column("x3")])
                out[method] = ipd_gformula(data.trial_design, data.trial_treat,
                                           data.trial_outcome, tar)
            elif method == "meta":
                pooled, pse, _ = meta_random_effects(tau, se)
                out[method] = (pooled, pse)
            elif method == "metareg":
                X = _trial_mean_design(data.dataset)
                x0 = np.array([
                    1.0, data.target.numeric_column("x1").mean(),
                    data.target.numeric_column("x2").mean(),
                    data.target.numeric_column("x3").mean()])
                pred, pse, _, _ = meta_regression(tau, se, X, x0)
                out[method] = (pred, pse)
            else:
                raise DataValidationError(f"unknown method {method!r}")
        except (AggcateError, np.linalg.LinAlgError) as exc:
            logger.info("scenario %s rep: %s failed: %s",
                        scenario.scenario_id, method, exc)
            out[method] = None
    return out


def _metric_rows(scenario: Scenario, methods, results: list[dict],
                 reps: int) -> list[dict]:
    rows = []
    truths = np.array([r["truth"] for r in results])
    for method in methods:
        pairs = [(r[method], r["truth"]) for r in results
                 if r[method] is not None]
        n_failed = len(results) - len(pairs)
        flagged = reps > 0 and n_failed >= 0.02 * reps
        if flagged:
            warnings.warn(f"scenario {scenario.scenario_id}, method {method}: "
                          f"{n_failed}/{reps} replications failed")
        if pairs:
            est = np.array([p[0][0] for p in pairs])
            ses = np.array([p[0][1] for p in pairs])
            tru = np.array([p[1] for p in pairs])
            err = est - tru
            bias = float(err.mean())
            variance = float(err.var(ddof=1)) if len(err) > 1 else 0.0
            covered = np.abs(err) <= inference.Z95 * ses
            row = {
                "scenario": scenario.scenario_id, "method": method,
                "bias": bias, "variance": variance,
                "mse": float((err ** 2).mean()),
                "mae": float(np.abs(err).mean()),
                "coverage": float(covered.mean()),
                "truth": float(tru.mean()),
                "reps_used": len(pairs), "n_failed": n_failed,
                "flagged": flagged,
                "mc_se_bias": math.sqrt(variance / len(err)) if len(err) > 1
                else float("nan"),
            }
        else:
            row = {"scenario": scenario.scenario_id, "method": method,
                   "bias": float("nan"), "variance": float("nan"),
                   "mse": float("nan"), "mae": float("nan"),
                   "coverage": float("nan"),
                   "truth": float(truths.mean()) if reps else float("nan"),
                   "reps_used": 0, "n_failed": n_failed, "flagged": flagged,
                   "mc_se_bias": float("nan")}
        rows.append(row)
    return rows


METRIC_COLUMNS = ["scenario", "method", "bias", "variance", "mse", "mae",
                  "coverage", "truth", "reps_used", "n_failed", "flagged",
                  "mc_se_bias"]


def run_study(scenarios, methods=METHODS, replications: int = 1000,
              seed: int = 42, jobs: int = 1) -> pd.DataFrame:
    """Metrics table over scenarios x methods, deterministic given seed."""
    rows: list[dict] = []
    master = np.random.SeedSequence(seed)
    scenario_seeds = master.spawn(len(scenarios))
    for scenario, scen_ss in zip(scenarios, scenario_seeds):
        if replications == 0:
            continue
        rep_seeds = scen_ss.spawn(replications)
        if jobs == 1:
            results = [run_replication(scenario, ss, methods)
                       for ss in rep_seeds]
        else:
            from joblib import Parallel, delayed
            results = Parallel(n_jobs=jobs, batch_size="auto")(
                delayed(run_replication)(scenario, ss, methods)
                for ss in rep_seeds)
        rows.extend(_metric_rows(scenario, methods, results, replications))
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)
