"""Plug-in variance estimation for the GMM CATE fit.

The moment covariance decomposes by data source:

    Omega = pi_q Gamma_q + sum_s pi_s Gamma_s,
    Gamma_s = S_s SigmaTau_s S_s' + A_s SigmaMu_s A_s'
              + S_s SigmaTauMu_s A_s' + A_s SigmaTauMu_s' S_s',

where S_s selects trial s's moment rows, A_s = J^m_eta_s J^eta_mu_s, and
pi_* = n / n_*. Trial reports rarely include the covariances needed for
SigmaTau, so the default fills in correlations from the tilted base sample
(overall-vs-subgroup via stratum probability, zero across disjoint strata
of one covariate, overlap-probability ratio across covariates) and sets
SigmaTauMu to zero. Then V_theta = J^theta_m Omega (J^theta_m)' and
Var(theta-hat) = V_theta / n.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .aggdata import CovariateSample, MetaDataset, TrialAggregate
from .errors import DataValidationError
from .gmm import CateFit, JacobianSet, MomentSystem
from .tilting import TiltFit

logger = logging.getLogger(__name__)

Z95 = 1.96
CORR_CLIP = 0.999


def wald_ci(estimate: float, se: float) -> tuple[float, float]:
    return estimate - Z95 * se, estimate + Z95 * se


@dataclass
class TrialCovariances:
    """Within-trial covariance inputs, one entry per trial id."""

    sigma_tau: dict[str, np.ndarray]
    sigma_mu: dict[str, np.ndarray]
    sigma_taumu: dict[str, np.ndarray | None]
    repair_mass: dict[str, float]


@dataclass
class VarianceReport:
    omega: np.ndarray
    v_theta: np.ndarray
    theta_cov: np.ndarray
    contributions: dict[str, np.ndarray]
    pi: dict[str, float]
    n_total: int
    n_target: int
    psd_repair: float
    j_stat: float | None
    trial_ids: tuple[str, ...]


def _stratum_indicator_for_effect(dataset: MetaDataset, base: CovariateSample,
                                  trial_id: str, effect) -> np.ndarray:
    cov = dataset.schema.covariate(effect.covariate)
    stratum = dataset.schema.resolve_stratum(trial_id, effect.covariate,
                                             effect.level)
    return dataset.schema.stratum_indicator(stratum, cov,
                                            base.column(effect.covariate))


def _flag_heteroscedastic_counts(trial: TrialAggregate) -> None:
    for e in trial.effects:
        if e.counts is None:
            continue
        e1, n1, e0, n0 = e.counts
        v1 = e1 / n1 * (1 - e1 / n1)
        v0 = e0 / n0 * (1 - e0 / n0)
        lo, hi = min(v1, v0), max(v1, v0)
        if lo > 0 and hi / lo > 2.0:
            logger.info(
                "trial %r effect (%s, %s): arm outcome variances differ by "
                "%.1fx; the homoscedastic correlation approximation may be "
                "off", trial.trial_id, e.covariate, e.level, hi / lo)


def approximate_sigma_tau(trial: TrialAggregate, tilt: TiltFit,
                          base: CovariateSample,
                          dataset: MetaDataset) -> tuple[np.ndarray, float]:
    """Within-trial effect covariance from reported SEs and tilted overlaps.

    Returns (SigmaTau, repair_mass): the J_s x J_s covariance of
    sqrt(n_s) tau-hat, and the relative eigenvalue mass clipped to restore
    positive semidefiniteness (0 when no repair was needed).
    """
    effects = trial.effects
    se = np.array([e.se for e in effects])
    if (se <= 0).any():
        bad = effects[int(np.argmin(se))]
        raise DataValidationError(
            f"trial {trial.trial_id!r}: missing or zero SE for effect "
            f"({bad.covariate}, {bad.level})")
    _flag_heteroscedastic_counts(trial)

    w = tilt.weights
    J_s = len(effects)
    probs = np.ones(J_s)
    indicators = [None] * J_s
    for j, e in enumerate(effects):
        if not e.is_marginal:
            ind = _stratum_indicator_for_effect(dataset, base,
                                                trial.trial_id, e)
            indicators[j] = ind
            probs[j] = float((w * ind).mean())

    C = np.eye(J_s)
    for j in range(1, J_s):
        c = probs[j] * se[j] / se[0]
        C[0, j] = C[j, 0] = np.clip(c, -CORR_CLIP, CORR_CLIP)
    for i in range(1, J_s):
        for j in range(i + 1, J_s):
            if effects[i].covariate == effects[j].covariate:
                continue  # disjoint strata of one covariate: correlation 0
            joint = float((w * indicators[i] * indicators[j]).mean())
            denom = np.sqrt(probs[i] * probs[j])
            c = joint / denom if denom > 0 else 0.0
            C[i, j] = C[j, i] = np.clip(c, -CORR_CLIP, CORR_CLIP)

    C, repair = _repair_correlation(C)
    if repair > 0:
        logger.info("trial %r: effect correlation matrix repaired to PSD "
                    "(clipped %.2e of eigenvalue mass)", trial.trial_id, repair)
    scale = se * np.sqrt(trial.n)
    return C * np.outer(scale, scale), repair


def _repair_correlation(C: np.ndarray) -> tuple[np.ndarray, float]:
    vals, vecs = np.linalg.eigh(C)
    if vals.min() >= -1e-12:
        return C, 0.0
    mass = float(np.abs(vals[vals < 0]).sum() / np.abs(vals).sum())
    clipped = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    d = np.sqrt(np.clip(np.diag(clipped), 1e-12, None))
    fixed = clipped / np.outer(d, d)
    np.fill_diagonal(fixed, 1.0)
    return (fixed + fixed.T) / 2, mass


def approximate_sigma_mu(trial: TrialAggregate, tilt: TiltFit) -> np.ndarray:
    """Tilted plug-in for the covariate-moment covariance (intercept row 0)."""
    dev = tilt.hplus - tilt.mu_plus
    return (dev * tilt.weights[:, None]).T @ dev / tilt.hplus.shape[0]


def default_trial_covariances(dataset: MetaDataset,
                              tilts: dict[str, TiltFit],
                              base: CovariateSample,
                              sigma_taumu: dict[str, np.ndarray] | None = None
                              ) -> TrialCovariances:
    sigma_tau, sigma_mu, repair = {}, {}, {}
    taumu: dict[str, np.ndarray | None] = {}
    for trial in dataset.trials:
        tilt = tilts[trial.trial_id]
        sigma_tau[trial.trial_id], repair[trial.trial_id] = \
            approximate_sigma_tau(trial, tilt, base, dataset)
        sigma_mu[trial.trial_id] = approximate_sigma_mu(trial, tilt)
        taumu[trial.trial_id] = (sigma_taumu or {}).get(trial.trial_id)
    return TrialCovariances(sigma_tau, sigma_mu, taumu, repair)


def _row_moments(system: MomentSystem, theta: np.ndarray) -> np.ndarray:
    """Per-base-row stacked moment contributions alpha(X_i) g_i - tau."""
    reps = system.representers
    out = np.empty((system.base.n, system.J))
    for s, cols in system._cols_by_stratum.items():
        g = system.model.evaluate(theta, system.base, stratum=s)
        out[:, cols] = reps.values[:, cols] * g[:, None]
    return out - system.tau_hat


def _gamma_blocks(system: MomentSystem, theta: np.ndarray, jac: JacobianSet,
                  covs: TrialCovariances):
    """Gamma_q and per-trial Gamma_s, before the pi scalings."""
    n_q = system.base.n
    xi = _row_moments(system, theta)
    A: dict[str, np.ndarray] = {}
    for trial in system.dataset.trials:
        tid = trial.trial_id
        A[tid] = jac.j_m_eta[tid] @ jac.j_eta_mu[tid]
        tilt = system.tilts[tid]
        resid = tilt.weights[:, None] * tilt.hplus - tilt.mu_plus
        xi = xi + resid @ A[tid].T
    xic = xi - xi.mean(axis=0)
    gamma_q = xic.T @ xic / n_q

    gamma_s: dict[str, np.ndarray] = {}
    col_of = {k: j for j, k in enumerate(system.representers.keys)}
    for trial in system.dataset.trials:
        tid = trial.trial_id
        rows = np.array([col_of[(tid, e.covariate, e.level)]
                         for e in trial.effects])
        G = np.zeros((system.J, system.J))
        block = covs.sigma_tau[tid]
        G[np.ix_(rows, rows)] = block
        G += A[tid] @ covs.sigma_mu[tid] @ A[tid].T
        taumu = covs.sigma_taumu.get(tid)
        if taumu is not None:
            cross = np.zeros((system.J, system.J))
            cross[rows, :] = taumu @ A[tid].T
            G += cross + cross.T
        gamma_s[tid] = G
    return gamma_q, gamma_s


def omega_tilde(system: MomentSystem, theta: np.ndarray, jac: JacobianSet,
                covs: TrialCovariances) -> np.ndarray:
    """Size-free moment covariance Gamma_q/n_q + sum_s Gamma_s/n_s.

    Equal to Omega/n for any total n; used for second-step GMM weights,
    where the overall scale is irrelevant.
    """
    gamma_q, gamma_s = _gamma_blocks(system, theta, jac, covs)
    out = gamma_q / system.base.n
    for trial in system.dataset.trials:
        out = out + gamma_s[trial.trial_id] / trial.n
    return (out + out.T) / 2


def assemble_variance(fit: CateFit, system: MomentSystem, jac: JacobianSet,
                      covs: TrialCovariances, n_target: int,
                      treat_q_exact: bool = False) -> VarianceReport:
    """Omega, V_theta, and Var(theta-hat) with per-source contributions."""
    if n_target < 1:
        raise DataValidationError("n_target must be >= 1")
    n_q = system.base.n
    n_trials = {t.trial_id: t.n for t in system.dataset.trials}
    n = n_target + sum(n_trials.values())

    gamma_q, gamma_s = _gamma_blocks(system, fit.theta, jac, covs)
    pi: dict[str, float] = {"target": n / n_target}
    contributions: dict[str, np.ndarray] = {}
    if treat_q_exact:
        pi["base"] = 0.0
        contributions["base"] = np.zeros_like(gamma_q)
    else:
        pi["base"] = n / n_q
        contributions["base"] = pi["base"] * gamma_q
    for tid, n_s in n_trials.items():
        pi[tid] = n / n_s
        contributions[tid] = pi[tid] * gamma_s[tid]

    omega = sum(contributions.values())
    omega = (omega + omega.T) / 2
    omega, repair = _repair_psd(omega)
    if repair > 0:
        logger.warning("moment covariance Omega repaired to PSD (clipped "
                       "%.2e of eigenvalue mass)", repair)

    v_theta = jac.j_theta_m @ omega @ jac.j_theta_m.T
    v_theta = (v_theta + v_theta.T) / 2
    theta_cov = v_theta / n

    j_stat = None
    if system.J > system.model.dim:
        try:
            j_stat = float(n * fit.residuals
                           @ np.linalg.solve(omega, fit.residuals))
        except np.linalg.LinAlgError:
            j_stat = None

    fit.theta_cov = theta_cov
    fit.j_stat = j_stat
    return VarianceReport(
        omega=omega, v_theta=v_theta, theta_cov=theta_cov,
        contributions=contributions, pi=pi, n_total=n, n_target=n_target,
        psd_repair=repair, j_stat=j_stat,
        trial_ids=system.dataset.trial_ids)


def _repair_psd(M: np.ndarray) -> tuple[np.ndarray, float]:
    vals, vecs = np.linalg.eigh(M)
    floor = -1e-12 * max(1.0, float(vals.max()))
    if vals.min() >= floor:
        return M, 0.0
    mass = float(np.abs(vals[vals < 0]).sum() / np.abs(vals).sum())
    out = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    return (out + out.T) / 2, mass
