"""Stacked moment system and GMM fitting of the CATE parameters.

The sample moment function is

    M(theta) = mean_i alpha(X_i) g(X_i; theta) - tau_hat   (length J),

computed over the base sample. ``fit`` minimizes M' W M; for models linear
in theta this is a weighted least-squares solve, otherwise Gauss-Newton
with Levenberg damping and multistart. ``compute_jacobians`` produces the
sample analogs of every block used by the variance machinery.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .aggdata import CovariateSample, MetaDataset
from .cate import trial_stratum_map
from .errors import (DataValidationError, MaxIterationsError,
                     RankDeficiencyError)
from .tilting import RepresenterMatrix, TiltFit

logger = logging.getLogger(__name__)

RANK_THRESHOLD = 1e-7


@dataclass(frozen=True)
class GmmConfig:
    foc_tol: float = 1e-10        # scaled first-order-condition tolerance
    max_iter: int = 500
    n_starts: int = 5             # extra random inits for nonlinear models
    start_seed: int = 0
    ridge_eps: float = 1e-8       # two-step Omega regularization, x trace/J
    verify_linear: bool = False   # cross-check closed form vs Gauss-Newton


DEFAULT_GMM_CONFIG = GmmConfig()


@dataclass
class MomentSystem:
    """Everything needed to evaluate the stacked sample moments."""

    representers: RepresenterMatrix
    tau_hat: np.ndarray
    se_tau: np.ndarray
    model: object
    base: CovariateSample
    tilts: dict[str, TiltFit]
    dataset: MetaDataset

    def __post_init__(self):
        if self.representers.J != len(self.tau_hat):
            raise DataValidationError("representer/effect count mismatch")
        if self.J < self.d:
            raise DataValidationError(
                f"underidentified system: J = {self.J} effect moments < "
                f"d = {self.d} parameters")
        strata = trial_stratum_map(self.model, self.dataset.trial_ids)
        self._col_stratum = [strata[k[0]] for k in self.representers.keys]
        self._strata = sorted({s for s in self._col_stratum},
                              key=lambda s: (s is not None, s))
        self._cols_by_stratum = {
            s: np.array([j for j, cs in enumerate(self._col_stratum) if cs == s])
            for s in self._strata}

    @property
    def J(self) -> int:
        return self.representers.J

    @property
    def d(self) -> int:
        return self.model.dim

    def g_by_stratum(self, theta) -> dict:
        return {s: self.model.evaluate(theta, self.base, stratum=s)
                for s in self._strata}

    def stack_moments(self, theta) -> np.ndarray:
        """M(theta): representer-weighted means of g minus tau_hat."""
        out = np.empty(self.J)
        vals = self.representers.values
        for s, cols in self._cols_by_stratum.items():
            g = self.model.evaluate(theta, self.base, stratum=s)
            out[cols] = vals[:, cols].T @ g / self.base.n
        return out - self.tau_hat

    def moment_jacobian(self, theta) -> np.ndarray:
        """J^m_theta: J x d sample Jacobian of the moment map."""
        out = np.empty((self.J, self.d))
        vals = self.representers.values
        for s, cols in self._cols_by_stratum.items():
            grad = self.model.gradient(theta, self.base, stratum=s)
            out[cols, :] = vals[:, cols].T @ grad / self.base.n
        return out

    def weight_matrix(self, weighting: str) -> np.ndarray:
        if weighting == "identity":
            return np.eye(self.J)
        if weighting == "inverse-se2":
            se = np.where(self.se_tau > 0, self.se_tau, np.nan)
            if np.isnan(se).any():
                raise DataValidationError(
                    "inverse-se2 weighting needs positive SEs for every "
                    "effect row")
            return np.diag(1.0 / se ** 2)
        raise DataValidationError(f"unknown weighting {weighting!r}")


@dataclass
class JacobianSet:
    """Sample analogs of the linearization blocks."""

    j_m_theta: np.ndarray                  # J x d
    j_theta_m: np.ndarray                  # d x J, uses the fit's W
    j_m_eta: dict[str, np.ndarray]         # trial -> J x (R_s + 1)
    j_eta_mu: dict[str, np.ndarray]        # trial -> (R_s+1) x (R_s+1)
    psi_theta: np.ndarray | None = None    # 1 x d, filled by estimands


@dataclass
class CateFit:
    model: object
    theta: np.ndarray
    W: np.ndarray
    weighting: str
    residuals: np.ndarray
    foc_norm: float
    rank_ratio: float
    theta_cov: np.ndarray | None = None    # Var-hat(theta-hat), d x d
    j_stat: float | None = None
    diagnostics: dict = field(default_factory=dict)


def check_rank(j_m_theta: np.ndarray) -> float:
    """Column-standardized singular-value ratio; raises if rank deficient."""
    norms = np.linalg.norm(j_m_theta, axis=0)
    if (norms <= 0).any():
        raise RankDeficiencyError(
            "moment Jacobian has an identically-zero column (a parameter "
            "the moments carry no information about)")
    svals = np.linalg.svd(j_m_theta / norms, compute_uv=False)
    ratio = float(svals[-1] / svals[0])
    if ratio < RANK_THRESHOLD:
        raise RankDeficiencyError(
            f"moment Jacobian numerically rank deficient "
            f"(sigma_min/sigma_max = {ratio:.2e} < {RANK_THRESHOLD:g})")
    return ratio


def _foc_scale(G: np.ndarray, W: np.ndarray, tau: np.ndarray) -> float:
    return max(1.0, float(np.max(np.abs(G.T @ W @ tau))))


def _wls_solve(G: np.ndarray, W: np.ndarray, y: np.ndarray) -> np.ndarray:
    A = G.T @ W @ G
    return np.linalg.solve(A, G.T @ W @ y)


def _fit_linear(system: MomentSystem, W: np.ndarray) -> np.ndarray:
    # g(x; theta) = phi(x)' theta, so M(theta) = G theta + M(0).
    G = system.moment_jacobian(np.zeros(system.d))
    m0 = system.stack_moments(np.zeros(system.d))
    return _wls_solve(G, W, -m0)


def _fit_gauss_newton(system: MomentSystem, W: np.ndarray, theta0: np.ndarray,
                      config: GmmConfig):
    theta = theta0.copy()
    lam = 1e-3
    M = system.stack_moments(theta)
    q = float(M @ W @ M)
    for _ in range(config.max_iter):
        G = system.moment_jacobian(theta)
        grad = G.T @ W @ M
        scale = _foc_scale(G, W, system.tau_hat)
        if np.max(np.abs(grad)) <= config.foc_tol * scale:
            return theta, q, True
        A = G.T @ W @ G
        diag = np.maximum(np.diag(A), 1e-12)
        improved = False
        for _ in range(40):
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                lam *= 3.0
                continue
            cand = theta + step
            Mc = system.stack_moments(cand)
            qc = float(Mc @ W @ Mc)
            if qc < q:
                theta, M, q = cand, Mc, qc
                lam = max(lam * 0.3, 1e-12)
                improved = True
                break
            lam *= 3.0
        if not improved:
            # damping exhausted: either converged to tolerance or stuck
            return theta, q, np.max(np.abs(grad)) <= 1e-6 * scale
    return theta, q, False


def fit(system: MomentSystem, weighting: str = "two-step",
        config: GmmConfig = DEFAULT_GMM_CONFIG, covariances=None) -> CateFit:
    """Estimate theta by (possibly two-step) GMM.

    ``weighting`` is one of identity, inverse-se2, two-step. Two-step uses
    inverse-se2 for the first pass, then re-weights with the inverse of the
    estimated moment covariance; it falls back to the first-step weights
    when that covariance is singular. ``covariances`` optionally supplies
    precomputed TrialCovariances for the second step.
    """
    if weighting == "two-step":
        first = _fit_with_W(system, system.weight_matrix("inverse-se2"),
                            "inverse-se2", config)
        W2 = _second_step_weight(system, first, config, covariances)
        if W2 is None:
            warnings.warn("two-step weighting: estimated moment covariance "
                          "is singular; falling back to inverse-se2 weights")
            return first
        refit = _fit_with_W(system, W2, "two-step", config,
                            theta0=first.theta)
        refit.diagnostics["first_step_theta"] = first.theta.tolist()
        return refit
    return _fit_with_W(system, system.weight_matrix(weighting), weighting,
                       config)


def _fit_with_W(system: MomentSystem, W: np.ndarray, weighting: str,
                config: GmmConfig, theta0: np.ndarray | None = None) -> CateFit:
    rank_ratio = check_rank(system.moment_jacobian(
        theta0 if theta0 is not None else np.zeros(system.d)))

    if system.model.is_linear:
        theta = _fit_linear(system, W)
        if config.verify_linear:
            iterative, _, ok = _fit_gauss_newton(
                system, W, np.zeros(system.d), config)
            gap = np.max(np.abs(iterative - theta))
            if not ok or gap > 1e-8 * (1.0 + np.max(np.abs(theta))):
                raise MaxIterationsError(
                    "iterative GMM path disagrees with the closed-form "
                    f"weighted least squares solution (gap {gap:.2e})")
    else:
        base_start = theta0 if theta0 is not None else _linearized_start(
            system, W)
        rng = np.random.default_rng(config.start_seed)
        starts = [base_start]
        spread = 0.5 * (1.0 + np.linalg.norm(base_start))
        starts += [base_start + spread * rng.standard_normal(system.d)
                   for _ in range(config.n_starts)]
        best = None
        for s in starts:
            theta_c, q_c, ok = _fit_gauss_newton(system, W, s, config)
            if ok and (best is None or q_c < best[1]):
                best = (theta_c, q_c)
        if best is None:
            raise MaxIterationsError(
                "GMM did not converge from any start (Gauss-Newton with "
                f"Levenberg damping, {config.max_iter} iterations)")
        theta = best[0]

    M = system.stack_moments(theta)
    G = system.moment_jacobian(theta)
    foc = float(np.max(np.abs(G.T @ W @ M)) / _foc_scale(G, W, system.tau_hat))
    return CateFit(model=system.model, theta=theta, W=W, weighting=weighting,
                   residuals=M, foc_norm=foc, rank_ratio=rank_ratio)


def _linearized_start(system: MomentSystem, W: np.ndarray) -> np.ndarray:
    zero = np.zeros(system.d)
    G0 = system.moment_jacobian(zero)
    m0 = system.stack_moments(zero)
    try:
        return _wls_solve(G0, W, -m0)
    except np.linalg.LinAlgError:
        return zero


def _second_step_weight(system: MomentSystem, first: CateFit,
                        config: GmmConfig, covariances):
    from .inference import default_trial_covariances, omega_tilde

    jac = compute_jacobians(system, first.theta, W=first.W)
    covs = covariances if covariances is not None else \
        default_trial_covariances(system.dataset, system.tilts, system.base)
    omega = omega_tilde(system, first.theta, jac, covs)
    J = omega.shape[0]
    trace = float(np.trace(omega))
    if trace <= 0:
        return None
    cond = np.linalg.cond(omega)
    if not np.isfinite(cond) or cond > 1e12:
        omega = omega + config.ridge_eps * trace / J * np.eye(J)
        logger.info("two-step weighting: ridge-regularized near-singular "
                    "moment covariance (cond %.2e)", cond)
    try:
        return np.linalg.inv(omega)
    except np.linalg.LinAlgError:
        return None


def compute_jacobians(system: MomentSystem, theta: np.ndarray,
                      W: np.ndarray | None = None) -> JacobianSet:
    """All linearization blocks at theta, as base-sample averages."""
    theta = np.asarray(theta, dtype=float)
    G = system.moment_jacobian(theta)
    check_rank(G)
    if W is None:
        W = np.eye(system.J)
    A = G.T @ W @ G
    j_theta_m = -np.linalg.solve(A, G.T @ W)

    n = system.base.n
    reps = system.representers
    g_strat = system.g_by_stratum(theta)
    col_stratum = system._col_stratum

    j_m_eta: dict[str, np.ndarray] = {}
    j_eta_mu: dict[str, np.ndarray] = {}
    for trial in system.dataset.trials:
        tid = trial.trial_id
        tilt = system.tilts[tid]
        w, hp = tilt.weights, tilt.hplus
        R1 = hp.shape[1]
        block = np.zeros((system.J, R1))
        for j in reps.columns_of_trial(tid):
            g = g_strat[col_stratum[j]]
            f = reps.factors[:, j]
            wf = w * f
            if reps.normalized[j]:
                D = wf.mean()
                Np = hp.T @ (wf * g) / n
                Dp = hp.T @ wf / n
                ratio = float((wf * g).mean() / D)
                block[j, :] = (Np - ratio * Dp) / D
            else:
                block[j, :] = hp.T @ (wf * g) / n
        j_m_eta[tid] = block
        second = (hp * w[:, None]).T @ hp / n
        try:
            j_eta_mu[tid] = -np.linalg.inv(second)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError(
                f"trial {tid!r}: singular tilted moment matrix when "
                "inverting the eta/mu block") from None

    return JacobianSet(j_m_theta=G, j_theta_m=j_theta_m, j_m_eta=j_m_eta,
                       j_eta_mu=j_eta_mu)


def build_system(representers: RepresenterMatrix, dataset: MetaDataset,
                 model, base: CovariateSample,
                 tilts: dict[str, TiltFit]) -> MomentSystem:
    tau, se, keys = dataset.stacked_effects()
    if tuple(keys) != representers.keys:
        raise DataValidationError(
            "representer columns are not aligned with the stacked effects")
    return MomentSystem(representers=representers, tau_hat=tau, se_tau=se,
                        model=model, base=base, tilts=tilts, dataset=dataset)
