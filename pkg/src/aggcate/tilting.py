"""Per-trial exponential tilting and representer evaluation.

For trial ``s`` with reported covariate moments ``mu``, solves for ``eta``
such that the tilted base sample reproduces the moments:

    mean_i exp(eta' hplus(X_i)) hplus(X_i) = mu_plus,

with ``hplus = (1, h)`` so the leading component pins the mean weight to 1.
The solver runs damped Newton on the convex dual

    f(eta) = mean_i exp(eta' hplus(X_i)) - eta' mu_plus,

whose gradient is exactly the achieved-moment residual. Moments are
standardized by base-sample location/scale before solving; tolerances apply
on the standardized residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggdata import (CovariateSample, MetaDataset, MomentSummary,
                      TrialAggregate)
from .errors import (DataValidationError, EmptyStratumError,
                     InfeasibleMomentsError, MaxIterationsError)


@dataclass(frozen=True)
class TiltConfig:
    tol: float = 1e-11          # on standardized residuals
    max_iter: int = 200
    backtrack: float = 0.5      # step shrink factor in the line search
    armijo: float = 1e-4
    eta_bound: float = 100.0    # standardized-scale divergence cutoff


DEFAULT_TILT_CONFIG = TiltConfig()


@dataclass(frozen=True)
class TiltFit:
    """Solved tilting parameters for one trial.

    ``eta`` is on the original moment scale, intercept first; ``weights``
    are the per-row tilting weights on the base sample (mean 1);
    ``hplus`` is the n_q x (R_s + 1) matrix of (1, h(X_i)) values.
    """

    trial_id: str
    eta: np.ndarray
    residual_norm: float
    weights: np.ndarray
    hplus: np.ndarray
    mu_plus: np.ndarray
    moment_labels: tuple[str, ...]
    iterations: int


def moment_values(base: CovariateSample, moments: tuple[MomentSummary, ...]):
    """Evaluate each reported moment function h_r on the base sample.

    Returns (H, mu, labels): H is n x R, mu the reported values, labels
    human-readable moment names.
    """
    schema = base.schema
    cols, mu, labels = [], [], []
    for m in moments:
        cov = schema.covariate(m.spec.covariate)
        if m.spec.kind == "mean":
            cols.append(base.numeric_column(cov.name))
        elif m.spec.kind == "second_moment":
            cols.append(base.numeric_column(cov.name) ** 2)
        elif m.spec.kind == "proportion":
            if cov.kind == "binary":
                code = cov.levels.index(m.spec.level)
                cols.append((base.column(cov.name) == code).astype(float))
            else:
                cols.append((base.column(cov.name) == m.spec.level).astype(float))
        else:
            raise DataValidationError(f"unknown moment kind {m.spec.kind!r}")
        mu.append(m.value)
        labels.append(m.spec.label())
    H = np.column_stack(cols) if cols else np.empty((base.n, 0))
    return H, np.asarray(mu, dtype=float), tuple(labels)


def _hull_diagnostics(H, mu, labels):
    return [(labels[r], float(H[:, r].min()), float(mu[r]), float(H[:, r].max()))
            for r in range(H.shape[1])]


def solve_tilt(base: CovariateSample, trial: TrialAggregate,
               config: TiltConfig = DEFAULT_TILT_CONFIG) -> TiltFit:
    """Solve the moment-matching equations for one trial.

    Raises InfeasibleMomentsError when a target moment sits on or outside
    the convex hull of the base-sample moment values (detected up front
    componentwise, or through divergence of the Newton iteration), and
    MaxIterationsError for non-divergent non-convergence.
    """
    H, mu, labels = moment_values(base, trial.moments)
    n, R = H.shape

    center = H.mean(axis=0)
    scale = H.std(axis=0)
    degenerate = scale <= 1e-12 * (1.0 + np.abs(center))
    scale = np.where(degenerate, 1.0, scale)
    Ht = (H - center) / scale
    mut = (mu - center) / scale

    hull_bad = []
    for r in range(R):
        if degenerate[r]:
            if abs(mut[r]) > config.tol * 10:
                hull_bad.append(r)
        elif not (Ht[:, r].min() < mut[r] < Ht[:, r].max()):
            hull_bad.append(r)
    if hull_bad:
        diag = _hull_diagnostics(H, mu, labels)
        bad = ", ".join(labels[r] for r in hull_bad)
        raise InfeasibleMomentsError(
            f"trial {trial.trial_id!r}: target moment(s) outside the base "
            f"sample's achievable range: {bad}", diagnostics=diag)

    hp = np.column_stack([np.ones(n), Ht])
    target = np.concatenate([[1.0], mut])

    eta = np.zeros(R + 1)
    w = np.ones(n)
    fval = 1.0 - eta @ target
    resid = hp.T @ w / n - target
    rnorm = float(np.max(np.abs(resid)))
    it = 0
    for it in range(1, config.max_iter + 1):
        if rnorm <= config.tol:
            break
        hess = (hp * w[:, None]).T @ hp / n
        try:
            step = np.linalg.solve(hess, -resid)
        except np.linalg.LinAlgError:
            step = np.linalg.solve(
                hess + 1e-10 * np.eye(R + 1) * max(1.0, np.trace(hess)), -resid)
        slope = resid @ step
        t = 1.0
        accepted = False
        for _ in range(60):
            cand = eta + t * step
            with np.errstate(over="ignore"):
                wc = np.exp(hp @ cand)
            fc = wc.mean() - cand @ target
            if not np.isfinite(fc):
                t *= config.backtrack
                continue
            residc = hp.T @ wc / n - target
            rnormc = float(np.max(np.abs(residc)))
            # accept on dual descent or on residual contraction; the latter
            # carries the final Newton steps where the dual decrease is
            # below float resolution
            if fc <= fval + config.armijo * t * slope or rnormc < 0.9 * rnorm:
                eta, w, fval = cand, wc, fc
                resid, rnorm = residc, rnormc
                accepted = True
                break
            t *= config.backtrack
        if not accepted:
            diag = _hull_diagnostics(H, mu, labels)
            raise InfeasibleMomentsError(
                f"trial {trial.trial_id!r}: tilting Newton stalled "
                "(jointly infeasible target moments)", diagnostics=diag)
        if np.max(np.abs(eta)) > config.eta_bound:
            diag = _hull_diagnostics(H, mu, labels)
            raise InfeasibleMomentsError(
                f"trial {trial.trial_id!r}: tilting parameters diverged; "
                "target moments are on or outside the achievable set",
                diagnostics=diag)
    else:
        if rnorm > config.tol:
            raise MaxIterationsError(
                f"trial {trial.trial_id!r}: tilting did not converge in "
                f"{config.max_iter} iterations (residual {rnorm:.2e})")

    eta_orig = np.empty(R + 1)
    eta_orig[1:] = eta[1:] / scale
    eta_orig[0] = eta[0] - np.sum(eta[1:] * center / scale)
    return TiltFit(
        trial_id=trial.trial_id,
        eta=eta_orig,
        residual_norm=float(np.max(np.abs(resid))),
        weights=w,
        hplus=np.column_stack([np.ones(n), H]),
        mu_plus=np.concatenate([[1.0], mu]),
        moment_labels=labels,
        iterations=it,
    )


def solve_all_tilts(base: CovariateSample, dataset: MetaDataset,
                    config: TiltConfig = DEFAULT_TILT_CONFIG
                    ) -> dict[str, TiltFit]:
    return {t.trial_id: solve_tilt(base, t, config) for t in dataset.trials}


@dataclass(frozen=True)
class RepresenterMatrix:
    """Stacked working representer values on the base sample.

    Column j carries the representer for effect moment j (ordered as the
    stacked effect vector). ``factors[:, j]`` is the indicator-times-b
    multiplier (1 for additive marginal columns), ``normalized[j]`` says
    whether the column was scaled by its tilted base mean; both are needed
    for the eta-derivatives in the variance machinery.
    """

    values: np.ndarray
    keys: tuple[tuple[str, str | None, str | None], ...]
    factors: np.ndarray
    normalized: np.ndarray
    trial_ids: tuple[str, ...]

    @property
    def J(self) -> int:
        return self.values.shape[1]

    def columns_of_trial(self, trial_id: str) -> np.ndarray:
        return np.array([j for j, k in enumerate(self.keys) if k[0] == trial_id])


def _build_representers(tilts, base, dataset, b_values, relative):
    n = base.n
    cols, keys, factors, normalized = [], [], [], []
    for trial in dataset.trials:
        tilt = tilts[trial.trial_id]
        w = tilt.weights
        for e in trial.effects:
            if e.is_marginal:
                factor = b_values if relative else np.ones(n)
            else:
                cov = dataset.schema.covariate(e.covariate)
                stratum = dataset.schema.resolve_stratum(
                    trial.trial_id, e.covariate, e.level)
                ind = dataset.schema.stratum_indicator(
                    stratum, cov, base.column(e.covariate))
                factor = ind * b_values if relative else ind
            col = w * factor
            if relative or not e.is_marginal:
                denom = col.mean()
                if denom <= 0:
                    raise EmptyStratumError(
                        f"trial {trial.trial_id!r}, subgroup "
                        f"{e.covariate}={e.level}: no tilted base mass in "
                        "the stratum")
                col = col / denom
                normalized.append(True)
            else:
                normalized.append(False)
            cols.append(col)
            factors.append(factor)
            keys.append((trial.trial_id, e.covariate, e.level))
    return RepresenterMatrix(
        values=np.column_stack(cols),
        keys=tuple(keys),
        factors=np.column_stack(factors),
        normalized=np.asarray(normalized, dtype=bool),
        trial_ids=dataset.trial_ids,
    )


def evaluate_representers(tilts: dict[str, TiltFit], base: CovariateSample,
                          dataset: MetaDataset) -> RepresenterMatrix:
    """Additive-scale representers: w for marginal columns, normalized
    w * I(stratum) for subgroup columns."""
    for trial_id in dataset.trial_ids:
        if trial_id not in tilts:
            raise DataValidationError(f"no tilt solved for trial {trial_id!r}")
    return _build_representers(tilts, base, dataset,
                               b_values=np.ones(base.n), relative=False)


def evaluate_relative_representers(tilts: dict[str, TiltFit],
                                   base: CovariateSample,
                                   dataset: MetaDataset,
                                   b) -> RepresenterMatrix:
    """Relative-scale representers, weighted by the control mean function b.

    ``b`` is a callable mapping a CovariateSample to per-row values, or an
    array of length base.n; it must be strictly positive on the base sample.
    """
    b_values = np.asarray(b(base) if callable(b) else b, dtype=float)
    if b_values.shape != (base.n,):
        raise DataValidationError("b must give one value per base row")
    if (b_values <= 0).any():
        raise DataValidationError(
            "control mean function b must be strictly positive on the base "
            "sample")
    for trial_id in dataset.trial_ids:
        if trial_id not in tilts:
            raise DataValidationError(f"no tilt solved for trial {trial_id!r}")
    return _build_representers(tilts, base, dataset, b_values, relative=True)
