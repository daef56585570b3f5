"""Marginalizing a fitted CATE over target samples.

Point estimates average the fitted CATE over (a subgroup of) the target
rows; standard errors combine the target-sample variation of the CATE with
the propagated parameter uncertainty:

    Var(psi) = n0^-2 sum_i (g_i - psi)^2 + Jpsi Var(theta) Jpsi'.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .aggdata import CovariateSample, filter_mask
from .errors import DataValidationError
from .gmm import CateFit
from .inference import VarianceReport, wald_ci


@dataclass(frozen=True)
class TransportResult:
    label: str
    psi_hat: float
    se: float
    ci95: tuple[float, float]
    n_effective: int

    def as_row(self) -> list:
        return [self.label, self.psi_hat, self.se, self.ci95[0], self.ci95[1],
                self.n_effective]


def _psi_with_variance(fit: CateFit, sample: CovariateSample,
                       variance: VarianceReport | None, label: str,
                       stratum=None) -> TransportResult:
    if sample.n < 1:
        raise DataValidationError("empty target sample")
    g = fit.model.evaluate(fit.theta, sample, stratum=stratum)
    psi = float(g.mean())
    var = float(((g - psi) ** 2).sum()) / sample.n ** 2
    if variance is not None:
        jpsi = fit.model.gradient(fit.theta, sample, stratum=stratum).mean(axis=0)
        var += float(jpsi @ variance.theta_cov @ jpsi)
    se = float(np.sqrt(var))
    return TransportResult(label, psi, se, wald_ci(psi, se), sample.n)


def transport_ate(fit: CateFit, target: CovariateSample,
                  variance: VarianceReport | None, stratum=None,
                  label: str = "overall") -> TransportResult:
    """ATE in the target population: the target mean of the fitted CATE."""
    if target.role != "target":
        raise DataValidationError("transport needs a sample with role "
                                  f"'target', got {target.role!r}")
    return _psi_with_variance(fit, target, variance, label, stratum)


def subgroup_ate(fit: CateFit, target: CovariateSample, filter_expr: str,
                 variance: VarianceReport | None, stratum=None
                 ) -> TransportResult:
    """ATE over the target rows matching 'cov=level,cov2<=cut' conjunctions."""
    mask = filter_mask(target, filter_expr)
    if not mask.any():
        raise DataValidationError(
            f"subgroup filter {filter_expr!r} matches no target rows")
    sub = target.subset(mask)
    return _psi_with_variance(fit, sub, variance, filter_expr, stratum)


def indirect_comparison(fit1: CateFit, variance1: VarianceReport,
                        fit2: CateFit, variance2: VarianceReport,
                        target: CovariateSample, stratum=None
                        ) -> TransportResult:
    """Head-to-head contrast of two transported CATEs (treatment 2 minus 1).

    The two fits must come from disjoint trial sets; their parameter
    uncertainties are combined as independent.
    """
    overlap = set(variance1.trial_ids) & set(variance2.trial_ids)
    if overlap:
        raise DataValidationError(
            "indirect comparison needs disjoint trial sets; shared trials: "
            f"{sorted(overlap)}")
    if target.n < 1:
        raise DataValidationError("empty target sample")
    g1 = fit1.model.evaluate(fit1.theta, target, stratum=stratum)
    g2 = fit2.model.evaluate(fit2.theta, target, stratum=stratum)
    diff = g2 - g1
    psi = float(diff.mean())
    var = float(((diff - psi) ** 2).sum()) / target.n ** 2
    j1 = fit1.model.gradient(fit1.theta, target, stratum=stratum).mean(axis=0)
    j2 = fit2.model.gradient(fit2.theta, target, stratum=stratum).mean(axis=0)
    var += float(j1 @ variance1.theta_cov @ j1)
    var += float(j2 @ variance2.theta_cov @ j2)
    se = float(np.sqrt(var))
    return TransportResult("indirect", psi, se, wald_ci(psi, se), target.n)


def fit_control_mean(target: CovariateSample):
    """Estimate b(x) = E[Y | X = x] from the target sample.

    Logistic regression on (1, covariates) for a binary outcome, ordinary
    least squares otherwise. Assumes every target row is untreated.
    """
    from ._logistic import expit, irls_logistic

    if target.outcome is None:
        raise DataValidationError("target sample has no outcome column Y")
    numeric = [c.name for c in target.schema.covariates
               if c.kind != "categorical"]
    X = np.column_stack([np.ones(target.n)]
                        + [target.numeric_column(n) for n in numeric])
    y = target.outcome
    if set(np.unique(y)) <= {0.0, 1.0}:
        beta = irls_logistic(X, y)

        def b(sample: CovariateSample) -> np.ndarray:
            Z = np.column_stack([np.ones(sample.n)]
                                + [sample.numeric_column(n) for n in numeric])
            return expit(Z @ beta)
    else:
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)

        def b(sample: CovariateSample) -> np.ndarray:
            Z = np.column_stack([np.ones(sample.n)]
                                + [sample.numeric_column(n) for n in numeric])
            return Z @ beta
    return b


def transport_relative(fit: CateFit, target: CovariateSample,
                       variance: VarianceReport | None, b=None,
                       stratum=None) -> TransportResult:
    """Risk-difference-scale ATE from a relative (ratio) CATE fit.

    psi = mean(g(X) b(X)) - mean(Y) over the target, with the target serving
    as the all-control population. b is a callable, an array of length
    target.n, or None to fit it from the target (X, Y). The uncertainty in
    b is not propagated (b is treated as fixed).
    """
    if getattr(fit.model, "scale", "additive") != "relative":
        raise DataValidationError(
            "transport_relative needs a relative-scale CATE fit")
    if target.outcome is None:
        raise DataValidationError("target sample has no outcome column Y")
    if b is None:
        b = fit_control_mean(target)
    b_values = np.asarray(b(target) if callable(b) else b, dtype=float)
    if b_values.shape != (target.n,):
        raise DataValidationError("b must give one value per target row")

    g = fit.model.evaluate(fit.theta, target, stratum=stratum)
    terms = g * b_values - target.outcome
    psi = float(terms.mean())
    var = float(((terms - psi) ** 2).sum()) / target.n ** 2
    if variance is not None:
        grad = fit.model.gradient(fit.theta, target, stratum=stratum)
        jpsi = (grad * b_values[:, None]).mean(axis=0)
        var += float(jpsi @ variance.theta_cov @ jpsi)
    se = float(np.sqrt(var))
    return TransportResult("relative", psi, se, wald_ci(psi, se), target.n)


def write_results_csv(results, path) -> None:
    """Table 'label,estimate,se,ci_lo,ci_hi,n_effective', one result per row."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "estimate", "se", "ci_lo", "ci_hi", "n_effective"])
        for r in results:
            label, est, se, lo, hi, n_eff = r.as_row()
            w.writerow([label, repr(est), repr(se), repr(lo), repr(hi), n_eff])
