"""Parametric CATE models: feature maps, gradients, time stratification.

The default model is linear in its parameters, built from a small formula
language over the covariate schema:

    ~ 1 + lvef + prehhf + diabetes        main effects (+ intercept)
    ~ 1 + lvef + prehhf:diabetes          interaction
    ~ 1 + cut(lvef, 40) + prehhf          threshold indicator I(lvef <= 40)

Categorical main effects expand to one indicator per non-reference level
(reference = first declared level). A nonlinear model can be supplied via
``CustomCate`` with a user evaluation function; its gradient defaults to
central finite differences.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .aggdata import CovariateSample, CovariateSchema
from .errors import DataValidationError

_CUT_RE = re.compile(r"^cut\(\s*([^,]+?)\s*,\s*([-+0-9.eE]+)\s*\)$")


@dataclass(frozen=True)
class Term:
    """One feature column: a named function of the covariate sample."""

    name: str
    columns: tuple[tuple[str, str | float], ...]
    # each entry is (covariate, action): action "value" for the raw numeric
    # column, a level label for an indicator, or a float cutpoint for
    # I(value <= cut); the term value is the product over entries.

    def values(self, sample: CovariateSample) -> np.ndarray:
        out = np.ones(sample.n)
        for cov_name, action in self.columns:
            cov = sample.schema.covariate(cov_name)
            if action == "value":
                out = out * sample.numeric_column(cov_name)
            elif isinstance(action, float):
                out = out * (sample.numeric_column(cov_name) <= action)
            else:
                if cov.kind == "binary":
                    code = cov.levels.index(action)
                    out = out * (sample.column(cov_name) == code)
                else:
                    out = out * (sample.column(cov_name) == action)
        return out


INTERCEPT = Term("1", ())


def _parse_factor(raw: str, schema: CovariateSchema) -> list[Term]:
    raw = raw.strip()
    m = _CUT_RE.match(raw)
    if m:
        name, cut = m.group(1), float(m.group(2))
        cov = schema.covariate(name)
        if cov.kind == "categorical":
            raise DataValidationError(f"cut() needs a numeric covariate: {raw!r}")
        return [Term(f"cut({name},{m.group(2)})", ((name, cut),))]
    cov = schema.covariate(raw)
    if cov.kind == "categorical":
        return [Term(f"{raw}[{lvl}]", ((raw, lvl),)) for lvl in cov.levels[1:]]
    return [Term(raw, ((raw, "value"),))]


def _cross(a: Term, b: Term) -> Term:
    return Term(f"{a.name}:{b.name}", a.columns + b.columns)


def parse_formula(formula: str, schema: CovariateSchema) -> tuple[Term, ...]:
    body = formula.strip()
    if body.startswith("~"):
        body = body[1:]
    terms: list[Term] = []
    for chunk in body.split("+"):
        chunk = chunk.strip()
        if not chunk:
            continue
        if chunk == "1":
            terms.append(INTERCEPT)
            continue
        factors = [f.strip() for f in chunk.split(":")]
        expanded = _parse_factor(factors[0], schema)
        for f in factors[1:]:
            expanded = [_cross(t, u) for t in expanded
                        for u in _parse_factor(f, schema)]
        terms.extend(expanded)
    if not terms:
        raise DataValidationError(f"formula {formula!r} has no terms")
    names = [t.name for t in terms]
    if len(set(names)) != len(names):
        raise DataValidationError(f"formula {formula!r} has duplicate terms")
    return tuple(terms)


class LinearCate:
    """CATE linear in its parameters: g(x; theta) = theta' phi(x)."""

    is_linear = True

    def __init__(self, terms, schema: CovariateSchema, scale: str = "additive",
                 formula: str | None = None):
        if scale not in ("additive", "relative"):
            raise DataValidationError(f"unknown CATE scale {scale!r}")
        self.terms = tuple(terms)
        self.schema = schema
        self.scale = scale
        self.formula = formula

    @classmethod
    def from_formula(cls, formula: str, schema: CovariateSchema,
                     scale: str = "additive") -> "LinearCate":
        return cls(parse_formula(formula, schema), schema, scale, formula)

    @property
    def dim(self) -> int:
        return len(self.terms)

    @property
    def term_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.terms)

    def features(self, sample: CovariateSample, stratum=None) -> np.ndarray:
        return np.column_stack([t.values(sample) for t in self.terms])

    def evaluate(self, theta, sample: CovariateSample, stratum=None) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta must have length {self.dim}, got "
                             f"{theta.shape}")
        return self.features(sample) @ theta

    def gradient(self, theta, sample: CovariateSample, stratum=None) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta must have length {self.dim}, got "
                             f"{theta.shape}")
        return self.features(sample)

    def describe(self) -> dict:
        return {"type": "linear", "scale": self.scale,
                "formula": self.formula, "terms": list(self.term_names)}


class CustomCate:
    """Nonlinear extension point: user-supplied g(theta, sample) -> values.

    ``grad`` (optional) returns the n x d Jacobian in theta; when omitted a
    central finite difference with per-component step 1e-6 * (1 + |theta_j|)
    is used.
    """

    is_linear = False

    def __init__(self, fun, dim: int, grad=None, schema=None,
                 scale: str = "additive", description: str = "custom"):
        self.fun = fun
        self._grad = grad
        self._dim = dim
        self.schema = schema
        self.scale = scale
        self.description = description

    @property
    def dim(self) -> int:
        return self._dim

    def evaluate(self, theta, sample, stratum=None) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self._dim,):
            raise ValueError(f"theta must have length {self._dim}")
        return np.asarray(self.fun(theta, sample), dtype=float)

    def gradient(self, theta, sample, stratum=None) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self._dim,):
            raise ValueError(f"theta must have length {self._dim}")
        if self._grad is not None:
            return np.asarray(self._grad(theta, sample), dtype=float)
        cols = []
        for j in range(self._dim):
            h = 1e-6 * (1.0 + abs(theta[j]))
            up, dn = theta.copy(), theta.copy()
            up[j] += h
            dn[j] -= h
            cols.append((self.evaluate(up, sample) - self.evaluate(dn, sample))
                        / (2 * h))
        return np.column_stack(cols)

    def describe(self) -> dict:
        return {"type": "custom", "scale": self.scale,
                "description": self.description, "dim": self._dim}


class TimeStratifiedCate:
    """Follow-up-time stratification of a linear CATE model.

    ``mode='full'`` gives every time stratum its own copy of all terms;
    ``mode='partial'`` gives per-stratum intercepts with slopes shared
    across strata (the base model must then contain an intercept term).
    Evaluation requires the stratum label of the trial (or of the target
    time point of interest).
    """

    is_linear = True

    def __init__(self, base: LinearCate, followups: dict[str, object],
                 mode: str = "partial"):
        if mode not in ("full", "partial"):
            raise DataValidationError(f"unknown stratification mode {mode!r}")
        self.base = base
        self.mode = mode
        self.schema = base.schema
        self.scale = base.scale
        times = sorted({str(v) for v in followups.values()})
        self.strata: tuple[str, ...] = tuple(times)
        self.trial_stratum = {trial: str(v) for trial, v in followups.items()}
        if mode == "partial":
            if INTERCEPT not in base.terms:
                raise DataValidationError(
                    "partial time stratification needs an intercept term in "
                    "the base model")
            self._slope_terms = tuple(t for t in base.terms if t != INTERCEPT)

    @property
    def dim(self) -> int:
        if self.mode == "full":
            return len(self.strata) * self.base.dim
        return len(self.strata) + len(self._slope_terms)

    @property
    def term_names(self) -> tuple[str, ...]:
        if self.mode == "full":
            return tuple(f"{t.name}@{s}" for s in self.strata
                         for t in self.base.terms)
        return tuple([f"1@{s}" for s in self.strata]
                     + [t.name for t in self._slope_terms])

    def stratum_for_trial(self, trial_id: str) -> str:
        try:
            return self.trial_stratum[trial_id]
        except KeyError:
            raise DataValidationError(
                f"no follow-up time mapped for trial {trial_id!r}") from None

    def _stratum_index(self, stratum) -> int:
        if stratum is None:
            if len(self.strata) == 1:
                return 0
            raise ValueError("time-stratified model needs a stratum label")
        try:
            return self.strata.index(str(stratum))
        except ValueError:
            raise DataValidationError(
                f"unknown time stratum {stratum!r}") from None

    def features(self, sample: CovariateSample, stratum=None) -> np.ndarray:
        t = self._stratum_index(stratum)
        n = sample.n
        out = np.zeros((n, self.dim))
        if self.mode == "full":
            block = self.base.features(sample)
            out[:, t * self.base.dim:(t + 1) * self.base.dim] = block
        else:
            out[:, t] = 1.0
            for j, term in enumerate(self._slope_terms):
                out[:, len(self.strata) + j] = term.values(sample)
        return out

    def evaluate(self, theta, sample, stratum=None) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta must have length {self.dim}")
        return self.features(sample, stratum) @ theta

    def gradient(self, theta, sample, stratum=None) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta must have length {self.dim}")
        return self.features(sample, stratum)

    def describe(self) -> dict:
        return {"type": "time-stratified", "mode": self.mode,
                "scale": self.scale, "strata": list(self.strata),
                "terms": list(self.term_names),
                "trial_stratum": dict(self.trial_stratum)}


def build_time_stratified(base: LinearCate, followups: dict[str, object],
                          mode: str = "partial") -> TimeStratifiedCate:
    return TimeStratifiedCate(base, followups, mode)


def trial_stratum_map(model, trial_ids) -> dict[str, str | None]:
    """Stratum label each trial's moments are evaluated under."""
    if isinstance(model, TimeStratifiedCate):
        return {t: model.stratum_for_trial(t) for t in trial_ids}
    return {t: None for t in trial_ids}
