"""Gaussian-copula generation of covariate samples from marginal summaries.

Draw latent Z ~ MVN(0, R) with unit variances; each covariate is a
deterministic transform of its latent coordinate, so marginals are matched
exactly in distribution while R controls the dependence:

    continuous  X = mean + sd * Z
    binary      X = 1{Z > PhiInv(1 - p)}
    categorical X = level j with cumulative probability bracketing Phi(Z)

Sampling is deterministic given the seed. When generated in chunks, chunk
``i`` of ``c`` uses the stream ``SeedSequence(seed).spawn(c)[i]``, so a
fixed (seed, chunks) pair always reproduces the same sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import yaml
from scipy import stats

from .aggdata import (Covariate, CovariateSample, CovariateSchema,
                      MomentSummary)
from .errors import DataValidationError


@dataclass(frozen=True)
class Marginal:
    name: str
    kind: str                      # bernoulli | normal | categorical
    p: float | None = None
    mean: float | None = None
    sd: float | None = None
    probs: tuple[float, ...] = ()
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind == "bernoulli":
            if self.p is None or not 0.0 < self.p < 1.0:
                raise DataValidationError(
                    f"marginal {self.name!r}: bernoulli p must be in (0, 1)")
            if not self.levels:
                object.__setattr__(self, "levels", ("0", "1"))
        elif self.kind == "normal":
            if self.mean is None or self.sd is None or self.sd <= 0:
                raise DataValidationError(
                    f"marginal {self.name!r}: normal needs mean and sd > 0")
        elif self.kind == "categorical":
            if len(self.probs) < 2 or len(self.probs) != len(self.levels):
                raise DataValidationError(
                    f"marginal {self.name!r}: categorical needs matching "
                    "probs and levels")
            if any(not 0.0 < q < 1.0 for q in self.probs) or \
                    abs(sum(self.probs) - 1.0) > 1e-8:
                raise DataValidationError(
                    f"marginal {self.name!r}: probs must be in (0, 1) and "
                    "sum to 1")
        else:
            raise DataValidationError(
                f"marginal {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class CopulaSpec:
    marginals: tuple[Marginal, ...]
    correlation: np.ndarray
    n: int
    seed: int

    def __post_init__(self):
        K = len(self.marginals)
        R = np.asarray(self.correlation, dtype=float)
        if R.shape != (K, K):
            raise DataValidationError(
                f"correlation matrix must be {K}x{K}")
        if not np.allclose(R, R.T, atol=1e-12):
            raise DataValidationError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(R), 1.0, atol=1e-12):
            raise DataValidationError("correlation matrix needs unit diagonal")
        object.__setattr__(self, "correlation", R)
        if self.n < 1:
            raise DataValidationError("sample size n must be >= 1")

    def schema(self) -> CovariateSchema:
        covs = []
        for m in self.marginals:
            if m.kind == "bernoulli":
                covs.append(Covariate(m.name, "binary", m.levels))
            elif m.kind == "normal":
                covs.append(Covariate(m.name, "continuous"))
            else:
                covs.append(Covariate(m.name, "categorical", m.levels))
        return CovariateSchema(tuple(covs))


def exchangeable_correlation(K: int, rho: float) -> np.ndarray:
    R = np.full((K, K), float(rho))
    np.fill_diagonal(R, 1.0)
    return R


def sample(spec: CopulaSpec, role: str = "target", chunks: int = 1,
           schema: CovariateSchema | None = None) -> CovariateSample:
    """Draw a covariate sample from the copula spec, deterministic per seed."""
    try:
        L = np.linalg.cholesky(spec.correlation)
    except np.linalg.LinAlgError:
        raise DataValidationError(
            "latent correlation matrix is not positive definite") from None
    K = len(spec.marginals)
    sizes = [spec.n // chunks + (1 if i < spec.n % chunks else 0)
             for i in range(chunks)]
    seeds = np.random.SeedSequence(spec.seed).spawn(chunks)
    Z = np.vstack([np.random.default_rng(ss).standard_normal((sz, K)) @ L.T
                   for ss, sz in zip(seeds, sizes)])

    columns: dict[str, np.ndarray] = {}
    for j, m in enumerate(spec.marginals):
        z = Z[:, j]
        if m.kind == "normal":
            columns[m.name] = m.mean + m.sd * z
        elif m.kind == "bernoulli":
            columns[m.name] = (z > stats.norm.ppf(1.0 - m.p)).astype(np.int8)
        else:
            cut = stats.norm.ppf(np.cumsum(m.probs[:-1]))
            idx = np.searchsorted(cut, z, side="left")
            columns[m.name] = np.array(m.levels, dtype=object)[idx]
    return CovariateSample(schema or spec.schema(), columns, role)


def fit_spec_from_summaries(summaries: list[MomentSummary],
                            correlation, n: int, seed: int,
                            sd_overrides: dict[str, float] | None = None
                            ) -> CopulaSpec:
    """Build a copula spec matching reported means/proportions exactly.

    ``summaries`` holds one proportion per binary covariate and a mean
    (plus second_moment, or an ``sd_overrides`` entry) per continuous one.
    ``correlation`` is a K x K matrix or a scalar for an exchangeable
    latent correlation.
    """
    sd_overrides = sd_overrides or {}
    by_cov: dict[str, dict[str, float]] = {}
    order: list[str] = []
    for s in summaries:
        name = s.spec.covariate
        if name not in by_cov:
            by_cov[name] = {}
            order.append(name)
        by_cov[name][s.spec.kind] = s.value

    marginals = []
    for name in order:
        vals = by_cov[name]
        if "proportion" in vals:
            marginals.append(Marginal(name, "bernoulli", p=vals["proportion"]))
        elif "mean" in vals:
            if name in sd_overrides:
                sd = sd_overrides[name]
            elif "second_moment" in vals:
                var = vals["second_moment"] - vals["mean"] ** 2
                if var <= 0:
                    raise DataValidationError(
                        f"covariate {name!r}: nonpositive implied variance")
                sd = math.sqrt(var)
            else:
                raise DataValidationError(
                    f"continuous covariate {name!r} has no dispersion "
                    "information: supply a second moment or an sd override")
            marginals.append(Marginal(name, "normal", mean=vals["mean"], sd=sd))
        else:
            raise DataValidationError(
                f"covariate {name!r}: need a proportion or a mean summary")

    K = len(marginals)
    R = exchangeable_correlation(K, correlation) if np.isscalar(correlation) \
        else np.asarray(correlation, dtype=float)
    return CopulaSpec(tuple(marginals), R, n, seed)


def load_copula_spec(path) -> CopulaSpec:
    with open(path) as f:
        raw = yaml.safe_load(f)
    return copula_spec_from_dict(raw, where=str(path))


def copula_spec_from_dict(raw: dict, where: str = "copula spec") -> CopulaSpec:
    try:
        entries = raw["marginals"]
        n = int(raw["n"])
        seed = int(raw["seed"])
    except (KeyError, TypeError):
        raise DataValidationError(
            f"{where}: needs marginals, n, and seed entries") from None
    marginals = []
    for e in entries:
        marginals.append(Marginal(
            name=str(e["name"]), kind=str(e["kind"]),
            p=e.get("p"), mean=e.get("mean"), sd=e.get("sd"),
            probs=tuple(e.get("probs", ())),
            levels=tuple(str(v) for v in e.get("levels", ())),
        ))
    corr = raw.get("correlation", 0.0)
    R = exchangeable_correlation(len(marginals), float(corr)) \
        if np.isscalar(corr) else np.asarray(corr, dtype=float)
    return CopulaSpec(tuple(marginals), R, n, seed)


def save_copula_spec(spec: CopulaSpec, path) -> None:
    doc: dict = {"n": spec.n, "seed": spec.seed, "marginals": []}
    for m in spec.marginals:
        e: dict = {"name": m.name, "kind": m.kind}
        if m.kind == "bernoulli":
            e["p"] = m.p
            e["levels"] = list(m.levels)
        elif m.kind == "normal":
            e["mean"], e["sd"] = m.mean, m.sd
        else:
            e["probs"], e["levels"] = list(m.probs), list(m.levels)
        doc["marginals"].append(e)
    doc["correlation"] = [[float(v) for v in row] for row in spec.correlation]
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)
