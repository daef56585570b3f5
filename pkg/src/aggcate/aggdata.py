"""Data model, ingestion, and validation for aggregate trial summaries.

File formats
------------
effects CSV
    ``trial,covariate,level,estimate,se,events1,n1,events0,n0``.
    ``covariate`` and ``level`` are empty for the marginal (overall) effect.
    The count columns are optional; when present and ``estimate``/``se`` are
    empty, the risk difference and its standard error are derived from them.

moments CSV
    ``trial,covariate,statistic,value,n`` with ``statistic`` one of
    ``mean``, ``proportion``, ``sd``. Proportion rows for categorical
    covariates use ``covariate=level`` syntax in the covariate field; for
    binary covariates the bare name means the proportion of the positive
    level. ``sd`` rows are converted to second moments on ingest using the
    population-variance convention ``m2 = sd^2 * (n-1)/n + mean^2`` and
    require a ``mean`` row for the same covariate.

schema YAML
    ::

        covariates:
          - {name: lvef, kind: continuous}
          - {name: prehhf, kind: binary, levels: [no, yes]}
        subgroup_cuts:
          - trial: TRIAL-A
            covariate: lvef
            strata:
              - {label: 40-49, lo: 40, hi: 50}
              - {label: '>=60', lo: 60}

    Binary covariates take values {0, 1}; ``levels`` names the 0 and 1
    codes in that order (default ``['0', '1']``). Continuous strata are
    half-open intervals ``[lo, hi)`` with omitted bounds meaning +/-inf.

covariate sample CSV
    One column per schema covariate, optional ``Y`` outcome column.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import yaml

from .errors import DataValidationError

MARGINAL = "overall"

_KINDS = ("binary", "categorical", "continuous")


@dataclass(frozen=True)
class Covariate:
    name: str
    kind: str
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise DataValidationError(
                f"covariate {self.name!r}: unknown kind {self.kind!r}"
            )
        if self.kind == "binary" and not self.levels:
            object.__setattr__(self, "levels", ("0", "1"))
        if self.kind == "binary" and len(self.levels) != 2:
            raise DataValidationError(
                f"binary covariate {self.name!r} needs exactly 2 level labels"
            )
        if self.kind == "categorical" and len(self.levels) < 2:
            raise DataValidationError(
                f"categorical covariate {self.name!r} needs >= 2 levels"
            )
        if len(set(self.levels)) != len(self.levels):
            raise DataValidationError(
                f"covariate {self.name!r} has duplicate levels"
            )


@dataclass(frozen=True)
class Stratum:
    """One subgroup stratum of a covariate.

    Discrete covariates carry ``value`` (the level label); continuous ones
    carry the half-open interval [lo, hi).
    """

    label: str
    value: str | None = None
    lo: float = -math.inf
    hi: float = math.inf


@dataclass(frozen=True)
class CovariateSchema:
    covariates: tuple[Covariate, ...]
    # (trial_id, covariate_name) -> strata, continuous covariates only
    subgroup_cuts: tuple[tuple[tuple[str, str], tuple[Stratum, ...]], ...] = ()

    def __post_init__(self):
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise DataValidationError("duplicate covariate names in schema")
        for (trial, cov), strata in self.subgroup_cuts:
            c = self.covariate(cov)
            if c.kind != "continuous":
                raise DataValidationError(
                    f"subgroup cuts for {cov!r} ({trial}): only continuous "
                    "covariates take explicit cuts"
                )
            labels = [s.label for s in strata]
            if len(set(labels)) != len(labels):
                raise DataValidationError(
                    f"duplicate stratum labels for {cov!r} in trial {trial!r}"
                )

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    def covariate(self, name: str) -> Covariate:
        for c in self.covariates:
            if c.name == name:
                return c
        raise DataValidationError(f"unknown covariate {name!r}")

    def covariate_index(self, name: str) -> int:
        for k, c in enumerate(self.covariates):
            if c.name == name:
                return k
        raise DataValidationError(f"unknown covariate {name!r}")

    def cuts_for(self, trial_id: str, covariate: str) -> tuple[Stratum, ...]:
        for (t, c), strata in self.subgroup_cuts:
            if t == trial_id and c == covariate:
                return strata
        return ()

    def resolve_stratum(self, trial_id: str, covariate: str, label: str) -> Stratum:
        """Map an effect row's (covariate, level) to exactly one stratum."""
        c = self.covariate(covariate)
        if c.kind == "continuous":
            for s in self.cuts_for(trial_id, covariate):
                if s.label == label:
                    return s
            raise DataValidationError(
                f"trial {trial_id!r}: no subgroup cut named {label!r} for "
                f"continuous covariate {covariate!r}"
            )
        if label not in c.levels:
            raise DataValidationError(
                f"trial {trial_id!r}: level {label!r} not declared for "
                f"covariate {covariate!r}"
            )
        return Stratum(label=label, value=label)

    def stratum_indicator(self, stratum: Stratum, covariate: Covariate,
                          column: np.ndarray) -> np.ndarray:
        """0/1 indicator of stratum membership for a sample column."""
        if covariate.kind == "continuous":
            return ((column >= stratum.lo) & (column < stratum.hi)).astype(float)
        if covariate.kind == "binary":
            code = covariate.levels.index(stratum.value)
            return (column == code).astype(float)
        return (column == stratum.value).astype(float)


@dataclass(frozen=True)
class EffectEstimate:
    """One reported treatment-effect row; covariate/level None means marginal."""

    trial_id: str
    covariate: str | None
    level: str | None
    estimate: float
    se: float
    counts: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if (self.covariate is None) != (self.level is None):
            raise DataValidationError(
                f"trial {self.trial_id!r}: covariate and level must both be "
                "set (subgroup) or both empty (marginal)"
            )
        degenerate = False
        if self.counts is not None:
            e1, n1, e0, n0 = self.counts
            degenerate = (e1 in (0, n1)) and (e0 in (0, n0))
        if self.se <= 0 and not degenerate:
            raise DataValidationError(
                f"trial {self.trial_id!r} effect ({self.covariate}, "
                f"{self.level}): se must be positive, got {self.se}"
            )

    @property
    def is_marginal(self) -> bool:
        return self.covariate is None


@dataclass(frozen=True)
class MomentSpec:
    kind: str  # mean | proportion | second_moment
    covariate: str
    level: str | None = None

    def label(self) -> str:
        if self.kind == "proportion" and self.level is not None:
            return f"proportion({self.covariate}={self.level})"
        return f"{self.kind}({self.covariate})"


@dataclass(frozen=True)
class MomentSummary:
    trial_id: str
    spec: MomentSpec
    value: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise DataValidationError(
                f"trial {self.trial_id!r}: moment n must be >= 1"
            )
        if self.spec.kind == "proportion" and not 0.0 <= self.value <= 1.0:
            raise DataValidationError(
                f"trial {self.trial_id!r}: proportion {self.spec.label()} = "
                f"{self.value} outside [0, 1]"
            )


@dataclass(frozen=True)
class TrialAggregate:
    trial_id: str
    effects: tuple[EffectEstimate, ...]  # marginal first
    moments: tuple[MomentSummary, ...]
    n: int

    def __post_init__(self):
        if not self.effects or not self.effects[0].is_marginal:
            raise DataValidationError(
                f"trial {self.trial_id!r} has no marginal effect"
            )
        seen = set()
        for e in self.effects:
            key = (e.covariate, e.level)
            if key in seen:
                raise DataValidationError(
                    f"trial {self.trial_id!r}: duplicate effect row {key}"
                )
            seen.add(key)

    @property
    def n_effects(self) -> int:
        return len(self.effects)


@dataclass(frozen=True)
class MetaDataset:
    schema: CovariateSchema
    trials: tuple[TrialAggregate, ...]

    def __post_init__(self):
        ids = [t.trial_id for t in self.trials]
        if len(set(ids)) != len(ids):
            raise DataValidationError("duplicate trial ids")
        for t in self.trials:
            for e in t.effects:
                if e.covariate is not None:
                    self.schema.resolve_stratum(t.trial_id, e.covariate, e.level)
            for m in t.moments:
                self._check_moment(t, m)

    def _check_moment(self, trial: TrialAggregate, m: MomentSummary) -> None:
        cov = self.schema.covariate(m.spec.covariate)
        if m.spec.kind in ("mean", "second_moment") and cov.kind == "categorical":
            raise DataValidationError(
                f"trial {trial.trial_id!r}: {m.spec.label()} not defined for "
                "categorical covariates"
            )
        if m.spec.kind == "second_moment":
            means = [x.value for x in trial.moments
                     if x.spec == MomentSpec("mean", m.spec.covariate)]
            if means and m.value < means[0] ** 2 - 1e-8 * max(1.0, means[0] ** 2):
                raise DataValidationError(
                    f"trial {trial.trial_id!r}: second moment of "
                    f"{m.spec.covariate!r} below squared mean"
                )

    @property
    def trial_ids(self) -> tuple[str, ...]:
        return tuple(t.trial_id for t in self.trials)

    @property
    def J(self) -> int:
        """Total number of stacked effect moments across trials."""
        return sum(t.n_effects for t in self.trials)

    def trial(self, trial_id: str) -> TrialAggregate:
        for t in self.trials:
            if t.trial_id == trial_id:
                return t
        raise DataValidationError(f"unknown trial {trial_id!r}")

    def stacked_effects(self):
        """Flatten effects across trials in canonical order.

        Returns (tau, se, keys) where keys[j] = (trial_id, covariate, level)
        and covariate/level are None for marginal rows.
        """
        tau, se, keys = [], [], []
        for t in self.trials:
            for e in t.effects:
                tau.append(e.estimate)
                se.append(e.se)
                keys.append((t.trial_id, e.covariate, e.level))
        return np.asarray(tau, dtype=float), np.asarray(se, dtype=float), keys


@dataclass
class CovariateSample:
    """Individual-level covariate rows conforming to a schema.

    Columns are numpy arrays: float for continuous, 0/1 int for binary,
    object (level labels) for categorical. ``role`` is ``base`` (the
    dominating distribution Q) or ``target`` (S = 0).
    """

    schema: CovariateSchema
    columns: dict[str, np.ndarray]
    role: str
    outcome: np.ndarray | None = None
    n: int = field(init=False)

    def __post_init__(self):
        if self.role not in ("base", "target"):
            raise DataValidationError(f"unknown sample role {self.role!r}")
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) != 1:
            raise DataValidationError("ragged covariate columns")
        self.n = lengths.pop()
        if self.n < 1:
            raise DataValidationError("empty covariate sample")
        for c in self.schema.covariates:
            if c.name not in self.columns:
                raise DataValidationError(f"sample missing column {c.name!r}")
            col = self.columns[c.name]
            if c.kind == "binary" and not np.isin(col, (0, 1)).all():
                raise DataValidationError(
                    f"binary column {c.name!r} has values outside {{0, 1}}"
                )
            if c.kind == "categorical":
                bad = set(np.unique(col)) - set(c.levels)
                if bad:
                    raise DataValidationError(
                        f"categorical column {c.name!r} has undeclared "
                        f"levels {sorted(bad)}"
                    )
            if c.kind in ("binary", "continuous") and not np.isfinite(
                    col.astype(float)).all():
                raise DataValidationError(
                    f"column {c.name!r} has missing or non-finite values"
                )
        if self.outcome is not None and len(self.outcome) != self.n:
            raise DataValidationError("outcome column length mismatch")

    def column(self, name: str) -> np.ndarray:
        return self.columns[name]

    def numeric_column(self, name: str) -> np.ndarray:
        """Column as float; categorical columns are not numeric."""
        c = self.schema.covariate(name)
        if c.kind == "categorical":
            raise DataValidationError(
                f"categorical covariate {name!r} has no numeric value; use "
                "level indicators"
            )
        return self.columns[name].astype(float)

    def subset(self, mask: np.ndarray) -> "CovariateSample":
        cols = {k: v[mask] for k, v in self.columns.items()}
        out = self.outcome[mask] if self.outcome is not None else None
        return CovariateSample(self.schema, cols, self.role, out)


def risk_difference_from_counts(events1: int, n1: int, events0: int, n0: int):
    """Risk difference and SE from 2x2 event counts.

    Returns (p1 - p0, sqrt(p1 q1 / n1 + p0 q0 / n0)).
    """
    for events, n, arm in ((events1, n1, "treatment"), (events0, n0, "control")):
        if n < 1:
            raise DataValidationError(f"{arm} arm has zero denominator")
        if not 0 <= events <= n:
            raise DataValidationError(
                f"{arm} arm: events {events} outside [0, {n}]"
            )
    p1, p0 = events1 / n1, events0 / n0
    se = math.sqrt(p1 * (1 - p1) / n1 + p0 * (1 - p0) / n0)
    return p1 - p0, se


def _parse_float(raw: str, where: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise DataValidationError(f"{where}: non-numeric field {raw!r}") from None


def _parse_int(raw: str, where: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise DataValidationError(f"{where}: non-integer field {raw!r}") from None


def _decimal_unit(raw: str) -> float:
    """Rounding unit implied by a decimal string, e.g. '0.032' -> 1e-3."""
    raw = raw.strip()
    if "e" in raw.lower():
        return 0.0
    if "." not in raw:
        return 1.0
    return 10.0 ** -(len(raw) - raw.index(".") - 1)


def _read_csv_rows(path, required: tuple[str, ...], optional: tuple[str, ...] = ()):
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    cols = list(df.columns)
    missing = [c for c in required if c not in cols]
    if missing:
        raise DataValidationError(f"{path}: missing columns {missing}")
    unknown = [c for c in cols if c not in required + optional]
    if unknown:
        raise DataValidationError(f"{path}: unknown columns {unknown}")
    return df


def load_schema(path) -> CovariateSchema:
    with open(path) as f:
        raw = yaml.safe_load(f)
    return schema_from_dict(raw, where=str(path))


def schema_from_dict(raw: dict, where: str = "schema") -> CovariateSchema:
    if not isinstance(raw, dict) or "covariates" not in raw:
        raise DataValidationError(f"{where}: expected a 'covariates' list")
    covs = []
    for entry in raw["covariates"]:
        covs.append(Covariate(
            name=str(entry["name"]),
            kind=str(entry["kind"]),
            levels=tuple(str(v) for v in entry.get("levels", ())),
        ))
    cuts = []
    for entry in raw.get("subgroup_cuts", ()) or ():
        strata = tuple(
            Stratum(
                label=str(s["label"]),
                lo=float(s.get("lo", -math.inf)),
                hi=float(s.get("hi", math.inf)),
            )
            for s in entry["strata"]
        )
        cuts.append(((str(entry["trial"]), str(entry["covariate"])), strata))
    return CovariateSchema(covariates=tuple(covs), subgroup_cuts=tuple(cuts))


def save_schema(schema: CovariateSchema, path) -> None:
    doc: dict = {"covariates": []}
    for c in schema.covariates:
        entry: dict = {"name": c.name, "kind": c.kind}
        if c.kind != "continuous":
            entry["levels"] = list(c.levels)
        doc["covariates"].append(entry)
    if schema.subgroup_cuts:
        doc["subgroup_cuts"] = []
        for (trial, cov), strata in schema.subgroup_cuts:
            doc["subgroup_cuts"].append({
                "trial": trial,
                "covariate": cov,
                "strata": [
                    {"label": s.label}
                    | ({"lo": s.lo} if math.isfinite(s.lo) else {})
                    | ({"hi": s.hi} if math.isfinite(s.hi) else {})
                    for s in strata
                ],
            })
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


def _effect_from_row(row, schema: CovariateSchema, where: str) -> EffectEstimate:
    trial = row["trial"].strip()
    cov = row["covariate"].strip() or None
    level = row["level"].strip() or None
    raw_est, raw_se = row["estimate"].strip(), row["se"].strip()
    counts = None
    raw_counts = [row.get(c, "").strip() for c in ("events1", "n1", "events0", "n0")]
    if any(raw_counts):
        if not all(raw_counts):
            raise DataValidationError(f"{where}: partial count columns")
        counts = tuple(_parse_int(v, where) for v in raw_counts)

    if raw_est and raw_se:
        estimate, se = _parse_float(raw_est, where), _parse_float(raw_se, where)
        if counts is not None:
            derived_est, derived_se = risk_difference_from_counts(*counts)
            unit = max(_decimal_unit(raw_est), 1e-12)
            if abs(derived_est - estimate) > 2 * unit:
                warnings.warn(
                    f"{where}: reported estimate {estimate} differs from "
                    f"count-derived {derived_est:.6f} by more than 2x the "
                    "rounding unit; keeping the reported value"
                )
    elif counts is not None:
        estimate, se = risk_difference_from_counts(*counts)
    else:
        raise DataValidationError(
            f"{where}: need either estimate+se or full counts"
        )
    return EffectEstimate(trial, cov, level, estimate, se, counts)


def _moment_from_row(row, schema: CovariateSchema, where: str):
    trial = row["trial"].strip()
    covfield = row["covariate"].strip()
    stat = row["statistic"].strip()
    value = _parse_float(row["value"].strip(), where)
    n = _parse_int(row["n"].strip(), where)
    if stat == "proportion":
        if "=" in covfield:
            name, level = (s.strip() for s in covfield.split("=", 1))
            cov = schema.covariate(name)
            if level not in cov.levels:
                raise DataValidationError(
                    f"{where}: level {level!r} not declared for {name!r}"
                )
        else:
            name = covfield
            cov = schema.covariate(name)
            if cov.kind != "binary":
                raise DataValidationError(
                    f"{where}: bare proportion needs a binary covariate; "
                    f"use '{name}=<level>'"
                )
            level = cov.levels[1]
        spec = MomentSpec("proportion", name, level)
    elif stat in ("mean", "sd"):
        schema.covariate(covfield)
        spec = MomentSpec(stat, covfield)
    elif stat == "second_moment":
        schema.covariate(covfield)
        spec = MomentSpec("second_moment", covfield)
    else:
        raise DataValidationError(f"{where}: unknown statistic {stat!r}")
    return trial, spec, value, n


def _convert_sds(trial_id: str, rows: list) -> tuple[MomentSummary, ...]:
    """Replace sd entries with second moments, in place in the ordering."""
    means = {spec.covariate: value for spec, value, _ in rows if spec.kind == "mean"}
    out = []
    for spec, value, n in rows:
        if spec.kind == "sd":
            if spec.covariate not in means:
                raise DataValidationError(
                    f"trial {trial_id!r}: sd of {spec.covariate!r} reported "
                    "without its mean"
                )
            if value < 0:
                raise DataValidationError(
                    f"trial {trial_id!r}: negative sd for {spec.covariate!r}"
                )
            m = means[spec.covariate]
            m2 = value ** 2 * (n - 1) / n + m ** 2
            out.append(MomentSummary(
                trial_id, MomentSpec("second_moment", spec.covariate), m2, n))
        else:
            out.append(MomentSummary(trial_id, spec, value, n))
    return tuple(out)


def load_meta_dataset(effects_path, moments_path, schema_path) -> MetaDataset:
    schema = load_schema(schema_path)
    return meta_dataset_from_frames(
        _read_csv_rows(effects_path, ("trial", "covariate", "level", "estimate", "se"),
                       ("events1", "n1", "events0", "n0")),
        _read_csv_rows(moments_path, ("trial", "covariate", "statistic", "value", "n")),
        schema,
        effects_where=str(effects_path),
        moments_where=str(moments_path),
    )


def meta_dataset_from_frames(effects_df, moments_df, schema,
                             effects_where="effects", moments_where="moments"
                             ) -> MetaDataset:
    by_trial_effects: dict[str, list[EffectEstimate]] = {}
    for i, row in effects_df.iterrows():
        e = _effect_from_row(row, schema, f"{effects_where} row {i + 2}")
        by_trial_effects.setdefault(e.trial_id, []).append(e)

    by_trial_moments: dict[str, list] = {}
    trial_ns: dict[str, set[int]] = {}
    for i, row in moments_df.iterrows():
        trial, spec, value, n = _moment_from_row(
            row, schema, f"{moments_where} row {i + 2}")
        by_trial_moments.setdefault(trial, []).append((spec, value, n))
        trial_ns.setdefault(trial, set()).add(n)

    trials = []
    for trial_id, effects in by_trial_effects.items():
        marginal = [e for e in effects if e.is_marginal]
        if len(marginal) != 1:
            raise DataValidationError(
                f"trial {trial_id!r} has {len(marginal)} marginal effect rows "
                "(need exactly 1)"
            )
        ordered = tuple(marginal + [e for e in effects if not e.is_marginal])
        raw_moments = by_trial_moments.get(trial_id, [])
        if not raw_moments:
            raise DataValidationError(
                f"trial {trial_id!r} has effects but no covariate moments"
            )
        ns = trial_ns[trial_id]
        if len(ns) > 1:
            warnings.warn(
                f"trial {trial_id!r}: moment rows report different n values "
                f"{sorted(ns)}; using the largest"
            )
        moments = _convert_sds(trial_id, raw_moments)
        trials.append(TrialAggregate(trial_id, ordered, moments, max(ns)))

    orphan = set(by_trial_moments) - set(by_trial_effects)
    if orphan:
        raise DataValidationError(
            f"moments reported for trials with no effects: {sorted(orphan)}"
        )
    if not trials:
        raise DataValidationError("no trials found: trial has no marginal effect")
    return MetaDataset(schema=schema, trials=tuple(trials))


def save_meta_dataset(dataset: MetaDataset, effects_path, moments_path) -> None:
    """Serialize back to the CSV formats accepted by ``load_meta_dataset``."""
    with open(effects_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["trial", "covariate", "level", "estimate", "se",
                    "events1", "n1", "events0", "n0"])
        for t in dataset.trials:
            for e in t.effects:
                counts = e.counts if e.counts is not None else ("", "", "", "")
                w.writerow([t.trial_id, e.covariate or "", e.level or "",
                            repr(e.estimate), repr(e.se), *counts])
    with open(moments_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["trial", "covariate", "statistic", "value", "n"])
        for t in dataset.trials:
            for m in t.moments:
                covfield = m.spec.covariate
                if m.spec.kind == "proportion":
                    cov = dataset.schema.covariate(m.spec.covariate)
                    if cov.kind != "binary" or m.spec.level != cov.levels[1]:
                        covfield = f"{m.spec.covariate}={m.spec.level}"
                w.writerow([t.trial_id, covfield, m.spec.kind,
                            repr(m.value), m.n])


def load_covariate_sample(path, schema: CovariateSchema, role: str
                          ) -> CovariateSample:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    return covariate_sample_from_frame(df, schema, role, where=str(path))


def covariate_sample_from_frame(df, schema: CovariateSchema, role: str,
                                where: str = "sample") -> CovariateSample:
    missing = [c.name for c in schema.covariates if c.name not in df.columns]
    if missing:
        raise DataValidationError(f"{where}: missing columns {missing}")
    columns: dict[str, np.ndarray] = {}
    for c in schema.covariates:
        raw = df[c.name].astype(str).str.strip()
        if (raw == "").any():
            raise DataValidationError(f"{where}: missing value in {c.name!r}")
        if c.kind == "continuous":
            try:
                columns[c.name] = raw.astype(float).to_numpy()
            except ValueError:
                raise DataValidationError(
                    f"{where}: non-numeric value in {c.name!r}"
                ) from None
        elif c.kind == "binary":
            mapping = {c.levels[0]: 0, c.levels[1]: 1, "0": 0, "1": 1}
            vals = raw.map(mapping)
            if vals.isna().any():
                bad = raw[vals.isna()].iloc[0]
                raise DataValidationError(
                    f"{where}: value {bad!r} in binary column {c.name!r} not "
                    f"in levels {list(c.levels)}"
                )
            columns[c.name] = vals.to_numpy(dtype=np.int8)
        else:
            columns[c.name] = raw.to_numpy(dtype=object)
    outcome = None
    if "Y" in df.columns:
        outcome = df["Y"].astype(float).to_numpy()
    return CovariateSample(schema, columns, role, outcome)


def save_covariate_sample(sample: CovariateSample, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        header = list(sample.schema.names)
        if sample.outcome is not None:
            header.append("Y")
        w.writerow(header)
        cols = [sample.columns[n] for n in sample.schema.names]
        covs = {c.name: c for c in sample.schema.covariates}
        for i in range(sample.n):
            row = []
            for name, col in zip(sample.schema.names, cols):
                c = covs[name]
                if c.kind == "continuous":
                    row.append(repr(float(col[i])))
                elif c.kind == "binary":
                    row.append(c.levels[int(col[i])])
                else:
                    row.append(col[i])
            if sample.outcome is not None:
                row.append(repr(float(sample.outcome[i])))
            w.writerow(row)


def parse_filter(expr: str, schema: CovariateSchema):
    """Parse 'cov=level,cov2<=cut' conjunctions into (name, op, value) terms."""
    terms = []
    for part in expr.split(","):
        part = part.strip()
        if not part:
            continue
        for op in ("<=", ">=", "<", ">", "="):
            if op in part:
                name, _, value = part.partition(op)
                name, value = name.strip(), value.strip()
                cov = schema.covariate(name)
                if op == "=":
                    if cov.kind == "continuous":
                        raise DataValidationError(
                            f"filter {part!r}: use an inequality for "
                            "continuous covariates"
                        )
                    if value not in cov.levels:
                        raise DataValidationError(
                            f"filter {part!r}: level {value!r} not declared"
                        )
                    terms.append((name, op, value))
                else:
                    if cov.kind == "categorical":
                        raise DataValidationError(
                            f"filter {part!r}: inequalities need a numeric "
                            "covariate"
                        )
                    terms.append((name, op, float(value)))
                break
        else:
            raise DataValidationError(f"cannot parse filter term {part!r}")
    if not terms:
        raise DataValidationError(f"empty filter expression {expr!r}")
    return terms


def filter_mask(sample: CovariateSample, expr: str) -> np.ndarray:
    """Boolean row mask for a conjunction filter expression."""
    mask = np.ones(sample.n, dtype=bool)
    for name, op, value in parse_filter(expr, sample.schema):
        cov = sample.schema.covariate(name)
        if op == "=":
            if cov.kind == "binary":
                col = sample.columns[name]
                mask &= col == cov.levels.index(value)
            else:
                mask &= sample.columns[name] == value
        else:
            col = sample.numeric_column(name)
            mask &= {"<=": col <= value, ">=": col >= value,
                     "<": col < value, ">": col > value}[op]
    return mask


def dataset_to_text(dataset: MetaDataset) -> str:
    """Human-readable one-screen summary used by `validate` and fit reports."""
    buf = io.StringIO()
    print(f"trials: {len(dataset.trials)}   stacked effect moments J = "
          f"{dataset.J}", file=buf)
    for t in dataset.trials:
        subgroups = ", ".join(
            f"{e.covariate}={e.level}" for e in t.effects if not e.is_marginal)
        print(f"  {t.trial_id}: n={t.n}, J_s={t.n_effects}, R_s="
              f"{len(t.moments)}  [{subgroups}]", file=buf)
    return buf.getvalue()
