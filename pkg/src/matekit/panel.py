"""Balanced longitudinal panels with categorical treatments.

A :class:`PanelDataset` holds N units observed in T ordered periods, each
period assigning one of J treatment codes (0 is the reference) and one real
outcome, plus time-invariant unit covariates. Estimators elsewhere in the
package consume only this container, so all input validation lives here.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .errors import (
    BadPeriodPair,
    BadTreatmentCode,
    MatekitError,
    NonFiniteOutcome,
    TimeVaryingCovariate,
    UnbalancedPanel,
)

COVARIATE_KINDS = ("discrete", "continuous")


def read_config(path):
    """Parse a YAML or JSON config file into a plain dict."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise MatekitError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValueError(f"config file {path} did not parse to a mapping")
    return cfg


@dataclass(frozen=True)
class PanelSchema:
    """Column mapping and treatment coding for long-format panel files."""

    unit: str = "unit"
    period: str = "period"
    treatment: str = "treatment"
    outcome: str = "outcome"
    covariates: tuple = ()  # tuple of (name, kind) pairs
    reference_treatment: int = 0
    n_treatments: int | None = None

    @classmethod
    def from_config(cls, cfg):
        """Build a schema from a run-config dict (``columns`` block etc.)."""
        columns = cfg.get("columns", {})
        cov_spec = columns.get("covariates", [])
        covariates = []
        for entry in cov_spec:
            if isinstance(entry, str):
                covariates.append((entry, None))
            else:
                covariates.append((entry["name"], entry.get("kind")))
        return cls(
            unit=columns.get("unit", "unit"),
            period=columns.get("period", "period"),
            treatment=columns.get("treatment", "treatment"),
            outcome=columns.get("outcome", "outcome"),
            covariates=tuple(covariates),
            reference_treatment=int(cfg.get("reference_treatment", 0)),
            n_treatments=cfg.get("n_treatments"),
        )


@dataclass(frozen=True)
class UnitRecord:
    """One unit's trajectory: treatments and outcomes by period."""

    unit_id: object
    treatments: tuple
    outcomes: tuple
    covariates: dict


@dataclass(frozen=True)
class PanelDataset:
    """Immutable balanced panel in wide (unit by period) layout.

    Attributes
    ----------
    unit_ids : ndarray, shape (N,)
        Original unit identifiers, sorted ascending.
    treatments : ndarray of int, shape (N, T)
        Treatment code of each unit in each period, in 0..J-1.
    outcomes : ndarray of float, shape (N, T)
    covariates : ndarray of object, shape (N, P)
        Time-invariant unit covariates.
    covariate_names, covariate_kinds : tuple of str
        Parallel to the covariate columns; kinds are "discrete" or
        "continuous".
    n_treatments : int
        J; codes are dense 0..J-1 with 0 the reference.
    period_labels : tuple
        Original period values in ascending order; internal periods are
        their positions 0..T-1.
    code_map : tuple of int
        code_map[internal] = original treatment code (identity unless a
        nonzero reference treatment was remapped to 0).
    """

    unit_ids: np.ndarray
    treatments: np.ndarray
    outcomes: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple
    covariate_kinds: tuple
    n_treatments: int
    period_labels: tuple
    code_map: tuple

    def __post_init__(self):
        for arr in (self.unit_ids, self.treatments, self.outcomes, self.covariates):
            arr.setflags(write=False)

    @property
    def n_units(self):
        return self.treatments.shape[0]

    @property
    def n_periods(self):
        return self.treatments.shape[1]

    def unit(self, i):
        """Return unit ``i`` as a :class:`UnitRecord`."""
        return UnitRecord(
            unit_id=self.unit_ids[i],
            treatments=tuple(int(v) for v in self.treatments[i]),
            outcomes=tuple(float(v) for v in self.outcomes[i]),
            covariates={n: self.covariates[i, k] for k, n in enumerate(self.covariate_names)},
        )

    def take(self, indices):
        """Row-subset (with possible repetition, e.g. bootstrap resamples)."""
        indices = np.asarray(indices)
        return PanelDataset(
            unit_ids=self.unit_ids[indices].copy(),
            treatments=self.treatments[indices].copy(),
            outcomes=self.outcomes[indices].copy(),
            covariates=self.covariates[indices].copy(),
            covariate_names=self.covariate_names,
            covariate_kinds=self.covariate_kinds,
            n_treatments=self.n_treatments,
            period_labels=self.period_labels,
            code_map=self.code_map,
        )

    def covariate_column(self, name):
        try:
            k = self.covariate_names.index(name)
        except ValueError:
            raise KeyError(f"unknown covariate {name!r}; have {self.covariate_names}")
        return self.covariates[:, k]

    def covariate_matrix(self, names):
        """Stack named covariates as a float matrix (for parametric models)."""
        if not names:
            return np.empty((self.n_units, 0))
        cols = []
        for name in names:
            col = self.covariate_column(name)
            try:
                cols.append(np.asarray(col, dtype=float))
            except (TypeError, ValueError):
                raise ValueError(f"covariate {name!r} is not numeric")
        return np.column_stack(cols)

    def stratum_index(self, names=None):
        """Group units by the joint value of discrete covariates.

        Returns ``(codes, labels)`` where ``codes`` maps each unit to a
        stratum in 0..S-1 and ``labels[s]`` is the tuple of covariate values
        defining stratum ``s``. Labels are sorted lexicographically, so the
        indexing is deterministic. With no columns every unit is in stratum 0.
        """
        from .errors import ContinuousColumn

        if names is None:
            names = [n for n, k in zip(self.covariate_names, self.covariate_kinds) if k == "discrete"]
        names = list(names)
        for name in names:
            k = self.covariate_names.index(name)
            if self.covariate_kinds[k] != "discrete":
                raise ContinuousColumn(f"covariate {name!r} is continuous; strata need discrete columns")
        if not names:
            return np.zeros(self.n_units, dtype=np.intp), [()]
        invs, uniques = [], []
        for name in names:
            u, inv = np.unique(self.covariate_column(name), return_inverse=True)
            invs.append(inv)
            uniques.append(u)
        flat = np.ravel_multi_index(invs, [len(u) for u in uniques])
        used, codes = np.unique(flat, return_inverse=True)
        coords = np.unravel_index(used, [len(u) for u in uniques])
        labels = [tuple(uniques[k][coords[k][s]] for k in range(len(names))) for s in range(len(used))]
        return codes.astype(np.intp), labels

    def to_dataframe(self, schema=None):
        """Long-format DataFrame (inverse of :func:`load_panel`)."""
        schema = schema or PanelSchema(covariates=tuple((n, k) for n, k in zip(self.covariate_names, self.covariate_kinds)))
        n, t = self.n_units, self.n_periods
        codes = np.asarray(self.code_map)
        out = {
            schema.unit: np.repeat(self.unit_ids, t),
            schema.period: np.tile(np.asarray(self.period_labels, dtype=object), n),
            schema.treatment: codes[self.treatments].ravel(),
            schema.outcome: self.outcomes.ravel(),
        }
        for k, name in enumerate(self.covariate_names):
            out[name] = np.repeat(self.covariates[:, k], t)
        return pd.DataFrame(out)


@dataclass(frozen=True)
class MoverClassification:
    """Mover/stayer status of each unit, with T=2 cell detail."""

    is_mover: np.ndarray
    delta_d: np.ndarray | None
    origin: np.ndarray | None
    destination: np.ndarray | None
    cell_counts: dict

    @property
    def n_movers(self):
        return int(self.is_mover.sum())


@dataclass(frozen=True)
class FirstDifference:
    """Outcome and treatment-indicator differences between two periods."""

    unit_ids: np.ndarray
    dy: np.ndarray
    treatment_start: np.ndarray
    treatment_end: np.ndarray
    delta_d: np.ndarray
    periods: tuple


def _as_schema(schema):
    if schema is None:
        return PanelSchema()
    if isinstance(schema, PanelSchema):
        return schema
    if isinstance(schema, dict):
        if "columns" in schema:
            return PanelSchema.from_config(schema)
        return PanelSchema(**schema)
    raise TypeError(f"schema must be a PanelSchema or dict, got {type(schema)}")


def _infer_kind(series):
    if pd.api.types.is_float_dtype(series):
        return "continuous"
    return "discrete"


def load_panel(path, schema=None):
    """Read a long-format CSV into a validated :class:`PanelDataset`.

    Parameters
    ----------
    path : str or Path
        CSV with one row per (unit, period).
    schema : PanelSchema or dict, optional
        Column mapping; a run-config dict with a ``columns`` block also
        works. Defaults assume columns named unit/period/treatment/outcome.

    Raises
    ------
    UnbalancedPanel, BadTreatmentCode, NonFiniteOutcome, TimeVaryingCovariate
    """
    schema = _as_schema(schema)
    try:
        df = pd.read_csv(path)
    except OSError as exc:
        raise MatekitError(f"cannot read panel data {path}: {exc}") from exc
    return panel_from_dataframe(df, schema)


def panel_from_dataframe(df, schema=None):
    """Validate and reshape a long-format DataFrame into a PanelDataset."""
    schema = _as_schema(schema)
    for col in (schema.unit, schema.period, schema.treatment, schema.outcome):
        if col not in df.columns:
            raise ValueError(f"missing column {col!r} in panel data")

    unit_vals, unit_idx = np.unique(df[schema.unit].to_numpy(), return_inverse=True)
    period_vals, period_idx = np.unique(df[schema.period].to_numpy(), return_inverse=True)
    n, t = len(unit_vals), len(period_vals)
    if t < 2:
        raise UnbalancedPanel(f"need at least 2 periods, found {t}")

    counts = np.zeros((n, t), dtype=np.intp)
    np.add.at(counts, (unit_idx, period_idx), 1)
    if (counts > 1).any():
        i, j = np.argwhere(counts > 1)[0]
        raise UnbalancedPanel(
            f"duplicate row for unit {unit_vals[i]!r} in period {period_vals[j]!r}"
        )
    if (counts == 0).any():
        i, j = np.argwhere(counts == 0)[0]
        raise UnbalancedPanel(
            f"unit {unit_vals[i]!r} has no row for period {period_vals[j]!r}"
        )

    raw_treat = df[schema.treatment].to_numpy()
    treat_float = np.asarray(raw_treat, dtype=float)
    if not np.all(np.isfinite(treat_float)) or not np.all(treat_float == np.floor(treat_float)):
        bad = raw_treat[~(np.isfinite(treat_float) & (treat_float == np.floor(treat_float)))][0]
        raise BadTreatmentCode(f"treatment code {bad!r} is not a nonnegative integer")
    treat_int = treat_float.astype(np.int64)
    if (treat_int < 0).any():
        raise BadTreatmentCode(f"treatment code {treat_int.min()} is negative")
    j_declared = schema.n_treatments
    n_treatments = int(j_declared) if j_declared is not None else int(treat_int.max()) + 1
    if n_treatments < 2:
        raise BadTreatmentCode(f"need at least 2 treatments, declared {n_treatments}")
    if (treat_int >= n_treatments).any():
        raise BadTreatmentCode(
            f"treatment code {treat_int.max()} out of range for {n_treatments} treatments"
        )

    code_map = list(range(n_treatments))
    ref = int(schema.reference_treatment)
    if ref != 0:
        if not 0 <= ref < n_treatments:
            raise BadTreatmentCode(f"reference treatment {ref} out of range")
        remap = np.arange(n_treatments)
        remap[ref], remap[0] = 0, ref
        treat_int = remap[treat_int]
        code_map[0], code_map[ref] = ref, 0

    outcome = np.asarray(df[schema.outcome].to_numpy(), dtype=float)
    if not np.all(np.isfinite(outcome)):
        bad_row = int(np.argwhere(~np.isfinite(outcome))[0])
        raise NonFiniteOutcome(
            f"outcome is not finite for unit {df[schema.unit].iloc[bad_row]!r}"
        )

    treatments = np.zeros((n, t), dtype=np.int64)
    outcomes = np.zeros((n, t), dtype=float)
    treatments[unit_idx, period_idx] = treat_int
    outcomes[unit_idx, period_idx] = outcome

    cov_names, cov_kinds, cov_cols = [], [], []
    for name, kind in schema.covariates:
        if name not in df.columns:
            raise ValueError(f"missing covariate column {name!r}")
        series = df[name]
        kind = kind or _infer_kind(series)
        if kind not in COVARIATE_KINDS:
            raise ValueError(f"covariate kind must be one of {COVARIATE_KINDS}, got {kind!r}")
        vals = series.to_numpy()
        # a covariate must be constant within unit; first-period value is kept
        per_unit = np.empty(n, dtype=object)
        filled = np.zeros(n, dtype=bool)
        order = np.lexsort((period_idx, unit_idx))
        for row in order:
            u = unit_idx[row]
            if not filled[u]:
                per_unit[u] = vals[row]
                filled[u] = True
            elif per_unit[u] != vals[row]:
                raise TimeVaryingCovariate(
                    f"covariate {name!r} varies within unit {unit_vals[u]!r}; "
                    "map period-specific values to separate columns"
                )
        cov_names.append(name)
        cov_kinds.append(kind)
        cov_cols.append(per_unit)

    covariates = (
        np.column_stack(cov_cols) if cov_cols else np.empty((n, 0), dtype=object)
    )
    if covariates.dtype != object:
        covariates = covariates.astype(object)

    return PanelDataset(
        unit_ids=unit_vals,
        treatments=treatments,
        outcomes=outcomes,
        covariates=covariates,
        covariate_names=tuple(cov_names),
        covariate_kinds=tuple(cov_kinds),
        n_treatments=n_treatments,
        period_labels=tuple(period_vals.tolist()),
        code_map=tuple(code_map),
    )


def panel_from_arrays(treatments, outcomes, covariates=None, covariate_names=None,
                      covariate_kinds=None, n_treatments=None, unit_ids=None):
    """Assemble a PanelDataset from in-memory arrays (used by the sim lab)."""
    treatments = np.asarray(treatments, dtype=np.int64)
    outcomes = np.asarray(outcomes, dtype=float)
    if treatments.shape != outcomes.shape or treatments.ndim != 2:
        raise ValueError("treatments and outcomes must be matching (N, T) arrays")
    n, t = treatments.shape
    if not np.all(np.isfinite(outcomes)):
        raise NonFiniteOutcome("outcome array contains non-finite values")
    if (treatments < 0).any():
        raise BadTreatmentCode("negative treatment code")
    j = int(n_treatments) if n_treatments is not None else int(treatments.max()) + 1
    if (treatments >= j).any():
        raise BadTreatmentCode(f"treatment code {treatments.max()} out of range for J={j}")
    if covariates is None:
        covariates = np.empty((n, 0), dtype=object)
        covariate_names = covariate_names or ()
        covariate_kinds = covariate_kinds or ()
    else:
        covariates = np.asarray(covariates, dtype=object)
        if covariates.ndim == 1:
            covariates = covariates[:, None]
        if covariate_names is None:
            covariate_names = tuple(f"x{k}" for k in range(covariates.shape[1]))
        if covariate_kinds is None:
            covariate_kinds = tuple("discrete" for _ in covariate_names)
    if unit_ids is None:
        unit_ids = np.arange(n, dtype=np.int64)
    else:
        unit_ids = np.asarray(unit_ids)
    return PanelDataset(
        unit_ids=unit_ids,
        treatments=treatments,
        outcomes=outcomes,
        covariates=covariates,
        covariate_names=tuple(covariate_names),
        covariate_kinds=tuple(covariate_kinds),
        n_treatments=j,
        period_labels=tuple(range(t)),
        code_map=tuple(range(j)),
    )


def check_period_pair(panel, s, t, ordered=True):
    """Validate a period pair; raises :class:`BadPeriodPair`."""
    t_count = panel.n_periods
    for p in (s, t):
        if not isinstance(p, (int, np.integer)):
            raise BadPeriodPair(f"period {p!r} is not an integer")
        if not 0 <= p < t_count:
            raise BadPeriodPair(f"period {p} out of range for T={t_count}")
    if s == t:
        raise BadPeriodPair(f"period pair ({s}, {t}) must be distinct")
    if ordered and not s < t:
        raise BadPeriodPair(f"period pair ({s}, {t}) must satisfy s < t")


def check_treatment(panel, j):
    if not isinstance(j, (int, np.integer)) or not 0 <= j < panel.n_treatments:
        raise BadTreatmentCode(f"treatment {j!r} out of range for J={panel.n_treatments}")


def classify_movers(panel):
    """Flag movers (units whose treatment changes at any point).

    For two-period panels the per-unit treatment-indicator change, origin,
    destination, and (origin, destination) cell counts are also reported.
    """
    treat = panel.treatments
    is_mover = (treat[:, 1:] != treat[:, :-1]).any(axis=1)
    delta_d = origin = destination = None
    cell_counts = {}
    if panel.n_periods == 2:
        origin = treat[:, 0].copy()
        destination = treat[:, 1].copy()
        j = panel.n_treatments
        eye = np.eye(j, dtype=np.int64)
        delta_d = eye[destination] - eye[origin]
        pairs, counts = np.unique(
            origin * j + destination, return_counts=True
        )
        cell_counts = {
            (int(p) // j, int(p) % j): int(c) for p, c in zip(pairs, counts)
        }
    return MoverClassification(
        is_mover=is_mover,
        delta_d=delta_d,
        origin=origin,
        destination=destination,
        cell_counts=cell_counts,
    )


def first_difference(panel, s=0, t=1):
    """Difference outcomes and treatment indicators between periods s < t."""
    check_period_pair(panel, s, t, ordered=True)
    treat_s = panel.treatments[:, s]
    treat_t = panel.treatments[:, t]
    eye = np.eye(panel.n_treatments, dtype=np.int64)
    return FirstDifference(
        unit_ids=panel.unit_ids,
        dy=panel.outcomes[:, t] - panel.outcomes[:, s],
        treatment_start=treat_s,
        treatment_end=treat_t,
        delta_d=eye[treat_t] - eye[treat_s],
        periods=(int(s), int(t)),
    )
