"""First-step models for treatment-path probabilities given covariates.

Both models predict, for each unit, the probability of every observed
treatment path (the full T-tuple of codes). All downstream weights need only
pairwise functionals P(code c in period s and code d in period t | x) and the
mover probability P(any change | x), exposed through :class:`ScoreView`.

``cell_means`` computes exact within-stratum frequencies over discrete
covariate cells; ``multinomial_logit`` fits a damped-Newton choice model with
linear indices in the features. A fitted model is JSON-serializable and can
score new panels (used by the bootstrap and by exact population tables).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import logsumexp
from sklearn.base import BaseEstimator

from .errors import (
    ContinuousColumn,
    EmptyStratum,
    NoConvergence,
    RankDeficientFeatures,
    Separation,
)

MAX_TRIM = 0.5


def _check_threshold(threshold):
    threshold = float(threshold)
    if not 0.0 <= threshold < MAX_TRIM:
        raise ValueError(f"trim threshold must be in [0, {MAX_TRIM}), got {threshold}")
    return threshold


def path_codes(treatments, n_treatments):
    """Encode each unit's treatment path as a single radix-J integer."""
    treatments = np.asarray(treatments)
    code = np.zeros(treatments.shape[0], dtype=np.int64)
    for t in range(treatments.shape[1]):
        code = code * n_treatments + treatments[:, t]
    return code


def decode_paths(codes, n_treatments, n_periods):
    """Inverse of :func:`path_codes`: (G,) codes -> (G, T) treatment paths."""
    codes = np.asarray(codes, dtype=np.int64)
    out = np.zeros((codes.size, n_periods), dtype=np.int64)
    rem = codes.copy()
    for t in range(n_periods - 1, -1, -1):
        out[:, t] = rem % n_treatments
        rem //= n_treatments
    return out


@dataclass(frozen=True)
class ScoreView:
    """Per-unit path probabilities specialized for one estimation sample."""

    paths: np.ndarray          # (G, T) distinct treatment paths
    probs: np.ndarray          # (N, G) P(path | X_i)
    stratum_codes: np.ndarray  # (N,) grouping used for diagnostics

    def pair_prob(self, c, s, d, t):
        """P(code c in period s and code d in period t | X_i), per unit."""
        mask = (self.paths[:, s] == c) & (self.paths[:, t] == d)
        return self.probs[:, mask].sum(axis=1)

    def mover_prob(self):
        """P(treatment changes at any point | X_i), per unit."""
        moving = (self.paths[:, 1:] != self.paths[:, :-1]).any(axis=1)
        return self.probs[:, moving].sum(axis=1)


class _PropensityCommon:
    """Shared fitted-model behavior (scoring, trimming, serialization)."""

    def score_view(self, panel=None):
        """A :class:`ScoreView` for the fitted panel or a new one."""
        raise NotImplementedError

    def refit(self, panel):
        """Fit a fresh model with the same settings (bootstrap resamples)."""
        cloned = type(self)(**self.get_params())
        return cloned.fit(panel)

    def score(self, c, s, d, t, x):
        """P(code c in period s and code d in period t | X = x)."""
        probs = self._probs_at(x)
        mask = (self.category_paths_[:, s] == c) & (self.category_paths_[:, t] == d)
        return float(probs[mask].sum())

    def mover_prob(self, x):
        """P(treatment changes at any point | X = x)."""
        probs = self._probs_at(x)
        moving = (self.category_paths_[:, 1:] != self.category_paths_[:, :-1]).any(axis=1)
        return float(probs[moving].sum())

    def with_trim(self, threshold):
        """Copy of the model with a recorded trim threshold."""
        threshold = _check_threshold(threshold)
        import copy

        out = copy.copy(self)
        out.trim = threshold
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def trim(model, threshold=0.01):
    """Record a score threshold on the model.

    Downstream estimators flag every unit whose stratum has any required
    denominator score below the threshold, exclude those units, and
    recompute the marginal mover share on the retained sample. A threshold
    of zero is the identity transform.
    """
    return model.with_trim(threshold)


class CellMeansPropensity(BaseEstimator, _PropensityCommon):
    """Exact within-stratum path frequencies over discrete covariate cells.

    Parameters
    ----------
    strata : sequence of str or None
        Discrete covariate columns defining the cells; None uses every
        discrete covariate; an empty sequence pools all units.
    trim : float
        Recorded score threshold in [0, 0.5); see :func:`trim`.
    """

    kind = "cell_means"

    def __init__(self, strata=None, trim=0.0):
        self.strata = strata
        self.trim = trim

    def fit(self, panel, y=None):
        _check_threshold(self.trim)
        codes, labels = panel.stratum_index(self.strata)
        pcodes = path_codes(panel.treatments, panel.n_treatments)
        upaths, pidx = np.unique(pcodes, return_inverse=True)
        n_strata, n_cat = len(labels), len(upaths)
        counts = np.zeros((n_strata, n_cat), dtype=np.int64)
        np.add.at(counts, (codes, pidx), 1)
        totals = counts.sum(axis=1, keepdims=True)
        self.strata_names_ = (
            tuple(self.strata)
            if self.strata is not None
            else tuple(
                n for n, k in zip(panel.covariate_names, panel.covariate_kinds) if k == "discrete"
            )
        )
        self.stratum_labels_ = [tuple(lab) for lab in labels]
        self.stratum_codes_ = codes
        self.category_paths_ = decode_paths(upaths, panel.n_treatments, panel.n_periods)
        self.counts_ = counts
        self.tables_ = counts / totals
        self.n_treatments_ = panel.n_treatments
        self.n_periods_ = panel.n_periods
        self.n_units_ = panel.n_units
        moving = (self.category_paths_[:, 1:] != self.category_paths_[:, :-1]).any(axis=1)
        self.marginal_mover_share_ = float(counts[:, moving].sum() / counts.sum())
        return self

    def _stratum_of(self, x):
        key = tuple(x) if len(self.strata_names_) else ()
        try:
            return self.stratum_labels_.index(key)
        except ValueError:
            raise EmptyStratum(
                f"no fitted stratum for covariate value {key!r} over {self.strata_names_}"
            )

    def _probs_at(self, x):
        return self.tables_[self._stratum_of(x)]

    def _codes_for(self, panel):
        if not self.strata_names_:
            return np.zeros(panel.n_units, dtype=np.intp)
        lookup = {lab: s for s, lab in enumerate(self.stratum_labels_)}
        cols = [panel.covariate_column(n) for n in self.strata_names_]
        codes = np.empty(panel.n_units, dtype=np.intp)
        for i in range(panel.n_units):
            key = tuple(col[i] for col in cols)
            if key not in lookup:
                raise EmptyStratum(f"no fitted stratum for covariate value {key!r}")
            codes[i] = lookup[key]
        return codes

    def score_view(self, panel=None):
        if panel is None:
            codes = self.stratum_codes_
        else:
            codes = self._codes_for(panel)
        return ScoreView(
            paths=self.category_paths_, probs=self.tables_[codes], stratum_codes=codes
        )

    def score_view_for_codes(self, codes):
        """A :class:`ScoreView` for units with known stratum codes."""
        codes = np.asarray(codes, dtype=np.intp)
        return ScoreView(
            paths=self.category_paths_, probs=self.tables_[codes], stratum_codes=codes
        )

    def to_dict(self):
        return {
            "kind": self.kind,
            "strata": list(self.strata_names_),
            "stratum_labels": [list(map(_jsonable, lab)) for lab in self.stratum_labels_],
            "category_paths": self.category_paths_.tolist(),
            "tables": self.tables_.tolist(),
            "counts": self.counts_.tolist(),
            "n_treatments": self.n_treatments_,
            "n_periods": self.n_periods_,
            "marginal_mover_share": self.marginal_mover_share_,
            "trim": float(self.trim),
        }

    @classmethod
    def from_dict(cls, payload):
        model = cls(strata=tuple(payload["strata"]), trim=payload.get("trim", 0.0))
        model.strata_names_ = tuple(payload["strata"])
        model.stratum_labels_ = [tuple(lab) for lab in payload["stratum_labels"]]
        model.category_paths_ = np.asarray(payload["category_paths"], dtype=np.int64)
        model.tables_ = np.asarray(payload["tables"], dtype=float)
        model.counts_ = np.asarray(payload["counts"], dtype=np.int64)
        model.n_treatments_ = int(payload["n_treatments"])
        model.n_periods_ = int(payload["n_periods"])
        model.marginal_mover_share_ = float(payload["marginal_mover_share"])
        model.stratum_codes_ = None
        model.n_units_ = None
        return model

    @classmethod
    def from_tables(cls, strata_names, stratum_labels, category_paths, tables,
                    n_treatments, marginal_mover_share=None):
        """Build a model from exact probability tables (no fitting).

        Used to evaluate estimators against enumerable populations; ``refit``
        on such a model returns itself, keeping scores fixed.
        """
        category_paths = np.asarray(category_paths, dtype=np.int64)
        tables = np.asarray(tables, dtype=float)
        model = cls(strata=tuple(strata_names), trim=0.0)
        model.strata_names_ = tuple(strata_names)
        model.stratum_labels_ = [tuple(lab) for lab in stratum_labels]
        model.category_paths_ = category_paths
        model.tables_ = tables
        model.counts_ = np.zeros_like(tables, dtype=np.int64)
        model.n_treatments_ = int(n_treatments)
        model.n_periods_ = category_paths.shape[1]
        model.marginal_mover_share_ = marginal_mover_share
        model.stratum_codes_ = None
        model.n_units_ = None
        model._exact = True
        return model

    def refit(self, panel):
        if getattr(self, "_exact", False):
            return self
        return super().refit(panel)


def _jsonable(v):
    return v.item() if isinstance(v, np.generic) else v


class MultinomialLogitPropensity(BaseEstimator, _PropensityCommon):
    """Multinomial logit over observed treatment paths with linear indices.

    Parameters
    ----------
    features : sequence of str or None
        Numeric covariate columns; an intercept is always included. None
        means intercept only (fitted probabilities then equal frequencies).
    trim : float
        Recorded score threshold; see :func:`trim`.
    max_iter, tol : damped-Newton controls. Convergence is declared when the
        largest component of the average log-likelihood gradient is below
        ``tol``; hitting ``max_iter`` first raises NoConvergence, and a
        coefficient norm above 1e3 raises Separation.
    """

    kind = "multinomial_logit"

    def __init__(self, features=None, trim=0.0, max_iter=100, tol=1e-8):
        self.features = features
        self.trim = trim
        self.max_iter = max_iter
        self.tol = tol

    def _design(self, panel):
        names = tuple(self.features) if self.features else ()
        x = panel.covariate_matrix(names)
        return np.column_stack([np.ones(panel.n_units), x]), ("const",) + names

    def fit(self, panel, y=None):
        _check_threshold(self.trim)
        z, labels = self._design(panel)
        n, q = z.shape
        _, r, piv = scipy.linalg.qr(z, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        tol_rank = max(z.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
        rank = int((diag > tol_rank).sum())
        if rank < q:
            dropped = [labels[k] for k in piv[rank:]]
            raise RankDeficientFeatures(
                f"feature matrix has rank {rank} < {q}; redundant columns: {dropped}"
            )
        pcodes = path_codes(panel.treatments, panel.n_treatments)
        upaths, y_idx = np.unique(pcodes, return_inverse=True)
        g = len(upaths)
        self.feature_names_ = labels
        self.category_paths_ = decode_paths(upaths, panel.n_treatments, panel.n_periods)
        self.n_treatments_ = panel.n_treatments
        self.n_periods_ = panel.n_periods
        self.n_units_ = panel.n_units
        moving = (self.category_paths_[:, 1:] != self.category_paths_[:, :-1]).any(axis=1)
        self.marginal_mover_share_ = float(moving[y_idx].mean())

        if g == 1:
            self.coef_ = np.zeros((0, q))
            self.coef_cov_ = np.zeros((0, 0))
            self.loglik_ = 0.0
            self.n_iter_ = 0
            self.probs_ = np.ones((n, 1))
            self._design_cache = z
            return self

        y_onehot = np.zeros((n, g))
        y_onehot[np.arange(n), y_idx] = 1.0

        def loglik_probs(coef):
            eta = np.column_stack([np.zeros(n), z @ coef.T])
            ll = float((eta[np.arange(n), y_idx] - logsumexp(eta, axis=1)).sum())
            p = np.exp(eta - logsumexp(eta, axis=1, keepdims=True))
            return ll, p

        coef = np.zeros((g - 1, q))
        ll, p = loglik_probs(coef)
        converged = False
        for it in range(1, self.max_iter + 1):
            resid = y_onehot[:, 1:] - p[:, 1:]
            grad = (z.T @ resid).T.ravel()  # (G-1)*q, summed over units
            if np.max(np.abs(grad)) / n < self.tol:
                converged = True
                n_iter = it - 1
                break
            hess = np.zeros(((g - 1) * q, (g - 1) * q))
            for a in range(1, g):
                for b in range(1, g):
                    w = p[:, a] * ((a == b) - p[:, b])
                    block = z.T @ (z * w[:, None])
                    hess[(a - 1) * q:a * q, (b - 1) * q:b * q] = block
            try:
                step = np.linalg.solve(hess, grad).reshape(g - 1, q)
            except np.linalg.LinAlgError:
                raise Separation("singular information matrix; categories separate")
            scale = 1.0
            for _ in range(60):
                trial = coef + scale * step
                ll_new, p_new = loglik_probs(trial)
                if ll_new >= ll - 1e-12:
                    break
                scale *= 0.5
            coef, ll, p = coef + scale * step, ll_new, p_new
            if np.linalg.norm(coef) > 1e3:
                raise Separation(
                    "coefficients diverged (norm > 1e3); some category is separated"
                )
        else:
            raise NoConvergence(
                f"no convergence after {self.max_iter} iterations "
                f"(max avg gradient {np.max(np.abs(grad)) / n:.2e})"
            )
        # observed information at the optimum, for coefficient covariance
        hess = np.zeros(((g - 1) * q, (g - 1) * q))
        for a in range(1, g):
            for b in range(1, g):
                w = p[:, a] * ((a == b) - p[:, b])
                hess[(a - 1) * q:a * q, (b - 1) * q:b * q] = z.T @ (z * w[:, None])
        self.coef_ = coef
        self.coef_cov_ = np.linalg.inv(hess)
        self.loglik_ = ll
        self.n_iter_ = n_iter if converged else self.max_iter
        self.probs_ = p
        self._design_cache = z
        return self

    def _probs_matrix(self, z):
        n = z.shape[0]
        if self.coef_.shape[0] == 0:
            return np.ones((n, 1))
        eta = np.column_stack([np.zeros(n), z @ self.coef_.T])
        return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))

    def _probs_at(self, x):
        z = np.concatenate([[1.0], np.asarray(x, dtype=float)])[None, :]
        return self._probs_matrix(z)[0]

    def score_view(self, panel=None):
        if panel is None:
            probs = self.probs_
            n = probs.shape[0]
        else:
            z, _ = self._design(panel)
            probs = self._probs_matrix(z)
            n = panel.n_units
        # every unit is its own group for diagnostics under parametric scores
        return ScoreView(
            paths=self.category_paths_,
            probs=probs,
            stratum_codes=np.arange(n, dtype=np.intp),
        )

    def to_dict(self):
        return {
            "kind": self.kind,
            "features": list(self.feature_names_[1:]),
            "category_paths": self.category_paths_.tolist(),
            "coef": self.coef_.tolist(),
            "loglik": self.loglik_,
            "n_treatments": self.n_treatments_,
            "n_periods": self.n_periods_,
            "marginal_mover_share": self.marginal_mover_share_,
            "trim": float(self.trim),
        }

    @classmethod
    def from_dict(cls, payload):
        model = cls(features=tuple(payload["features"]), trim=payload.get("trim", 0.0))
        model.feature_names_ = ("const",) + tuple(payload["features"])
        model.category_paths_ = np.asarray(payload["category_paths"], dtype=np.int64)
        model.coef_ = np.asarray(payload["coef"], dtype=float)
        model.n_treatments_ = int(payload["n_treatments"])
        model.n_periods_ = int(payload["n_periods"])
        model.marginal_mover_share_ = float(payload["marginal_mover_share"])
        model.loglik_ = payload.get("loglik")
        model.coef_cov_ = None
        return model


def model_from_dict(payload):
    """Rebuild a serialized propensity model of either kind."""
    kind = payload.get("kind")
    if kind == "cell_means":
        return CellMeansPropensity.from_dict(payload)
    if kind == "multinomial_logit":
        return MultinomialLogitPropensity.from_dict(payload)
    raise ValueError(f"unknown propensity kind {kind!r}")


def fit_cell_means(panel, strata=None, trim=0.0):
    """Fit exact within-stratum path frequencies; see CellMeansPropensity."""
    return CellMeansPropensity(strata=strata, trim=trim).fit(panel)


def fit_multinomial_logit(panel, features=None, trim=0.0, max_iter=100, tol=1e-8):
    """Fit the path choice model; see MultinomialLogitPropensity."""
    return MultinomialLogitPropensity(
        features=features, trim=trim, max_iter=max_iter, tol=tol
    ).fit(panel)
