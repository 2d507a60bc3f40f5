"""First-differenced mover regressions and their cell-mean decompositions.

For a two-period panel the regression of outcome growth on treatment-
indicator changes has coefficients that are weighted combinations of a small
number of mover/stayer cell means. The functions here fit that regression
with a rank-revealing solver and report the exact decompositions: the
two-treatment omega weighting, the four difference-in-differences form, and
the diagnostics that isolate non-causal terms when there are three or more
treatments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator

from .errors import (
    BadPeriodPair,
    MissingCell,
    NoMovers,
    NotBinary,
    RankDeficientDesign,
)
from .panel import classify_movers, first_difference


@dataclass(frozen=True)
class MoverRegressionFit:
    """OLS fit of outcome growth on treatment-indicator changes."""

    beta: np.ndarray          # (J-1,) coefficients for treatments 1..J-1
    tau: float                # intercept (common growth)
    gamma: np.ndarray | None  # covariate coefficients, if requested
    sigma2: float             # residual variance, RSS / (n - p)
    n_units: int
    columns: tuple


def pivoted_least_squares(design, y, labels):
    """Solve min ||design b - y|| by pivoted QR, rejecting rank deficiency.

    Raises
    ------
    RankDeficientDesign
        If the design is numerically column-rank-deficient; the message
        names the redundant columns instead of silently pseudo-inverting.
    """
    n, p = design.shape
    q, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(n, p) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int((diag > tol).sum())
    if rank < p:
        dropped = [labels[k] for k in piv[rank:]]
        raise RankDeficientDesign(
            f"design matrix has rank {rank} < {p}; redundant columns: {dropped}"
        )
    coef_piv = scipy.linalg.solve_triangular(r, q.T @ y)
    coef = np.empty(p)
    coef[piv] = coef_piv
    return coef


def _design_matrix(panel, include_stayers, covariates):
    fd = first_difference(panel, 0, 1)
    j = panel.n_treatments
    cols = [np.ones(panel.n_units)]
    labels = ["const"]
    for code in range(1, j):
        cols.append(fd.delta_d[:, code].astype(float))
        labels.append(f"dD{code}")
    n_cov = 0
    if covariates:
        for k, name in enumerate(panel.covariate_names):
            col = panel.covariates[:, k]
            if panel.covariate_kinds[k] == "continuous":
                cols.append(np.asarray(col, dtype=float))
                labels.append(name)
                n_cov += 1
            else:
                levels = np.unique(col)
                for lev in levels[1:]:  # first level absorbed by the intercept
                    cols.append((col == lev).astype(float))
                    labels.append(f"{name}={lev}")
                    n_cov += 1
    design = np.column_stack(cols)
    mask = np.ones(panel.n_units, dtype=bool)
    if not include_stayers:
        mask = fd.treatment_start != fd.treatment_end
    return design[mask], fd.dy[mask], labels, n_cov, fd


def fit_mover_regression(panel, include_stayers=True, covariates=False):
    """Fit outcome growth on treatment-indicator changes (two periods).

    Parameters
    ----------
    panel : PanelDataset
        Must have exactly two periods.
    include_stayers : bool
        If False the regression runs on movers only.
    covariates : bool
        If True, time-invariant covariates enter the differenced equation in
        levels (they shift trends; their within-unit difference is zero).

    Raises
    ------
    NoMovers, RankDeficientDesign
    """
    if panel.n_periods != 2:
        raise BadPeriodPair(
            f"mover regression needs a two-period panel, got T={panel.n_periods}"
        )
    design, y, labels, n_cov, fd = _design_matrix(panel, include_stayers, covariates)
    if not (fd.treatment_start != fd.treatment_end).any():
        raise NoMovers("no unit changes treatment between the two periods")
    coef = pivoted_least_squares(design, y, labels)
    resid = y - design @ coef
    n, p = design.shape
    sigma2 = float(resid @ resid / (n - p)) if n > p else float("nan")
    j = panel.n_treatments
    gamma = coef[j:] if n_cov else None
    return MoverRegressionFit(
        beta=coef[1:j].copy(),
        tau=float(coef[0]),
        gamma=gamma,
        sigma2=sigma2,
        n_units=n,
        columns=tuple(labels),
    )


class MoverRegression(BaseEstimator):
    """Estimator wrapper around :func:`fit_mover_regression`.

    Parameters mirror the function; after ``fit`` the coefficients are
    available as ``beta_``, ``tau_``, ``gamma_`` and the full result as
    ``fit_``.
    """

    def __init__(self, include_stayers=True, covariates=False):
        self.include_stayers = include_stayers
        self.covariates = covariates

    def fit(self, panel, y=None):
        result = fit_mover_regression(
            panel, include_stayers=self.include_stayers, covariates=self.covariates
        )
        self.fit_ = result
        self.beta_ = result.beta
        self.tau_ = result.tau
        self.gamma_ = result.gamma
        self.n_features_in_ = len(result.columns)
        return self

    def predict(self, panel):
        """Fitted growth for each unit of a two-period panel."""
        design, _, _, _, _ = _design_matrix(panel, True, self.covariates)
        coef = np.concatenate(
            [[self.tau_], self.beta_, self.gamma_ if self.gamma_ is not None else []]
        )
        return design @ coef


# ---------------------------------------------------------------------------
# two-treatment omega decomposition


@dataclass(frozen=True)
class Lemma1Decomposition:
    """The two-treatment coefficient as omega-weighted cell-mean contrasts.

    ``beta = omega * (d_in - d_stay) + (1 - omega) * (d_stay - d_out)`` where
    d_in / d_stay / d_out are mean outcome growth of joiners, stayers and
    leavers, and omega depends only on the joiner and leaver shares. With no
    stayers omega is exactly 1/2 and ``beta = (d_in - d_out) / 2``.
    """

    p_plus: float
    p_minus: float
    omega: float
    d_in: float
    d_stay: float
    d_out: float
    beta: float
    n_in: int
    n_stay: int
    n_out: int
    no_stayers: bool


def decompose_lemma1(panel):
    """Decompose the two-treatment mover coefficient into cell means.

    Requires J=2 and T=2. The reconstruction equals the OLS coefficient of
    the full-sample differenced regression exactly (same-sample algebra).

    Raises
    ------
    NotBinary, NoMovers, RankDeficientDesign
    """
    if panel.n_treatments != 2:
        raise NotBinary(f"decomposition needs J=2, got J={panel.n_treatments}")
    if panel.n_periods != 2:
        raise BadPeriodPair(f"decomposition needs T=2, got T={panel.n_periods}")
    fd = first_difference(panel, 0, 1)
    dd1 = fd.delta_d[:, 1]
    n = dd1.size
    n_in = int((dd1 == 1).sum())
    n_out = int((dd1 == -1).sum())
    n_stay = n - n_in - n_out
    if n_in + n_out == 0:
        raise NoMovers("no unit changes treatment between the two periods")
    p_plus = n_in / n
    p_minus = n_out / n
    # the omega denominator equals Var(dD1); zero variance means the
    # regression itself is infeasible
    denom = p_plus * (1 - p_plus) + p_minus * (1 - p_minus) + 2 * p_plus * p_minus
    if denom <= 0:
        raise RankDeficientDesign("treatment change has zero variance")
    omega = (p_plus * (1 - p_plus) + p_plus * p_minus) / denom

    d_in = float(fd.dy[dd1 == 1].mean()) if n_in else float("nan")
    d_out = float(fd.dy[dd1 == -1].mean()) if n_out else float("nan")
    d_stay = float(fd.dy[dd1 == 0].mean()) if n_stay else float("nan")
    no_stayers = n_stay == 0

    def wz(w, v):
        return 0.0 if w == 0.0 else w * v

    if no_stayers:
        beta = 0.5 * (d_in - d_out)  # omega = 1/2 and the stayer mean drops out
    else:
        beta = wz(omega, d_in - d_stay) + wz(1.0 - omega, d_stay - d_out)
    return Lemma1Decomposition(
        p_plus=p_plus,
        p_minus=p_minus,
        omega=float(omega),
        d_in=d_in,
        d_stay=d_stay,
        d_out=d_out,
        beta=float(beta),
        n_in=n_in,
        n_stay=n_stay,
        n_out=n_out,
        no_stayers=no_stayers,
    )


# ---------------------------------------------------------------------------
# four difference-in-differences decomposition


@dataclass(frozen=True)
class Prop1Cell:
    """One DiD contrast: value, weight, and the sizes of its two groups."""

    value: float
    weight: float
    n_mover: int
    n_stayer: int
    feasible: bool


@dataclass(frozen=True)
class Prop1Decomposition:
    """The two-treatment coefficient as four weighted DiD contrasts.

    Keys of ``cells`` are ``(t, d)``: the contrast estimating the period-t
    average effect for movers with treatment change d (+1 joiners, -1
    leavers). Weights are nonnegative and sum to one; the weighted sum
    reproduces the regression coefficient exactly. A panel without stayers
    takes the ``no_stayers`` branch where the coefficient is the plain
    half-difference of mover growth means, carrying two equivalent
    half-weight attributions (``matched_weights`` period-matched, ``crossed_weights``
    period-crossed).
    """

    branch: str                      # "general" or "no_stayers"
    p_stay0: float                   # share of stayers at treatment 0 (general)
    omega: float
    cells: dict
    beta: float
    d_in: float
    d_out: float
    matched_weights: dict | None = None
    crossed_weights: dict | None = None


def decompose_prop1(panel):
    """Express the two-treatment coefficient as four DiD contrasts.

    Raises
    ------
    NotBinary, NoMovers, MissingCell
        MissingCell fires only if a contrast with nonzero weight has an
        empty cell (cannot happen when weights come from the same sample).
    """
    if panel.n_treatments != 2:
        raise NotBinary(f"decomposition needs J=2, got J={panel.n_treatments}")
    if panel.n_periods != 2:
        raise BadPeriodPair(f"decomposition needs T=2, got T={panel.n_periods}")
    fd = first_difference(panel, 0, 1)
    dd1 = fd.delta_d[:, 1]
    stay0 = (dd1 == 0) & (fd.treatment_start == 0)
    stay1 = (dd1 == 0) & (fd.treatment_start == 1)
    n_in = int((dd1 == 1).sum())
    n_out = int((dd1 == -1).sum())
    n_s0 = int(stay0.sum())
    n_s1 = int(stay1.sum())
    if n_in + n_out == 0:
        raise NoMovers("no unit changes treatment between the two periods")
    d_in = float(fd.dy[dd1 == 1].mean()) if n_in else float("nan")
    d_out = float(fd.dy[dd1 == -1].mean()) if n_out else float("nan")

    if n_s0 + n_s1 == 0:
        beta = 0.5 * (d_in - d_out)
        half = {(1, +1): 0.5, (0, -1): 0.5}
        half_crossed = {(0, +1): 0.5, (1, -1): 0.5}
        cells = {
            (1, +1): Prop1Cell(d_in, 0.5, n_in, 0, n_in > 0),
            (0, -1): Prop1Cell(-d_out, 0.5, n_out, 0, n_out > 0),
        }
        return Prop1Decomposition(
            branch="no_stayers",
            p_stay0=float("nan"),
            omega=0.5,
            cells=cells,
            beta=float(beta),
            d_in=d_in,
            d_out=d_out,
            matched_weights=half,
            crossed_weights=half_crossed,
        )

    lemma = decompose_lemma1(panel)
    omega = lemma.omega
    p0 = n_s0 / (n_s0 + n_s1)
    g0 = float(fd.dy[stay0].mean()) if n_s0 else float("nan")
    g1 = float(fd.dy[stay1].mean()) if n_s1 else float("nan")

    spec = {
        (1, +1): (d_in, g0, p0 * omega, n_in, n_s0),
        (0, +1): (d_in, g1, (1 - p0) * omega, n_in, n_s1),
        (0, -1): (g0, d_out, p0 * (1 - omega), n_out, n_s0),
        (1, -1): (g1, d_out, (1 - p0) * (1 - omega), n_out, n_s1),
    }
    cells = {}
    beta = 0.0
    for key, (minuend, subtrahend, weight, nm, ns) in spec.items():
        feasible = nm > 0 and ns > 0
        value = minuend - subtrahend if feasible else float("nan")
        if weight > 0.0:
            if not feasible:
                raise MissingCell(
                    f"contrast for period {key[0]}, change {key[1]:+d} has weight "
                    f"{weight:.4f} but an empty cell (movers={nm}, stayers={ns})"
                )
            beta += weight * value
        cells[key] = Prop1Cell(value, float(weight), nm, ns, feasible)
    return Prop1Decomposition(
        branch="general",
        p_stay0=float(p0),
        omega=float(omega),
        cells=cells,
        beta=float(beta),
        d_in=d_in,
        d_out=d_out,
    )


# ---------------------------------------------------------------------------
# three-or-more treatment diagnostics


@dataclass(frozen=True)
class TwoLinkDecomposition:
    """Exact split of beta_2 in the one-path layout 0 -> 1 -> 2.

    When the only occupied cells are stayers at 0 and 1 plus movers 0->1 and
    1->2, the differenced OLS is saturated and
    ``beta2 = effect_t0_1v0 + effect_t1_2v1 + 2 * p_stay0 * stayer_gap``
    holds exactly; the last term is non-causal.
    """

    p_stay0: float
    effect_t0_1v0: float   # DiD analogue: movers 0->1 vs stayers at 1
    effect_t1_2v1: float   # DiD analogue: movers 1->2 vs stayers at 1
    stayer_gap: float      # growth of stayers at 1 minus stayers at 0
    noncausal: float       # 2 * p_stay0 * stayer_gap
    beta1: float
    beta2: float


@dataclass(frozen=True)
class Prop2Diagnostic:
    """Non-causality diagnostics for mover regressions with J >= 3.

    ``stayer_trend_gaps[(j, k)]`` is the growth-mean gap between stayers at
    j and k (zero for all pairs is necessary for a causal reading).
    ``chain_sum_gaps[(j, k, t, s, u)]`` is the DiD analogue of the period-
    (t, s, u) chain sum effect(j at t) + effect(k vs j at s) - effect(k at u),
    which is zero under homogeneous effects. Entries whose cells are empty
    are absent, not zero. ``two_link`` is filled only in the one-path layout.
    """

    fit: MoverRegressionFit
    stayer_trend_gaps: dict
    chain_sum_gaps: dict
    two_link: TwoLinkDecomposition | None
    cell_counts: dict


def diagnose_prop2(panel):
    """Compute non-causality diagnostics for a panel with J >= 3, T = 2."""
    if panel.n_treatments < 3:
        raise NotBinary(
            f"diagnostics need J>=3, got J={panel.n_treatments}; "
            "use the two-treatment decompositions instead"
        )
    if panel.n_periods != 2:
        raise BadPeriodPair(f"diagnostics need T=2, got T={panel.n_periods}")
    fit = fit_mover_regression(panel)
    fd = first_difference(panel, 0, 1)
    j_count = panel.n_treatments
    cls = classify_movers(panel)
    counts = cls.cell_counts

    g = {}
    for j in range(j_count):
        mask = (fd.treatment_start == j) & (fd.treatment_end == j)
        if mask.any():
            g[j] = float(fd.dy[mask].mean())
    m = {}
    for (o, d), _ in counts.items():
        if o != d:
            mask = (fd.treatment_start == o) & (fd.treatment_end == d)
            m[(o, d)] = float(fd.dy[mask].mean())

    stayer_trend_gaps = {}
    for j in range(j_count):
        for k in range(j + 1, j_count):
            if j in g and k in g:
                stayer_trend_gaps[(j, k)] = g[j] - g[k]

    def effect_vs_zero(j, t):
        # DiD analogue of the period-t effect of j vs 0 on the relevant movers
        if t == 1:
            if (0, j) in m and 0 in g:
                return m[(0, j)] - g[0]
        else:
            if j in g and (j, 0) in m:
                return g[j] - m[(j, 0)]
        return None

    def effect_step(j, k, s):
        # DiD analogue of the period-s effect of k vs j on the j->k movers
        if s == 1:
            if (j, k) in m and j in g:
                return m[(j, k)] - g[j]
        else:
            if k in g and (k, j) in m:
                return g[k] - m[(k, j)]
        return None

    chain_sum_gaps = {}
    for j in range(1, j_count):
        for k in range(1, j_count):
            if j == k:
                continue
            for t in (0, 1):
                a = effect_vs_zero(j, t)
                if a is None:
                    continue
                for s in (0, 1):
                    b = effect_step(j, k, s)
                    if b is None:
                        continue
                    for u in (0, 1):
                        c = effect_vs_zero(k, u)
                        if c is None:
                            continue
                        chain_sum_gaps[(j, k, t, s, u)] = a + b - c

    two_link = None
    layout = {(0, 0), (1, 1), (0, 1), (1, 2)}
    occupied = set(counts)
    if occupied <= layout and layout <= occupied:
        n_s0, n_s1 = counts[(0, 0)], counts[(1, 1)]
        p0 = n_s0 / (n_s0 + n_s1)
        gap = g[1] - g[0]
        eff01 = m[(0, 1)] - g[1]
        eff12 = m[(1, 2)] - g[1]
        noncausal = 2 * p0 * gap
        two_link = TwoLinkDecomposition(
            p_stay0=float(p0),
            effect_t0_1v0=float(eff01),
            effect_t1_2v1=float(eff12),
            stayer_gap=float(gap),
            noncausal=float(noncausal),
            beta1=float(p0 * (m[(0, 1)] - g[0]) + (1 - p0) * eff01),
            beta2=float(eff01 + eff12 + noncausal),
        )
    return Prop2Diagnostic(
        fit=fit,
        stayer_trend_gaps=stayer_trend_gaps,
        chain_sum_gaps=chain_sum_gaps,
        two_link=two_link,
        cell_counts=dict(counts),
    )
