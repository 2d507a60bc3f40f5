"""Weighting estimators for mover average treatment effects.

Each link (a, b) of a chain contributes a per-unit weight built from
treatment-cell indicators and first-step scores. Averaging the weighted
outcome difference over units recovers, link by link, the effect of b versus
a among movers, and the chain telescopes to the target-versus-reference
effect. Two weight families are implemented:

* rho weights compare stayers at one end of a link with movers between its
  ends; a single target period is estimated. Targeting the earlier period
  of the pair additionally relies on outcome impersistence, which callers
  must acknowledge explicitly.
* kappa weights use movers in both directions and identify the two-period
  average effect; they never need stayers.

With two treatments, a data-driven per-unit mixing weight makes the rho
estimator valid without any effect-homogeneity condition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .chains import Chain, build_support_graph, chain_from_treatments, enumerate_chains
from .errors import (
    AssumptionNotAcknowledged,
    BadPeriodPair,
    DegenerateDenominator,
    MatekitError,
    NoMovers,
    NotBinary,
)
from .panel import check_period_pair, check_treatment
from .propensity import CellMeansPropensity, MultinomialLogitPropensity

TINY = 1e-12


@dataclass(frozen=True)
class RhoWeight:
    """Per-unit rho weights for one link and period orientation."""

    link: tuple
    base: int
    target: int
    values: np.ndarray
    stay_score: np.ndarray
    move_score: np.ndarray
    ratio: np.ndarray


@dataclass(frozen=True)
class KappaWeight:
    """Per-unit kappa weights for one link over an ordered period pair."""

    link: tuple
    period_pair: tuple
    values: np.ndarray
    forward_score: np.ndarray
    reverse_score: np.ndarray
    ratio: np.ndarray


@dataclass(frozen=True)
class MateEstimate:
    """A point estimate with its estimand label and provenance.

    ``estimand`` is "mate" (single period, in ``periods[0]``) or "half_sum"
    (the unweighted average of the two period effects in ``periods``; no
    single-period reading exists for it).
    """

    method: str
    estimand: str
    target: int
    periods: tuple
    point: float
    se: float | None
    se_method: str | None
    chain: tuple
    link_modes: tuple
    link_weights: tuple | str
    n_units: int
    n_retained: int
    n_effective: int
    assumptions: dict
    diagnostics: dict


# ---------------------------------------------------------------------------
# per-unit weight construction


def _rho_terms(treat, view, a, b, base, target, threshold, needed=None):
    """Raw rho values (without the mover ratio) and below-threshold flags.

    ``needed`` marks units whose estimator actually uses this direction;
    scores are only required (and trim flags only raised) for them.
    """
    n = treat.shape[0]
    j_s = treat[:, base]
    j_t = treat[:, target]
    e_stay = view.pair_prob(a, base, a, target)
    e_move = view.pair_prob(a, base, b, target)
    stay = (j_s == a) & (j_t == a)
    move = (j_s == a) & (j_t == b)
    part = stay | move
    active = part if needed is None else part & needed
    if np.any(active & ((e_stay <= TINY) | (e_move <= TINY))):
        raise DegenerateDenominator(
            f"zero score in the denominator of rho({a},{b}) for a participating unit"
        )
    sign = -1.0 if target > base else 1.0
    num = stay * e_move - move * e_stay
    vals = np.zeros(n)
    np.divide(num, e_stay * e_move, out=vals, where=active)
    vals *= sign
    below = (e_stay < threshold) | (e_move < threshold)
    if needed is not None:
        below &= needed
    return vals, below, e_stay, e_move


def _rho_link(treat, view, a, b, base, target, w, threshold):
    """Mixed two-direction rho weight for a link; w is scalar or per-unit."""
    n = treat.shape[0]
    w = np.asarray(w, dtype=float)
    need_f = np.broadcast_to(w > 0, (n,))
    need_r = np.broadcast_to(w < 1, (n,))
    v_f, below_f, _, _ = _rho_terms(treat, view, a, b, base, target, threshold, need_f)
    v_r, below_r, _, _ = _rho_terms(treat, view, b, a, base, target, threshold, need_r)
    vals = w * v_f - (1.0 - w) * v_r
    flagged = below_f | below_r
    return vals, flagged


def _kappa_link(treat, view, a, b, p, q, threshold):
    """Averaged-period kappa weight for a link over periods p < q."""
    j_p = treat[:, p]
    j_q = treat[:, q]
    e_f = view.pair_prob(a, p, b, q)
    e_r = view.pair_prob(b, p, a, q)
    fwd = (j_p == a) & (j_q == b)
    rev = (j_p == b) & (j_q == a)
    if np.any((fwd & (e_f <= TINY)) | (rev & (e_r <= TINY))):
        raise DegenerateDenominator(
            f"zero score in the denominator of kappa({a},{b}) for a participating unit"
        )
    n = treat.shape[0]
    vals = np.zeros(n)
    np.divide(fwd.astype(float), e_f, out=vals, where=fwd)
    tmp = np.zeros(n)
    np.divide(rev.astype(float), e_r, out=tmp, where=rev)
    vals = 0.5 * (vals - tmp)
    flagged = (e_f < threshold) | (e_r < threshold)
    return vals, flagged


def _chain_weights(treat, view, links, link_ws, base, target, kind, threshold):
    """Total per-unit chain weight (ratio factor not yet applied)."""
    n = treat.shape[0]
    total = np.zeros(n)
    flagged = np.zeros(n, dtype=bool)
    for (a, b), w in zip(links, link_ws):
        if kind == "kappa":
            p, q = (base, target) if base < target else (target, base)
            vals, flags = _kappa_link(treat, view, a, b, p, q, threshold)
        else:
            vals, flags = _rho_link(treat, view, a, b, base, target, w, threshold)
        total += vals
        flagged |= flags
    return total, flagged


def _movers(treat):
    return (treat[:, 1:] != treat[:, :-1]).any(axis=1)


def chain_formula_value(dy, treat, view, links, link_ws, base, target, kind,
                        sample_weights=None, corollary=False):
    """Evaluate the chain estimator on (possibly mass-weighted) samples.

    With unit masses summing over an enumerated population and exact scores
    in ``view``, this returns the population value of the identification
    formula. No trimming or standard errors are applied.
    """
    treat = np.asarray(treat)
    dy = np.asarray(dy, dtype=float)
    n = treat.shape[0]
    w_s = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=float)
    if corollary:
        link_ws = [_corollary_wstar(view, base, target)]
    total, _ = _chain_weights(treat, view, links, link_ws, base, target, kind, 0.0)
    mover = _movers(treat)
    marginal = float((w_s * mover).sum() / w_s.sum())
    if marginal <= 0:
        raise NoMovers("population has no movers")
    ratio = view.mover_prob() / marginal
    return float((w_s * dy * total * ratio).sum() / w_s.sum())


def _corollary_wstar(view, base, target):
    e01 = view.pair_prob(0, base, 1, target)
    mv = view.mover_prob()
    return np.divide(e01, mv, out=np.zeros_like(mv), where=mv > 0)


# ---------------------------------------------------------------------------
# shared estimation driver


def _single_estimate(panel, model, links, link_ws, base, target, kind, corollary):
    view = model.score_view(panel)
    treat = panel.treatments
    lo, hi = (base, target) if base < target else (target, base)
    dy = panel.outcomes[:, hi] - panel.outcomes[:, lo]
    threshold = float(getattr(model, "trim", 0.0))
    ws = [_corollary_wstar(view, base, target)] if corollary else link_ws
    total, flagged = _chain_weights(treat, view, links, ws, base, target, kind, threshold)
    retained = ~flagged
    mover = _movers(treat)
    n_ret = int(retained.sum())
    if n_ret == 0:
        raise NoMovers("trimming removed every unit")
    marginal = float(mover[retained].mean())
    if marginal <= 0:
        raise NoMovers("no movers among retained units")
    ratio = view.mover_prob() / marginal
    contrib = dy * total * ratio
    point = float(contrib[retained].mean())
    return point, contrib, retained, marginal, total * ratio


def _bootstrap_se(panel, model, links, link_ws, base, target, kind, corollary,
                  n_bootstrap, seed):
    points = []
    failures = 0
    n = panel.n_units
    for r in range(n_bootstrap):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(r,)))
        idx = rng.integers(0, n, n)
        try:
            resample = panel.take(idx)
            refit = model.refit(resample)
            pt, *_ = _single_estimate(
                resample, refit, links, link_ws, base, target, kind, corollary
            )
            points.append(pt)
        except MatekitError:
            failures += 1
    se = float(np.std(points, ddof=1)) if len(points) > 1 else None
    return se, failures, len(points)


def _run(panel, model, chain, base, target, kind, corollary, method, estimand,
         periods, link_weights, se_method, n_bootstrap, seed, extra_flags):
    links = chain.links
    if link_weights is not None and not corollary:
        link_weights = tuple(float(w) for w in link_weights)
        if len(link_weights) != len(links):
            raise ValueError(
                f"need {len(links)} link weights for chain {chain.treatments}"
            )
        for w, mode in zip(link_weights, chain.modes):
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"link weights must be in [0, 1], got {w}")
            if w > 0 and mode == "reverse":
                raise MatekitError(
                    f"forward direction infeasible on a link of {chain.treatments} "
                    f"but weight {w} > 0 was requested"
                )
            if w < 1 and mode == "forward":
                raise MatekitError(
                    f"reverse direction infeasible on a link of {chain.treatments} "
                    f"but weight {w} < 1 was requested"
                )
        ws = link_weights
    else:
        ws = chain.link_weights
    point, contrib, retained, marginal, unit_w = _single_estimate(
        panel, model, links, ws, base, target, kind, corollary
    )
    se = None
    diagnostics = {
        "marginal_mover_share": marginal,
        "trim_threshold": float(getattr(model, "trim", 0.0)),
    }
    if se_method == "plugin":
        z = contrib[retained]
        se = float(z.std(ddof=1) / math.sqrt(z.size)) if z.size > 1 else None
    elif se_method == "bootstrap":
        se, failures, done = _bootstrap_se(
            panel, model, links, ws, base, target, kind, corollary, n_bootstrap, seed
        )
        diagnostics["bootstrap_replicates"] = done
        diagnostics["bootstrap_failures"] = failures
    elif se_method not in (None, "none"):
        raise ValueError(f"unknown se_method {se_method!r}")
    assumptions = {
        "parallel_trends": True,
        "effect_homogeneity": not corollary,
        "impersistence": kind == "kappa" or (kind == "rho" and target < base),
        "mover_definition": "any_move",
    }
    assumptions.update(extra_flags)
    return MateEstimate(
        method=method,
        estimand=estimand,
        target=chain.target,
        periods=periods,
        point=point,
        se=se,
        se_method=se_method if se_method not in (None, "none") else None,
        chain=chain.treatments,
        link_modes=chain.modes,
        link_weights="per_unit_wstar" if corollary else tuple(ws),
        n_units=panel.n_units,
        n_retained=int(retained.sum()),
        n_effective=int((retained & (unit_w != 0)).sum()),
        assumptions=assumptions,
        diagnostics=diagnostics,
    )


def _resolve_chain(panel, model, chain, mode, period, period_pair):
    graph = build_support_graph(panel, model, period_pair)
    if isinstance(chain, Chain):
        chain = chain.treatments
    return chain_from_treatments(graph, chain, mode=mode, period=period), graph


# ---------------------------------------------------------------------------
# public estimators


def estimate_mate_prop3(panel, model, chain, t=1, *, link_weights=None,
                        assume_impersistence=False, se_method="bootstrap",
                        n_bootstrap=500, seed=0):
    """Single-period mover effect of the chain's target via rho weights.

    ``t`` is the target period of a two-period panel. ``t=0`` relies on
    outcome impersistence and must be acknowledged with
    ``assume_impersistence=True``.
    """
    if panel.n_periods != 2:
        raise BadPeriodPair("two-period estimator; use estimate_mate_multiperiod")
    if t not in (0, 1):
        raise BadPeriodPair(f"target period must be 0 or 1, got {t}")
    if t == 0 and not assume_impersistence:
        raise AssumptionNotAcknowledged(
            "estimating the earlier period requires outcome impersistence; "
            "pass assume_impersistence=True to acknowledge it"
        )
    chain, _ = _resolve_chain(panel, model, chain, "prop3", t, (0, 1))
    return _run(
        panel, model, chain, base=1 - t, target=t, kind="rho", corollary=False,
        method="prop3", estimand="mate", periods=(t,), link_weights=link_weights,
        se_method=se_method, n_bootstrap=n_bootstrap, seed=seed,
        extra_flags={"impersistence_acknowledged": bool(assume_impersistence)},
    )


def estimate_mate_corollary(panel, model, t=1, *, assume_impersistence=False,
                            se_method="bootstrap", n_bootstrap=500, seed=0):
    """Two-treatment mover effect with the data-driven per-unit mix.

    Valid without effect homogeneity; requires J=2.
    """
    if panel.n_treatments != 2:
        raise NotBinary(f"corollary weighting needs J=2, got J={panel.n_treatments}")
    if panel.n_periods != 2:
        raise BadPeriodPair("two-period estimator; use estimate_mate_multiperiod")
    if t not in (0, 1):
        raise BadPeriodPair(f"target period must be 0 or 1, got {t}")
    if t == 0 and not assume_impersistence:
        raise AssumptionNotAcknowledged(
            "estimating the earlier period requires outcome impersistence; "
            "pass assume_impersistence=True to acknowledge it"
        )
    chain, _ = _resolve_chain(panel, model, (0, 1), "prop3", t, (0, 1))
    return _run(
        panel, model, chain, base=1 - t, target=t, kind="rho", corollary=True,
        method="prop3_corollary", estimand="mate", periods=(t,), link_weights=None,
        se_method=se_method, n_bootstrap=n_bootstrap, seed=seed,
        extra_flags={"impersistence_acknowledged": bool(assume_impersistence)},
    )


def estimate_mate_prop4(panel, model, chain, *, se_method="bootstrap",
                        n_bootstrap=500, seed=0):
    """Two-period average mover effect of the chain's target via kappa weights.

    The estimand is (effect in period 0 + effect in period 1) / 2; the
    result is labeled ``half_sum`` and has no single-period reading.
    """
    if panel.n_periods != 2:
        raise BadPeriodPair("two-period estimator; use estimate_mate_multiperiod")
    chain, _ = _resolve_chain(panel, model, chain, "prop4", None, (0, 1))
    return _run(
        panel, model, chain, base=0, target=1, kind="kappa", corollary=False,
        method="prop4", estimand="half_sum", periods=(0, 1), link_weights=None,
        se_method=se_method, n_bootstrap=n_bootstrap, seed=seed, extra_flags={},
    )


def estimate_mate_multiperiod(panel, model, chain, s, t, mode="prop3prime", *,
                              link_weights=None, assume_impersistence=False,
                              se_method="bootstrap", n_bootstrap=500, seed=0):
    """Estimators over an arbitrary period pair of a longer panel.

    ``prop3prime`` targets period ``t`` using base period ``s``; targeting
    the earlier period of the pair requires ``assume_impersistence=True``.
    ``prop4prime`` estimates the average effect over the (unordered) pair.
    On a two-period panel with (s, t) = (0, 1) both reduce exactly to the
    two-period estimators.
    """
    check_period_pair(panel, min(s, t), max(s, t), ordered=True)
    p, q = (s, t) if s < t else (t, s)
    if mode == "prop3prime":
        if t < s and not assume_impersistence:
            raise AssumptionNotAcknowledged(
                "targeting the earlier period of the pair requires outcome "
                "impersistence; pass assume_impersistence=True to acknowledge it"
            )
        chain, _ = _resolve_chain(panel, model, chain, "prop3", t, (p, q))
        return _run(
            panel, model, chain, base=s, target=t, kind="rho", corollary=False,
            method="prop3prime", estimand="mate", periods=(t,),
            link_weights=link_weights, se_method=se_method,
            n_bootstrap=n_bootstrap, seed=seed,
            extra_flags={
                "impersistence_acknowledged": bool(assume_impersistence),
                "period_pair": (int(s), int(t)),
            },
        )
    if mode == "prop4prime":
        chain, _ = _resolve_chain(panel, model, chain, "prop4", None, (p, q))
        return _run(
            panel, model, chain, base=p, target=q, kind="kappa", corollary=False,
            method="prop4prime", estimand="half_sum", periods=(p, q),
            link_weights=None, se_method=se_method, n_bootstrap=n_bootstrap,
            seed=seed, extra_flags={"period_pair": (int(p), int(q))},
        )
    raise ValueError(f"mode must be 'prop3prime' or 'prop4prime', got {mode!r}")


# ---------------------------------------------------------------------------
# standalone weight inspectors


def compute_rho_weights(panel, model, link, t=1, s=None):
    """Per-unit rho weights (ratio included) for one link of a panel."""
    a, b = link
    check_treatment(panel, a)
    check_treatment(panel, b)
    if s is None:
        if panel.n_periods != 2:
            raise BadPeriodPair("pass the base period s explicitly when T > 2")
        s = 1 - t
    check_period_pair(panel, min(s, t), max(s, t), ordered=True)
    view = model.score_view(panel)
    vals, _, e_stay, e_move = _rho_terms(
        panel.treatments, view, a, b, s, t, float(getattr(model, "trim", 0.0))
    )
    mover = _movers(panel.treatments)
    if not mover.any():
        raise NoMovers("no unit changes treatment")
    ratio = view.mover_prob() / mover.mean()
    return RhoWeight(
        link=(int(a), int(b)),
        base=int(s),
        target=int(t),
        values=vals * ratio,
        stay_score=e_stay,
        move_score=e_move,
        ratio=ratio,
    )


def compute_kappa_weights(panel, model, link, period_pair=(0, 1)):
    """Per-unit kappa weights (ratio included) for one link of a panel."""
    a, b = link
    check_treatment(panel, a)
    check_treatment(panel, b)
    p, q = period_pair
    check_period_pair(panel, p, q, ordered=True)
    view = model.score_view(panel)
    vals, _ = _kappa_link(
        panel.treatments, view, a, b, p, q, float(getattr(model, "trim", 0.0))
    )
    e_f = view.pair_prob(a, p, b, q)
    e_r = view.pair_prob(b, p, a, q)
    mover = _movers(panel.treatments)
    if not mover.any():
        raise NoMovers("no unit changes treatment")
    ratio = view.mover_prob() / mover.mean()
    return KappaWeight(
        link=(int(a), int(b)),
        period_pair=(int(p), int(q)),
        values=vals * ratio,
        forward_score=e_f,
        reverse_score=e_r,
        ratio=ratio,
    )


# ---------------------------------------------------------------------------
# high-level estimator


class MateEstimator(BaseEstimator):
    """Panel-in, estimate-out wrapper choosing model, chain, and method.

    Parameters
    ----------
    target : int
        Treatment whose effect against the reference is wanted.
    method : str
        "auto" (corollary when J=2, otherwise rho weighting), "prop3",
        "corollary", "prop4", "prop3prime", "prop4prime".
    period : int or "avg"
        Target period; "avg" switches to the averaged (kappa) estimand.
    period_pair : (int, int), optional
        Periods used on longer panels (primed methods).
    chain : "auto" or sequence of int
        "auto" picks the shortest feasible chain.
    propensity : "cell_means", "multinomial_logit", or a fitted model
    strata, features : column selections for the first step
    trim_threshold : float
        Score threshold applied to every denominator (default 0.01).
    se_method : "bootstrap", "plugin", or None
    """

    def __init__(self, target=1, method="auto", period=1, period_pair=None,
                 chain="auto", link_weights=None, propensity="cell_means",
                 strata=None, features=None, trim_threshold=0.01,
                 assume_impersistence=False, se_method="bootstrap",
                 n_bootstrap=500, random_state=0):
        self.target = target
        self.method = method
        self.period = period
        self.period_pair = period_pair
        self.chain = chain
        self.link_weights = link_weights
        self.propensity = propensity
        self.strata = strata
        self.features = features
        self.trim_threshold = trim_threshold
        self.assume_impersistence = assume_impersistence
        self.se_method = se_method
        self.n_bootstrap = n_bootstrap
        self.random_state = random_state

    def _build_model(self, panel):
        if self.propensity == "cell_means":
            model = CellMeansPropensity(strata=self.strata, trim=self.trim_threshold)
            return model.fit(panel)
        if self.propensity == "multinomial_logit":
            model = MultinomialLogitPropensity(
                features=self.features, trim=self.trim_threshold
            )
            return model.fit(panel)
        model = self.propensity
        if getattr(model, "trim", 0.0) == 0.0 and self.trim_threshold:
            model = model.with_trim(self.trim_threshold)
        return model

    def _resolve_method(self, panel):
        method = self.method
        avg = self.period == "avg"
        multi = self.period_pair is not None and tuple(self.period_pair) != (0, 1)
        if method == "auto":
            if avg:
                method = "prop4prime" if multi else "prop4"
            elif multi:
                method = "prop3prime"
            elif panel.n_treatments == 2:
                method = "corollary"
            else:
                method = "prop3"
        return method

    def fit(self, panel, y=None):
        check_treatment(panel, self.target)
        model = self._build_model(panel)
        method = self._resolve_method(panel)
        se_kwargs = dict(
            se_method=self.se_method,
            n_bootstrap=self.n_bootstrap,
            seed=self.random_state,
        )
        if method in ("prop3", "prop4", "corollary"):
            pair = (0, 1)
        else:
            pair = tuple(self.period_pair) if self.period_pair is not None else (0, 1)
        if method in ("prop4", "prop4prime"):
            mode, period = "prop4", None
        else:
            period = pair[1] if self.period in ("avg", None) else int(self.period)
            mode = "prop3"
        graph = build_support_graph(panel, model, (min(pair), max(pair)))
        if isinstance(self.chain, str) and self.chain == "auto":
            if method == "corollary":
                chain = chain_from_treatments(graph, (0, 1), mode="prop3", period=period)
            else:
                chain = enumerate_chains(graph, self.target, mode=mode, period=period)[0]
        else:
            chain = chain_from_treatments(graph, self.chain, mode=mode, period=period)

        if method == "prop3":
            est = estimate_mate_prop3(
                panel, model, chain, t=period,
                link_weights=self.link_weights,
                assume_impersistence=self.assume_impersistence, **se_kwargs,
            )
        elif method == "corollary":
            est = estimate_mate_corollary(
                panel, model, t=period,
                assume_impersistence=self.assume_impersistence, **se_kwargs,
            )
        elif method == "prop4":
            est = estimate_mate_prop4(panel, model, chain, **se_kwargs)
        elif method == "prop3prime":
            s, t = pair
            if self.period not in ("avg", None) and int(self.period) == s:
                s, t = t, s
            est = estimate_mate_multiperiod(
                panel, model, chain, s, t, mode="prop3prime",
                link_weights=self.link_weights,
                assume_impersistence=self.assume_impersistence, **se_kwargs,
            )
        elif method == "prop4prime":
            est = estimate_mate_multiperiod(
                panel, model, chain, pair[0], pair[1], mode="prop4prime", **se_kwargs
            )
        else:
            raise ValueError(f"unknown method {method!r}")
        self.model_ = model
        self.graph_ = graph
        self.chain_ = est.chain
        self.estimate_ = est
        self.point_ = est.point
        self.se_ = est.se
        return self
