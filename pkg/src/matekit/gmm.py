"""Stacking chain moments and combining routes efficiently.

Every feasible chain, with a direction choice for each of its links,
gives one "route" estimate of the same target effect: a 0/1-selected sum
of per-link moments E[dY * weight]. Stacking the distinct moments into a
vector M with selection matrix S, the generalized-least-squares
combination of the route estimates is the efficient point estimate, and
the dispersion of routes around it is an omnibus specification statistic,
asymptotically chi-squared with (routes - 1) degrees of freedom when the
identifying conditions hold.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import stats

from .chains import Chain, build_support_graph, chain_from_treatments
from .errors import (
    InfeasibleChain,
    MatekitError,
    NoFeasibleChain,
    NoMovers,
    RouteExplosion,
    SameRoute,
    SingularSystem,
)
from .mate import _kappa_link, _movers, _rho_terms

ROUTE_CAP = 64
COND_LIMIT = 1e10
EIG_FLOOR = 1e-12


@dataclass(frozen=True)
class MomentSystem:
    """Deduplicated moments, route selection, and their sampling variance.

    ``omega`` estimates Var(sqrt(N) * M̂) with N the retained sample size;
    each row of ``s_matrix`` sums moments into one route estimate of the
    target.
    """

    labels: tuple
    m_hat: np.ndarray
    omega: np.ndarray
    s_matrix: np.ndarray
    routes: tuple
    target: int
    estimand: str
    periods: tuple
    n_units: int
    n_retained: int
    omega_method: str
    diagnostics: dict


@dataclass(frozen=True)
class EfficientEstimate:
    """GLS combination of route estimates with its specification test."""

    beta_star: float
    se: float
    route_weights: np.ndarray
    route_estimates: np.ndarray
    t_stat: float
    dof: int
    p_value: float
    fallback: bool
    condition_number: float


class PairwiseTest(NamedTuple):
    difference: float
    se: float
    p_value: float


def _direction_options(mode):
    if mode == "both":
        return ("fwd", "rev")
    if mode == "forward":
        return ("fwd",)
    if mode == "reverse":
        return ("rev",)
    raise MatekitError(f"link without a feasible direction reached routing: {mode}")


def _resolve_chains(graph, chains, mode, period, target):
    resolved = []
    for chain in chains:
        seq = chain.treatments if isinstance(chain, Chain) else tuple(chain)
        if seq[0] != 0 or seq[-1] != target:
            raise InfeasibleChain(
                f"chain {seq} does not run from the reference to target {target}"
            )
        resolved.append(chain_from_treatments(graph, seq, mode=mode, period=period))
    resolved.sort(key=lambda c: (len(c.treatments), c.treatments))
    return resolved


def _moment_values(panel, model, labels):
    """Per-unit moment contributions and the common retained sample."""
    view = model.score_view(panel)
    treat = panel.treatments
    threshold = float(getattr(model, "trim", 0.0))
    n = panel.n_units
    raw = np.empty((n, len(labels)))
    flagged = np.zeros(n, dtype=bool)
    pair_dys = {}
    for k, lab in enumerate(labels):
        if lab[0] == "rho":
            _, a, b, direction, base, target = lab
            if direction == "fwd":
                v, below, _, _ = _rho_terms(treat, view, a, b, base, target, threshold)
            else:
                v, below, _, _ = _rho_terms(treat, view, b, a, base, target, threshold)
                v = -v
            pair = (min(base, target), max(base, target))
        else:
            _, a, b, p, q = lab
            v, below = _kappa_link(treat, view, a, b, p, q, threshold)
            pair = (p, q)
        if pair not in pair_dys:
            pair_dys[pair] = panel.outcomes[:, pair[1]] - panel.outcomes[:, pair[0]]
        raw[:, k] = pair_dys[pair] * v
        flagged |= below
    retained = ~flagged
    if not retained.any():
        raise NoMovers("trimming removed every unit")
    mover = _movers(treat)
    marginal = float(mover[retained].mean())
    if marginal <= 0:
        raise NoMovers("no movers among retained units")
    ratio = view.mover_prob() / marginal
    z = raw * ratio[:, None]
    return z[retained], retained, marginal


def build_moment_system(panel, model, chains, target, estimand="mate", *,
                        period=None, period_pair=(0, 1), omega_method="influence",
                        route_cap=ROUTE_CAP, n_bootstrap=200, seed=0):
    """Stack the moments of a set of chains into one estimating system.

    ``estimand`` "mate" stacks directed rho moments for a single target
    period (default: the later period of the pair); "half_sum" stacks
    kappa moments for the period-pair average. Routes enumerate every
    (chain, per-link direction) combination, shorter chains first, up to
    ``route_cap``.
    """
    if not chains:
        raise NoFeasibleChain("no chains supplied")
    p_lo, p_hi = min(period_pair), max(period_pair)
    graph = build_support_graph(panel, model, (p_lo, p_hi))
    if estimand == "mate":
        t = p_hi if period is None else int(period)
        s = p_lo if t == p_hi else p_hi
        resolved = _resolve_chains(graph, chains, "prop3", t, target)
    elif estimand == "half_sum":
        t, s = p_hi, p_lo
        resolved = _resolve_chains(graph, chains, "prop4", None, target)
    else:
        raise ValueError(f"estimand must be 'mate' or 'half_sum', got {estimand!r}")

    routes = []
    for chain in resolved:
        if estimand == "half_sum":
            combos = [("kappa",) * len(chain.links)]
        else:
            combos = list(itertools.product(
                *[_direction_options(m) for m in chain.modes]
            ))
        for directions in combos:
            routes.append((chain, tuple(directions)))
            if len(routes) > route_cap:
                raise RouteExplosion(
                    f"more than {route_cap} route combinations; raise the cap "
                    "or restrict the chain set"
                )

    labels = []
    rows = []
    for chain, directions in routes:
        row = []
        for (a, b), direction in zip(chain.links, directions):
            if estimand == "half_sum":
                lab = ("kappa", a, b, p_lo, p_hi)
            else:
                lab = ("rho", a, b, direction, s, t)
            if lab not in labels:
                labels.append(lab)
            row.append(labels.index(lab))
        rows.append(row)
    k_count = len(labels)
    s_matrix = np.zeros((len(routes), k_count))
    for p, row in enumerate(rows):
        for k in row:
            s_matrix[p, k] = 1.0

    z, retained, marginal = _moment_values(panel, model, labels)
    n_ret = z.shape[0]
    m_hat = z.mean(axis=0)
    diagnostics = {"marginal_mover_share": marginal,
                   "trim_threshold": float(getattr(model, "trim", 0.0))}
    if omega_method == "influence":
        centered = z - m_hat
        omega = centered.T @ centered / max(n_ret - 1, 1)
    elif omega_method == "bootstrap":
        means = []
        failures = 0
        for r in range(int(n_bootstrap)):
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=int(seed), spawn_key=(r,))
            )
            idx = rng.integers(0, panel.n_units, panel.n_units)
            try:
                resample = panel.take(idx)
                refit = model.refit(resample)
                zb, _, _ = _moment_values(resample, refit, labels)
                means.append(zb.mean(axis=0))
            except MatekitError:
                failures += 1
        if len(means) < 2:
            raise SingularSystem("bootstrap produced fewer than 2 usable replicates")
        boot = np.asarray(means)
        centered = boot - boot.mean(axis=0)
        omega = n_ret * (centered.T @ centered) / (boot.shape[0] - 1)
        diagnostics["bootstrap_replicates"] = len(means)
        diagnostics["bootstrap_failures"] = failures
    else:
        raise ValueError(f"omega_method must be 'influence' or 'bootstrap', got {omega_method!r}")

    route_desc = tuple(
        {"chain": chain.treatments, "directions": directions}
        for chain, directions in routes
    )
    return MomentSystem(
        labels=tuple(labels),
        m_hat=m_hat,
        omega=omega,
        s_matrix=s_matrix,
        routes=route_desc,
        target=int(target),
        estimand=estimand,
        periods=(t,) if estimand == "mate" else (p_lo, p_hi),
        n_units=panel.n_units,
        n_retained=n_ret,
        omega_method=omega_method,
        diagnostics=diagnostics,
    )


def _truncated_inverse(mat):
    vals, vecs = np.linalg.eigh(mat)
    cutoff = vals.max() * EIG_FLOOR if vals.size else 0.0
    keep = vals > max(cutoff, 0.0)
    rank = int(keep.sum())
    if rank == 0:
        raise SingularSystem("route covariance has rank 0 after truncation")
    inv = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T
    return inv, rank


def efficient_estimate(system):
    """Combine route estimates with GLS weights and test their equality.

    The weights minimize the asymptotic variance among affine
    combinations of the route estimates; the statistic is the weighted
    dispersion of the routes around the combination, with one degree of
    freedom fewer than the number of (effective) routes.
    """
    s = system.s_matrix
    p_count = s.shape[0]
    route_est = s @ system.m_hat
    sos = s @ system.omega @ s.T
    n = system.n_retained
    ones = np.ones(p_count)
    cond = float(np.linalg.cond(sos)) if np.all(np.isfinite(sos)) else float("inf")
    fallback = False
    if p_count == 1:
        var = float(sos[0, 0])
        if var <= 0:
            raise SingularSystem("single route with nonpositive variance")
        return EfficientEstimate(
            beta_star=float(route_est[0]),
            se=math.sqrt(var / n),
            route_weights=np.ones(1),
            route_estimates=route_est,
            t_stat=0.0,
            dof=0,
            p_value=1.0,
            fallback=False,
            condition_number=cond,
        )
    if not math.isfinite(cond) or cond > COND_LIMIT:
        a_mat, rank = _truncated_inverse(sos)
        fallback = True
        dof = rank - 1
    else:
        a_mat = np.linalg.inv(sos)
        dof = p_count - 1
    denom = float(ones @ a_mat @ ones)
    if denom <= 0:
        raise SingularSystem("route weights are undefined (nonpositive normalizer)")
    weights = (a_mat @ ones) / denom
    beta = float(weights @ route_est)
    se = math.sqrt((1.0 / denom) / n)
    resid = beta * ones - route_est
    t_stat = float(max(n * resid @ a_mat @ resid, 0.0))
    p_value = float(stats.chi2.sf(t_stat, dof)) if dof >= 1 else 1.0
    return EfficientEstimate(
        beta_star=beta,
        se=se,
        route_weights=weights,
        route_estimates=route_est,
        t_stat=t_stat,
        dof=dof,
        p_value=p_value,
        fallback=fallback,
        condition_number=cond,
    )


def specification_test_pairwise(system, p1, p2):
    """Wald test that two routes estimate the same quantity."""
    p_count = system.s_matrix.shape[0]
    for p in (p1, p2):
        if not 0 <= p < p_count:
            raise ValueError(f"route index {p} out of range for P={p_count}")
    if p1 == p2 or np.array_equal(system.s_matrix[p1], system.s_matrix[p2]):
        raise SameRoute(f"routes {p1} and {p2} select identical moments")
    contrast = system.s_matrix[p1] - system.s_matrix[p2]
    diff = float(contrast @ system.m_hat)
    var = float(contrast @ system.omega @ contrast) / system.n_retained
    if var <= 0:
        raise SingularSystem("zero variance for the route difference")
    se = math.sqrt(var)
    z = diff / se
    return PairwiseTest(difference=diff, se=se, p_value=float(2 * stats.norm.sf(abs(z))))
