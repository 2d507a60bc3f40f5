"""Synthetic panels with exactly enumerable population truths.

The data generating process is additively separable with an optional
carryover term:

    Y_it = alpha_i + beta[J_it, t, x_i] + carryover[J_i,t-1, J_it, x_i]
           + mover_shift * 1[mover] * 1[t = 1] + eps_it,

where treatment paths are drawn from an explicit transition table that may
condition on the covariate and on a quantile bin of alpha_i (selection on
the fixed effect). Because alpha_i differences out of every estimand
handled here, population values are exact sums over the finite
(covariate, path) support, which the oracle enumerates twice with
independent code paths as a self-check.

Knobs and the conditions they break:

* ``eps_mover_shift`` adds a period-1 level shift for movers, violating
  parallel trends.
* ``carryover`` depending on its first index violates the
  no-carryover condition; the past-only form carryover[k, j, x] = f(k, x)
  leaves two-period parallel trends and effect homogeneity intact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .chains import SupportGraph, chain_from_treatments
from .errors import InfiniteSupport, InvalidSpec, MatekitError, NoMovers
from .mate import chain_formula_value
from .panel import panel_from_arrays
from .propensity import CellMeansPropensity, decode_paths

_ENUM_CAP = 2_000_000


def _as_prob_vector(p, what):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise InvalidSpec(f"{what} must be a non-empty probability vector")
    if (p < 0).any() or not np.all(np.isfinite(p)):
        raise InvalidSpec(f"{what} must be finite and nonnegative")
    s = p.sum()
    if abs(s - 1.0) > 1e-8:
        raise InvalidSpec(f"{what} must sum to 1, got {s!r}")
    return p / s


@dataclass
class DgpSpec:
    """Complete description of one synthetic population.

    ``beta`` accepts shape (J, T, n_x) or (J, T); ``transition`` accepts
    (n_x, n_bins, J**T), (n_x, J**T), or, for T=2, (n_x, J, J) tables of
    origin-to-destination probabilities; ``carryover`` accepts (J, J, n_x),
    (J, J), or None for zero.
    """

    n_treatments: int
    beta: object
    transition: object
    n_periods: int = 2
    x_values: tuple = (0,)
    x_probs: tuple = (1.0,)
    alpha: dict = field(default_factory=lambda: {
        "family": "normal", "mean": 0.0, "sd": 1.0, "n_bins": 1,
    })
    eps_sd: object = 1.0
    eps_mover_shift: float = 0.0
    carryover: object = None
    seed: int = 0
    name: str = "dgp"

    def __post_init__(self):
        self.validate()

    # -- validation / normalization --------------------------------------

    def validate(self):
        j, t = int(self.n_treatments), int(self.n_periods)
        if j < 2:
            raise InvalidSpec(f"need at least 2 treatments, got {j}")
        if t < 2:
            raise InvalidSpec(f"need at least 2 periods, got {t}")
        self.n_treatments, self.n_periods = j, t
        self.x_values = tuple(self.x_values)
        n_x = len(self.x_values)
        if len(set(self.x_values)) != n_x:
            raise InvalidSpec("x_values must be distinct")
        self.x_probs = _as_prob_vector(self.x_probs, "x_probs")
        if self.x_probs.size != n_x:
            raise InvalidSpec("x_probs must match x_values in length")
        self._check_alpha()
        nb = int(self.alpha["n_bins"])

        beta = np.asarray(self.beta, dtype=float)
        if beta.shape == (j, t):
            beta = np.repeat(beta[:, :, None], n_x, axis=2)
        if beta.shape != (j, t, n_x) or not np.all(np.isfinite(beta)):
            raise InvalidSpec(
                f"beta must be finite with shape ({j}, {t}, {n_x}), got {beta.shape}"
            )
        self.beta = beta

        eps = np.asarray(self.eps_sd, dtype=float)
        if eps.ndim == 0:
            eps = np.full(t, float(eps))
        if eps.shape != (t,) or (eps < 0).any() or not np.all(np.isfinite(eps)):
            raise InvalidSpec(f"eps_sd must be {t} nonnegative values")
        self.eps_sd = eps
        self.eps_mover_shift = float(self.eps_mover_shift)

        g = j ** t
        tr = np.asarray(self.transition, dtype=float)
        if t == 2 and tr.shape == (j, j) and n_x == 1:
            tr = tr.reshape(1, g)
        if t == 2 and tr.shape == (n_x, j, j):
            tr = tr.reshape(n_x, g)
        if tr.shape == (n_x, g):
            tr = np.repeat(tr[:, None, :], nb, axis=1)
        if tr.shape != (n_x, nb, g):
            raise InvalidSpec(
                f"transition must normalize to shape ({n_x}, {nb}, {g}), got {tr.shape}"
            )
        rows = tr.reshape(-1, g)
        self.transition = np.stack(
            [_as_prob_vector(row, "transition row") for row in rows]
        ).reshape(n_x, nb, g)

        carr = self.carryover
        if carr is None:
            carr = np.zeros((j, j, n_x))
        else:
            carr = np.asarray(carr, dtype=float)
            if carr.shape == (j, j):
                carr = np.repeat(carr[:, :, None], n_x, axis=2)
        if carr.shape != (j, j, n_x) or not np.all(np.isfinite(carr)):
            raise InvalidSpec(
                f"carryover must be finite with shape ({j}, {j}, {n_x})"
            )
        self.carryover = carr
        self.seed = int(self.seed)

    def _check_alpha(self):
        a = dict(self.alpha)
        family = a.get("family", "normal")
        if family == "normal":
            a.setdefault("mean", 0.0)
            a.setdefault("sd", 1.0)
            a.setdefault("n_bins", 1)
            if float(a["sd"]) < 0:
                raise InvalidSpec("alpha sd must be nonnegative")
            if int(a["n_bins"]) < 1:
                raise InvalidSpec("alpha n_bins must be at least 1")
        elif family == "two_point":
            values = [float(v) for v in a.get("values", ())]
            probs = a.get("probs", (0.5, 0.5))
            if len(values) != 2 or values[0] == values[1]:
                raise InvalidSpec("two_point alpha needs two distinct values")
            order = np.argsort(values)
            p = _as_prob_vector(probs, "alpha probs")
            if p.size != 2:
                raise InvalidSpec("two_point alpha needs two probabilities")
            a["values"] = tuple(np.asarray(values)[order])
            a["probs"] = tuple(p[order])
            a.setdefault("n_bins", 1)
            if int(a["n_bins"]) not in (1, 2):
                raise InvalidSpec("two_point alpha supports n_bins in {1, 2}")
        else:
            raise InvalidSpec(f"unknown alpha family {family!r}")
        a["n_bins"] = int(a["n_bins"])
        self.alpha = a

    # -- derived quantities ----------------------------------------------

    def bin_probs(self):
        """Exact probabilities of the alpha quantile bins."""
        nb = self.alpha["n_bins"]
        if self.alpha["family"] == "normal" or nb == 1:
            return np.full(nb, 1.0 / nb)
        return np.asarray(self.alpha["probs"], dtype=float)

    def assumption_flags(self):
        """Which identifying conditions hold by construction."""
        # Tolerate float noise from arithmetically built arrays; a real
        # violation enters at the scale of the coefficients, not 1e-12.
        tol = 1e-12
        carr = self.carryover
        no_shift = self.eps_mover_shift == 0.0
        no_carry = bool(np.all(np.abs(carr) <= tol))
        carry_past_free = bool(np.all(np.ptp(carr, axis=0) <= tol))
        effect_step = carr - carr[:, :1, :]
        effects = self.beta - self.beta[:1]
        return {
            "io": no_shift,
            "ce": bool(np.all(np.ptp(effects, axis=2) <= tol)) and no_carry,
            "co": no_carry,
            "cpt": no_shift and (no_carry or self.n_periods == 2),
            "ceh": bool(np.all(np.ptp(effect_step, axis=0) <= tol)),
            "coi": carry_past_free,
        }

    # -- serialization ----------------------------------------------------

    def to_config(self):
        return {
            "name": self.name,
            "n_treatments": self.n_treatments,
            "n_periods": self.n_periods,
            "x_values": list(self.x_values),
            "x_probs": self.x_probs.tolist(),
            "alpha": dict(self.alpha),
            "beta": self.beta.tolist(),
            "eps_sd": self.eps_sd.tolist(),
            "eps_mover_shift": self.eps_mover_shift,
            "transition": self.transition.tolist(),
            "carryover": self.carryover.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(cfg) - known
        if extra:
            raise InvalidSpec(f"unknown DGP config keys: {sorted(extra)}")
        if "n_treatments" not in cfg or "beta" not in cfg or "transition" not in cfg:
            raise InvalidSpec("DGP config needs n_treatments, beta, and transition")
        return cls(**cfg)


# ---------------------------------------------------------------------------
# sampling


def _draw_alpha(spec, rng, n):
    a = spec.alpha
    if a["family"] == "normal":
        return rng.normal(a["mean"], a["sd"], size=n)
    values = np.asarray(a["values"], dtype=float)
    probs = np.asarray(a["probs"], dtype=float)
    return values[rng.choice(2, size=n, p=probs)]


def _alpha_bins(spec, alpha):
    a = spec.alpha
    nb = a["n_bins"]
    if nb == 1:
        return np.zeros(alpha.size, dtype=np.intp)
    if a["family"] == "normal":
        edges = stats.norm.ppf(np.arange(1, nb) / nb, loc=a["mean"], scale=a["sd"])
        return np.searchsorted(edges, alpha).astype(np.intp)
    return (alpha == a["values"][1]).astype(np.intp)


def generate(spec, n, seed=None):
    """Draw a panel of ``n`` units from the process described by ``spec``.

    ``seed`` may be an int or a SeedSequence; None uses ``spec.seed``.
    The draw order (covariate, alpha, paths, then shocks period by period)
    is fixed, so outputs are reproducible given (spec, n, seed).
    """
    n = int(n)
    if n <= 0:
        raise InvalidSpec(f"sample size must be positive, got {n}")
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(spec.seed if seed is None else int(seed))
    rng = np.random.default_rng(ss)
    n_x = len(spec.x_values)
    t_count = spec.n_periods
    g = spec.n_treatments ** t_count

    x_idx = rng.choice(n_x, size=n, p=spec.x_probs)
    alpha = _draw_alpha(spec, rng, n)
    bins = _alpha_bins(spec, alpha)
    codes = np.zeros(n, dtype=np.int64)
    for xi in range(n_x):
        for b in range(spec.alpha["n_bins"]):
            members = np.nonzero((x_idx == xi) & (bins == b))[0]
            if members.size:
                codes[members] = rng.choice(g, size=members.size,
                                            p=spec.transition[xi, b])
    treat = decode_paths(codes, spec.n_treatments, t_count)
    mover = (treat[:, 1:] != treat[:, :-1]).any(axis=1)
    outcomes = np.empty((n, t_count))
    for t in range(t_count):
        mu = spec.beta[treat[:, t], t, x_idx]
        if t >= 1:
            mu = mu + spec.carryover[treat[:, t - 1], treat[:, t], x_idx]
        if t == 1:
            mu = mu + spec.eps_mover_shift * mover
        outcomes[:, t] = alpha + mu + rng.normal(0.0, spec.eps_sd[t], size=n)
    labels = np.asarray(spec.x_values, dtype=object)[x_idx]
    return panel_from_arrays(
        treat, outcomes, covariates=labels, covariate_names=("x",),
        covariate_kinds=("discrete",), n_treatments=spec.n_treatments,
    )


# ---------------------------------------------------------------------------
# exact population quantities


class PopulationOracle:
    """Exact expectations over the finite (covariate, path) support.

    Everything is computed from cell masses and alpha-free cell means;
    normal shocks are mean zero, so realized cell means equal the model
    means. ``enumeration_check`` recomputes the cells with an
    independently ordered enumeration.
    """

    def __init__(self, spec):
        self.spec = spec
        j, t = spec.n_treatments, spec.n_periods
        n_x = len(spec.x_values)
        g = j ** t
        if n_x * g > _ENUM_CAP:
            raise InfiniteSupport(
                f"population support has {n_x * g} cells; enumeration capped at {_ENUM_CAP}"
            )
        self.paths = decode_paths(np.arange(g, dtype=np.int64), j, t)
        self.mover_paths = (self.paths[:, 1:] != self.paths[:, :-1]).any(axis=1)
        self.mass = self._enumerate_cells()
        with np.errstate(invalid="ignore", divide="ignore"):
            self.cond_tables = self.mass / self.mass.sum(axis=1, keepdims=True)
        self.cell_means = self._cell_period_means()
        self.mover_share = float(self.mass[:, self.mover_paths].sum())

    # -- enumeration (primary, vectorized) --------------------------------

    def _enumerate_cells(self):
        spec = self.spec
        binp = spec.bin_probs()
        per_x = (binp[None, :, None] * spec.transition).sum(axis=1)
        return spec.x_probs[:, None] * per_x

    def _cell_period_means(self):
        spec = self.spec
        n_x = len(spec.x_values)
        g, t_count = self.paths.shape[0], spec.n_periods
        means = np.empty((n_x, g, t_count))
        for t in range(t_count):
            cur = self.paths[:, t]
            mu = spec.beta[cur, t, :].T
            if t >= 1:
                prev = self.paths[:, t - 1]
                mu = mu + spec.carryover[prev, cur, :].T
            if t == 1:
                mu = mu + spec.eps_mover_shift * self.mover_paths[None, :]
            means[:, :, t] = mu
        return means

    # -- enumeration (independent, scalar loops) --------------------------

    def enumeration_check(self):
        """Cell masses and means rebuilt cell by cell in a different order."""
        spec = self.spec
        j, t_count = spec.n_treatments, spec.n_periods
        n_x = len(spec.x_values)
        g = j ** t_count
        binp = spec.bin_probs()
        mass = np.zeros((n_x, g))
        means = np.zeros((n_x, g, t_count))
        for code in range(g):
            digits = []
            rem = code
            for _ in range(t_count):
                digits.append(rem % j)
                rem //= j
            path = digits[::-1]
            moved = any(path[k] != path[k + 1] for k in range(t_count - 1))
            for b in range(spec.alpha["n_bins"]):
                for x in range(n_x):
                    mass[x, code] += spec.x_probs[x] * binp[b] * spec.transition[x, b, code]
            for x in range(n_x):
                for t in range(t_count):
                    m = spec.beta[path[t], t, x]
                    if t >= 1:
                        m += spec.carryover[path[t - 1], path[t], x]
                    if t == 1 and moved:
                        m += spec.eps_mover_shift
                    means[x, code, t] = m
        return mass, means

    # -- conditional causal quantities ------------------------------------

    def _effect_grid(self, j, k, t):
        """E[Y_t^j - Y_t^k | cell] for every (x, path) cell, shape (n_x, G)."""
        spec = self.spec
        base = spec.beta[j, t, :] - spec.beta[k, t, :]
        grid = np.repeat(base[:, None], self.paths.shape[0], axis=1)
        if t >= 1:
            prev = self.paths[:, t - 1]
            grid = grid + (spec.carryover[prev, j, :] - spec.carryover[prev, k, :]).T
        return grid

    def _cond_mean(self, grid, path_mask):
        w = self.mass[:, path_mask]
        total = w.sum()
        if total <= 0:
            raise NoMovers("conditioning set has zero mass")
        return float((w * grid[:, path_mask]).sum() / total)

    def _path_mask(self, kind):
        if isinstance(kind, np.ndarray):
            return kind
        if kind == "mover":
            return self.mover_paths
        raise ValueError(f"unknown conditioning set {kind!r}")

    def path_mask_for(self, origin=None, destination=None, period_pair=(0, 1)):
        """Mask of paths with the stated states at the two periods."""
        p, q = period_pair
        mask = np.ones(self.paths.shape[0], dtype=bool)
        if origin is not None:
            mask &= self.paths[:, p] == origin
        if destination is not None:
            mask &= self.paths[:, q] == destination
        return mask

    def true_effect(self, j, k, t, cells="mover"):
        """E[Y_t^j - Y_t^k | cells]; ``cells`` is "mover" or a path mask."""
        return self._cond_mean(self._effect_grid(j, k, t), self._path_mask(cells))

    def true_mate(self, j, t):
        """E[Y_t^j - Y_t^0 | any move], the population target."""
        return self.true_effect(j, 0, t, "mover")

    def true_half_sum(self, j, periods=(0, 1)):
        p, q = periods
        return 0.5 * (self.true_mate(j, p) + self.true_mate(j, q))

    # -- realized growth by cell ------------------------------------------

    def growth(self, period_pair=(0, 1)):
        """E[Y_q - Y_p | cell] for all cells, shape (n_x, G)."""
        p, q = period_pair
        return self.cell_means[:, :, q] - self.cell_means[:, :, p]

    def growth_mean(self, path_mask, period_pair=(0, 1)):
        return self._cond_mean(self.growth(period_pair), path_mask)

    # -- population regressions over cells --------------------------------

    def population_regression(self):
        """Weighted least squares of growth on the change indicators.

        Mirrors the sample mover regression: returns (tau, beta) where
        beta[j-1] is the coefficient on the change in treatment-j
        occupancy between the two periods.
        """
        spec = self.spec
        if spec.n_periods != 2:
            raise MatekitError("population regression is defined for T=2")
        j = spec.n_treatments
        dd = np.zeros((self.paths.shape[0], j - 1))
        for col in range(1, j):
            dd[:, col - 1] = (self.paths[:, 1] == col).astype(float) - (
                self.paths[:, 0] == col
            ).astype(float)
        n_x, g = self.mass.shape
        design = np.column_stack([np.ones(g), dd])
        xs = np.tile(design, (n_x, 1))
        w = self.mass.reshape(-1)
        y = self.growth().reshape(-1)
        keep = w > 0
        xs, wk, yk = xs[keep], w[keep], y[keep]
        xtwx = xs.T @ (xs * wk[:, None])
        xtwy = xs.T @ (wk * yk)
        coef = np.linalg.lstsq(xtwx, xtwy, rcond=None)[0]
        return float(coef[0]), coef[1:]

    def lemma1_population(self):
        """Population analogue of the two-treatment coefficient split."""
        spec = self.spec
        if spec.n_treatments != 2 or spec.n_periods != 2:
            raise MatekitError("lemma decomposition needs J=2, T=2")
        m_in = self.path_mask_for(0, 1)
        m_out = self.path_mask_for(1, 0)
        m_stay = ~self.mover_paths
        p_plus = float(self.mass[:, m_in].sum())
        p_minus = float(self.mass[:, m_out].sum())
        p_stay = float(self.mass[:, m_stay].sum())
        denom = p_plus * (1 - p_plus) + p_minus * (1 - p_minus) + 2 * p_plus * p_minus
        omega = (p_plus * (1 - p_plus) + p_plus * p_minus) / denom
        d_in = self.growth_mean(m_in) if p_plus > 0 else float("nan")
        d_out = self.growth_mean(m_out) if p_minus > 0 else float("nan")
        d_stay = self.growth_mean(m_stay) if p_stay > 0 else float("nan")
        if p_stay == 0:
            beta1 = 0.5 * (d_in - d_out)
        else:
            beta1 = omega * (d_in - d_stay) + (1 - omega) * (d_stay - d_out)
        return {
            "p_plus": p_plus,
            "p_minus": p_minus,
            "p_stay": p_stay,
            "omega": float(omega),
            "d_in": d_in,
            "d_out": d_out,
            "d_stay": d_stay,
            "beta1": float(beta1),
        }

    def corollary_forms(self):
        """The two causal half-sum readings of the no-stayer coefficient.

        Returns the realized coefficient and the two equivalent causal
        forms: period-matched (in-movers at 1, out-movers at 0) and
        period-crossed. All three agree when trends are parallel and the
        carryover is inactive.
        """
        vals = self.lemma1_population()
        m_in = self.path_mask_for(0, 1)
        m_out = self.path_mask_for(1, 0)
        matched = 0.5 * (self.true_effect(1, 0, 1, m_in) + self.true_effect(1, 0, 0, m_out))
        crossed = 0.5 * (self.true_effect(1, 0, 0, m_in) + self.true_effect(1, 0, 1, m_out))
        return {"beta1": vals["beta1"], "matched": matched, "crossed": crossed}

    def prop2_population(self):
        """The three-treatment second coefficient and its decomposition.

        Requires the two-mover-group layout (paths stay-at-0, stay-at-1,
        0->1, 1->2). Returns the regression coefficients, the two causal
        terms, and the non-causal stayer-trend-gap term whose sum
        reproduces the second coefficient.
        """
        spec = self.spec
        if spec.n_treatments < 3 or spec.n_periods != 2:
            raise MatekitError("the layout needs J>=3, T=2")
        allowed = np.zeros(self.paths.shape[0], dtype=bool)
        for pair in ((0, 0), (1, 1), (0, 1), (1, 2)):
            allowed |= self.path_mask_for(*pair)
        if self.mass[:, ~allowed].sum() > 0:
            raise MatekitError(
                "population is not the stay0/stay1/0->1/1->2 layout"
            )
        s0 = self.path_mask_for(0, 0)
        s1 = self.path_mask_for(1, 1)
        m01 = self.path_mask_for(0, 1)
        m12 = self.path_mask_for(1, 2)
        p_s0 = float(self.mass[:, s0].sum())
        p_s1 = float(self.mass[:, s1].sum())
        p0 = p_s0 / (p_s0 + p_s1)
        g0 = self.growth_mean(s0)
        g1 = self.growth_mean(s1)
        tau, beta = self.population_regression()
        causal_t0 = self.true_effect(1, 0, 0, m01)
        causal_t1 = self.true_effect(2, 1, 1, m12)
        gap = g1 - g0
        noncausal = 2.0 * p0 * gap
        return {
            "tau": tau,
            "beta1": float(beta[0]),
            "beta2": float(beta[1]),
            "p0": p0,
            "g0": g0,
            "g1": g1,
            "m01": self.growth_mean(m01),
            "m12": self.growth_mean(m12),
            "causal_t0_1v0": causal_t0,
            "causal_t1_2v1": causal_t1,
            "stayer_trend_gap": gap,
            "noncausal": noncausal,
            "decomposition": causal_t0 + causal_t1 + noncausal,
        }

    # -- exact first step and estimator formulas ---------------------------

    def exact_propensity(self):
        """Cell-means model whose tables are the exact population scores."""
        return CellMeansPropensity.from_tables(
            strata_names=("x",),
            stratum_labels=[(v,) for v in self.spec.x_values],
            category_paths=self.paths,
            tables=self.cond_tables,
            n_treatments=self.spec.n_treatments,
            marginal_mover_share=self.mover_share,
        )

    def exact_support_graph(self, period_pair=(0, 1)):
        """Feasibility graph from exact scores (positive in every stratum)."""
        spec = self.spec
        j = spec.n_treatments
        p, q = period_pair
        mover_ok = np.zeros((j, j), dtype=bool)
        stayer_ok = np.zeros(j, dtype=bool)
        mover_counts = np.zeros((j, j))
        stayer_counts = np.zeros(j)
        for c in range(j):
            for d in range(j):
                mask = self.path_mask_for(c, d, (p, q))
                per_x = self.cond_tables[:, mask].sum(axis=1)
                total = float(self.mass[:, mask].sum())
                if c == d:
                    stayer_ok[c] = bool((per_x > 0).all())
                    stayer_counts[c] = total
                else:
                    mover_ok[c, d] = bool((per_x > 0).all())
                    mover_counts[c, d] = total
        return SupportGraph(
            n_treatments=j,
            period_pair=(int(p), int(q)),
            mover_ok=mover_ok,
            stayer_ok=stayer_ok,
            mover_counts=mover_counts,
            stayer_counts=stayer_counts,
            trim_threshold=0.0,
        )

    def formula_mate(self, chain, target_period=1, base_period=None,
                     mode="prop3", link_weights=None, corollary=False):
        """Evaluate an estimator's identification formula exactly.

        Feeds exact cell probabilities and cell means through the same
        weighting code the sample estimators use; under the conditions of
        the corresponding result this equals the true estimand.
        """
        spec = self.spec
        if base_period is None:
            base_period = 1 - target_period if spec.n_periods == 2 else 0
        pair = (min(base_period, target_period), max(base_period, target_period))
        graph = self.exact_support_graph(pair)
        resolved = chain_from_treatments(
            graph, chain, mode=mode,
            period=None if mode == "prop4" else target_period,
        )
        ws = resolved.link_weights if link_weights is None else tuple(link_weights)
        n_x, g = self.mass.shape
        keep = self.mass.reshape(-1) > 0
        treat = np.tile(self.paths, (n_x, 1))[keep]
        dy = self.growth(pair).reshape(-1)[keep]
        weights = self.mass.reshape(-1)[keep]
        x_codes = np.repeat(np.arange(n_x), g)[keep]
        view = self.exact_propensity().score_view_for_codes(x_codes)
        if mode == "prop4":
            kind, base, target = "kappa", pair[0], pair[1]
        else:
            kind, base, target = "rho", base_period, target_period
        return chain_formula_value(
            dy, treat, view, resolved.links, ws, base, target, kind,
            sample_weights=weights, corollary=corollary,
        )

    def coi_violation_term(self, chain, target_period=0, link_weights=None):
        """Enumerated gap of the earlier-period formula under carryover.

        For each link (a, b) with mixing weight w, the stayer-minus-mover
        contrast picks up carryover terms that do not cancel when the
        target is the earlier period: w*(delta[a,a,x] - delta[b,a,x]) +
        (1-w)*(delta[a,b,x] - delta[b,b,x]), averaged over the mover
        covariate distribution. The formula value minus the true estimand
        equals the sum of these link terms.
        """
        if target_period != 0 or self.spec.n_periods != 2:
            raise ValueError("the violation term is defined for t=0 on T=2 panels")
        graph = self.exact_support_graph((0, 1))
        resolved = chain_from_treatments(graph, chain, mode="prop3", period=0)
        ws = resolved.link_weights if link_weights is None else tuple(link_weights)
        carr = self.spec.carryover
        p_x_mover = self.mass[:, self.mover_paths].sum(axis=1)
        p_x_mover = p_x_mover / p_x_mover.sum()
        total = 0.0
        for (a, b), w in zip(resolved.links, ws):
            fwd = carr[a, a, :] - carr[b, a, :]
            rev = carr[a, b, :] - carr[b, b, :]
            total += float((p_x_mover * (w * fwd + (1 - w) * rev)).sum())
        return total


def population_oracle(spec):
    """Exact population estimands for a finite-support process."""
    return PopulationOracle(spec)


# ---------------------------------------------------------------------------
# Monte Carlo driver


@dataclass(frozen=True)
class MonteCarloResult:
    """Per-replication draws plus error tallies for a set of estimators."""

    spec_name: str
    n: int
    reps: int
    draws: dict
    errors: dict
    truths: dict

    def summary(self):
        """Deterministic summary rows: one dict per (estimator, quantity)."""
        rows = []
        for name in self.draws:
            series = self.draws[name]
            truth = self.truths.get(name)
            points = series.get("point")
            ses = series.get("se")
            for key in series:
                vals = series[key]
                ok = vals[np.isfinite(vals)]
                row = {
                    "estimator": name,
                    "quantity": key,
                    "reps_used": int(ok.size),
                    "errors": int(self.errors.get(name, 0)),
                    "mean": float(ok.mean()) if ok.size else None,
                    "sd": float(ok.std(ddof=1)) if ok.size > 1 else None,
                }
                row["mc_se"] = (
                    float(row["sd"] / math.sqrt(ok.size))
                    if row["sd"] is not None and ok.size
                    else None
                )
                if key == "point" and truth is not None and ok.size:
                    row["truth"] = float(truth)
                    row["bias"] = float(ok.mean() - truth)
                if key == "p_value" and ok.size:
                    row["reject_05"] = float((ok < 0.05).mean())
                rows.append(row)
            if points is not None and ses is not None and truth is not None:
                cover = np.abs(points - truth) <= 1.96 * ses
                valid = np.isfinite(points) & np.isfinite(ses)
                if valid.any():
                    rows.append({
                        "estimator": name,
                        "quantity": "coverage_95",
                        "reps_used": int(valid.sum()),
                        "errors": int(self.errors.get(name, 0)),
                        "mean": float(cover[valid].mean()),
                        "sd": None,
                        "mc_se": None,
                    })
        return rows


def _mc_replicate(spec, n, seed, r, estimators):
    panel = generate(spec, n, seed=np.random.SeedSequence(entropy=seed, spawn_key=(r,)))
    out = {}
    for name, fn in estimators.items():
        try:
            res = fn(panel)
            out[name] = res if isinstance(res, dict) else {"point": float(res)}
        except MatekitError:
            out[name] = None
    return out


def monte_carlo(spec, n, reps, estimators, seed=0, n_jobs=1, truths=None):
    """Run ``reps`` independent replications of a set of estimators.

    ``estimators`` maps names to callables taking a panel and returning a
    float or a dict of floats (keys like "point", "se", "p_value" feed the
    summary). Replicate r uses the seed stream (seed, r), so results do
    not depend on scheduling. Estimation errors are tallied, not fatal.
    """
    reps = int(reps)
    seed = int(seed)
    if n_jobs == 1:
        raw = [_mc_replicate(spec, n, seed, r, estimators) for r in range(reps)]
    else:
        from joblib import Parallel, delayed

        raw = Parallel(n_jobs=n_jobs)(
            delayed(_mc_replicate)(spec, n, seed, r, estimators) for r in range(reps)
        )
    draws = {}
    errors = {name: 0 for name in estimators}
    for name in estimators:
        keys = []
        for rep in raw:
            if rep[name] is not None:
                for k in rep[name]:
                    if k not in keys:
                        keys.append(k)
        series = {k: np.full(reps, np.nan) for k in keys}
        for r, rep in enumerate(raw):
            if rep[name] is None:
                errors[name] += 1
                continue
            for k, v in rep[name].items():
                series[k][r] = v
        draws[name] = series
    return MonteCarloResult(
        spec_name=spec.name,
        n=int(n),
        reps=reps,
        draws=draws,
        errors=errors,
        truths=dict(truths or {}),
    )
