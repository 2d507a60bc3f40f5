"""Support graphs and treatment chains connecting the reference to a target.

A chain is a simple path 0 -> ... -> j of distinct treatments. Each link
(a, b) can be estimated in a forward direction (movers a->b plus stayers at
a), a reverse direction (movers b->a plus stayers at b), or both; which
directions are admissible depends on per-stratum score positivity after
trimming, summarized in a :class:`SupportGraph`. The averaged-period
weighting scheme needs movers in both directions on every link and no
stayers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleChain, NoFeasibleChain
from .panel import check_period_pair


@dataclass(frozen=True)
class SupportGraph:
    """Post-trim feasibility flags for one ordered period pair (p, q), p < q.

    ``mover_ok[c, d]`` is True when P(code c in p and code d in q | x) is
    strictly positive (and at or above the trim threshold) for every fitted
    stratum; ``stayer_ok[c]`` is the same for P(c in both periods | x). Raw
    pooled unit counts are reported alongside the estimated-score flags.
    """

    n_treatments: int
    period_pair: tuple
    mover_ok: np.ndarray
    stayer_ok: np.ndarray
    mover_counts: np.ndarray
    stayer_counts: np.ndarray
    trim_threshold: float

    def pair_ok(self, c_at, d_at):
        """Feasibility of the cell (code c in period s, code d in period t).

        ``c_at`` and ``d_at`` are (code, period) pairs over this graph's two
        periods, in either order.
        """
        (c, s), (d, t) = c_at, d_at
        p, q = self.period_pair
        if (s, t) == (p, q):
            pass
        elif (s, t) == (q, p):
            c, d = d, c
        else:
            raise ValueError(f"periods {(s, t)} not in graph pair {self.period_pair}")
        if c == d:
            return bool(self.stayer_ok[c])
        return bool(self.mover_ok[c, d])

    def link_conditions(self, a, b, base, target):
        """(condition_i, condition_ii) for link (a, b), given base and target.

        Condition (i): units at a in the base period and b in the target
        period exist in every stratum, and so do stayers at a. Condition
        (ii) is the mirror image at b.
        """
        cond_i = self.pair_ok((a, base), (b, target)) and bool(self.stayer_ok[a])
        cond_ii = self.pair_ok((b, base), (a, target)) and bool(self.stayer_ok[b])
        return cond_i, cond_ii

    def link_feasible(self, a, b, mode, base=None, target=None):
        if mode == "prop4":
            return bool(self.mover_ok[a, b]) and bool(self.mover_ok[b, a])
        cond_i, cond_ii = self.link_conditions(a, b, base, target)
        return cond_i or cond_ii


@dataclass(frozen=True)
class Chain:
    """A simple treatment path with per-link direction modes and weights.

    ``modes[m]`` is "forward", "reverse", or "both"; ``link_weights[m]`` is
    the weight on the forward-direction term (1, 0, or 1/2 by default).
    """

    treatments: tuple
    modes: tuple
    link_weights: tuple
    mode: str             # "prop3" or "prop4"
    period_pair: tuple
    target_period: int | None

    @property
    def links(self):
        return tuple(
            (self.treatments[m], self.treatments[m + 1])
            for m in range(len(self.treatments) - 1)
        )

    @property
    def target(self):
        return self.treatments[-1]


def _resolve_periods(graph, period):
    p, q = graph.period_pair
    if period is None:
        period = q
    if period not in (p, q):
        raise ValueError(f"target period {period} not in graph pair {(p, q)}")
    base = p if period == q else q
    return base, period


def _link_mode(graph, a, b, mode, base, target):
    """Direction mode and default forward weight for one link, or None."""
    if mode == "prop4":
        if graph.link_feasible(a, b, "prop4"):
            return "both", 0.5
        return None
    cond_i, cond_ii = graph.link_conditions(a, b, base, target)
    if cond_i and cond_ii:
        return "both", 0.5
    if cond_i:
        return "forward", 1.0
    if cond_ii:
        return "reverse", 0.0
    return None


def enumerate_chains(graph, target, mode="prop3", period=None):
    """All feasible chains 0 -> target, shortest first then lexicographic.

    Parameters
    ----------
    graph : SupportGraph
    target : int
        Destination treatment (nonzero).
    mode : "prop3" or "prop4"
        Which link support conditions apply.
    period : int, optional
        Target period for prop3 conditions; defaults to the later period of
        the graph's pair. Ignored for prop4.

    Raises
    ------
    NoFeasibleChain
        With the set of treatments reachable from 0 and the blocking cut.
    """
    j_count = graph.n_treatments
    if not 0 < target < j_count:
        raise ValueError(f"target must be in 1..{j_count - 1}, got {target}")
    base = target_period = None
    if mode == "prop3":
        base, target_period = _resolve_periods(graph, period)
    elif mode != "prop4":
        raise ValueError(f"mode must be 'prop3' or 'prop4', got {mode!r}")

    def feasible(a, b):
        return _link_mode(graph, a, b, mode, base, target_period) is not None

    found = []

    def dfs(path):
        here = path[-1]
        if here == target:
            found.append(tuple(path))
            return
        for nxt in range(j_count):
            if nxt in path:
                continue
            if feasible(here, nxt):
                dfs(path + [nxt])

    dfs([0])
    if not found:
        reachable = {0}
        frontier = [0]
        while frontier:
            a = frontier.pop()
            for b in range(j_count):
                if b not in reachable and feasible(a, b):
                    reachable.add(b)
                    frontier.append(b)
        cut = sorted(
            (a, b) for a in reachable for b in range(j_count) if b not in reachable
        )
        raise NoFeasibleChain(
            f"no feasible chain from 0 to {target}; reachable treatments "
            f"{sorted(reachable)}; blocking cut {cut}"
        )
    found.sort(key=lambda p: (len(p), p))
    chains = []
    for path in found:
        modes, weights = [], []
        for m in range(len(path) - 1):
            lm = _link_mode(graph, path[m], path[m + 1], mode, base, target_period)
            modes.append(lm[0])
            weights.append(lm[1])
        chains.append(
            Chain(
                treatments=path,
                modes=tuple(modes),
                link_weights=tuple(weights),
                mode=mode,
                period_pair=tuple(graph.period_pair),
                target_period=target_period,
            )
        )
    return chains


def chain_from_treatments(graph, treatments, mode="prop3", period=None):
    """Build a chain from an explicit treatment list, validating every link.

    Raises
    ------
    InfeasibleChain
        Naming the first failing link and which conditions fail.
    """
    treatments = tuple(int(t) for t in treatments)
    j_count = graph.n_treatments
    if len(treatments) < 2 or treatments[0] != 0:
        raise InfeasibleChain(f"chain {treatments} must start at 0 and have >= 2 entries")
    if len(set(treatments)) != len(treatments):
        raise InfeasibleChain(f"chain {treatments} repeats a treatment")
    if any(not 0 <= t < j_count for t in treatments):
        raise InfeasibleChain(f"chain {treatments} uses codes outside 0..{j_count - 1}")
    base = target_period = None
    if mode == "prop3":
        base, target_period = _resolve_periods(graph, period)
    modes, weights = [], []
    for m in range(len(treatments) - 1):
        a, b = treatments[m], treatments[m + 1]
        lm = _link_mode(graph, a, b, mode, base, target_period)
        if lm is None:
            if mode == "prop4":
                detail = (
                    f"movers {a}->{b}: {bool(graph.mover_ok[a, b])}, "
                    f"movers {b}->{a}: {bool(graph.mover_ok[b, a])}"
                )
            else:
                cond_i, cond_ii = graph.link_conditions(a, b, base, target_period)
                detail = f"condition (i): {cond_i}, condition (ii): {cond_ii}"
            raise InfeasibleChain(
                f"link ({a}, {b}) of chain {treatments} is infeasible ({detail})"
            )
        modes.append(lm[0])
        weights.append(lm[1])
    return Chain(
        treatments=treatments,
        modes=tuple(modes),
        link_weights=tuple(weights),
        mode=mode,
        period_pair=tuple(graph.period_pair),
        target_period=target_period,
    )


def build_support_graph(panel, model, period_pair=(0, 1)):
    """Summarize post-trim score positivity for one period pair.

    A cell is feasible when its estimated score is strictly positive and at
    or above the model's trim threshold for every unit's stratum. Raw unit
    counts are reported alongside (they can disagree with the estimated
    flags under parametric scores).
    """
    p, q = period_pair
    check_period_pair(panel, p, q, ordered=True)
    j_count = panel.n_treatments
    view = model.score_view(panel)
    threshold = float(getattr(model, "trim", 0.0))
    mover_ok = np.zeros((j_count, j_count), dtype=bool)
    stayer_ok = np.zeros(j_count, dtype=bool)
    for c in range(j_count):
        for d in range(j_count):
            scores = view.pair_prob(c, p, d, q)
            ok = bool((scores > 0).all()) and bool((scores >= threshold).all())
            if c == d:
                stayer_ok[c] = ok
            else:
                mover_ok[c, d] = ok
    t_p = panel.treatments[:, p]
    t_q = panel.treatments[:, q]
    mover_counts = np.zeros((j_count, j_count), dtype=np.int64)
    np.add.at(mover_counts, (t_p, t_q), 1)
    stayer_counts = np.diag(mover_counts).copy()
    np.fill_diagonal(mover_counts, 0)
    return SupportGraph(
        n_treatments=j_count,
        period_pair=(int(p), int(q)),
        mover_ok=mover_ok,
        stayer_ok=stayer_ok,
        mover_counts=mover_counts,
        stayer_counts=stayer_counts,
        trim_threshold=threshold,
    )


def count_all_chains(n_treatments):
    """Number of simple paths 0 -> j through the remaining J-2 treatments.

    A path with k intermediates picks which k of the J-2 other treatments
    to visit and in what order, so the total is sum_k k! * C(J-2, k).
    Exact integer arithmetic; grows super-exponentially but never wraps.
    """
    if n_treatments < 2:
        raise ValueError(f"need at least 2 treatments, got {n_treatments}")
    inner = n_treatments - 2
    return sum(
        math.factorial(k) * math.comb(inner, k) for k in range(inner + 1)
    )


def export_dot(graph, chains=(), path=None):
    """Render the support graph as DOT text (optionally writing a file).

    Edges appear for every observed mover cell: solid when the estimated
    scores make it feasible in every stratum, dashed otherwise. Links used
    by the given chains are highlighted. Cells never observed are omitted,
    so an empty panel yields isolated nodes. Output is deterministic.
    """
    j_count = graph.n_treatments
    chosen = set()
    for chain in chains:
        for a, b in chain.links:
            chosen.add((a, b))
    lines = ["digraph support {", "  rankdir=LR;"]
    for c in range(j_count):
        stay = int(graph.stayer_counts[c])
        shape = "doublecircle" if graph.stayer_ok[c] else "circle"
        lines.append(f'  t{c} [label="{c} ({stay})" shape={shape}];')
    for a in range(j_count):
        for b in range(j_count):
            if a == b or graph.mover_counts[a, b] == 0:
                continue
            style = "solid" if graph.mover_ok[a, b] else "dashed"
            attrs = [f"style={style}", f'label="{int(graph.mover_counts[a, b])}"']
            if (a, b) in chosen:
                attrs.append("color=red")
                attrs.append("penwidth=2.0")
            lines.append(f"  t{a} -> t{b} [{' '.join(attrs)}];")
    lines.append("}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
