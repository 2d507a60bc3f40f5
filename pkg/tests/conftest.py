"""Shared builders for the test suite.

Panels are assembled directly from arrays, support graphs from explicit
flag matrices, and synthetic populations from a small stable of process
specs whose truths are enumerable exactly.
"""

import numpy as np
import pyparsing as pp
import pytest

from matekit.chains import SupportGraph
from matekit.panel import panel_from_arrays
from matekit.simlab import DgpSpec


def make_panel(treatments, outcomes, x=None, n_treatments=None):
    """PanelDataset from (N, T) arrays, optionally with one discrete covariate."""
    covariates = names = kinds = None
    if x is not None:
        covariates = np.asarray(x, dtype=object).reshape(-1, 1)
        names = ("x",)
        kinds = ("discrete",)
    return panel_from_arrays(
        np.asarray(treatments),
        np.asarray(outcomes, dtype=float),
        covariates=covariates,
        covariate_names=names,
        covariate_kinds=kinds,
        n_treatments=n_treatments,
    )


def panel_from_cells(cells, dy_by_cell=None, seed=0):
    """Panel whose rows repeat (origin, destination) cells with varied dy."""
    rng = np.random.default_rng(seed)
    rows, dys = [], []
    for (a, b), count in cells.items():
        for _ in range(count):
            rows.append((a, b))
            base = dy_by_cell[(a, b)] if dy_by_cell else 0.0
            dys.append(base + rng.normal(scale=0.3))
    treatments = np.array(rows)
    y0 = rng.normal(size=len(rows))
    outcomes = np.column_stack([y0, y0 + np.array(dys)])
    return make_panel(treatments, outcomes, n_treatments=treatments.max() + 1)


def graph_from_flags(mover_ok, stayer_ok, period_pair=(0, 1), trim=0.0):
    """SupportGraph from explicit flag arrays (counts mirror the flags)."""
    mover_ok = np.asarray(mover_ok, dtype=bool)
    stayer_ok = np.asarray(stayer_ok, dtype=bool)
    np.fill_diagonal(mover_ok, False)
    return SupportGraph(
        n_treatments=mover_ok.shape[0],
        period_pair=tuple(period_pair),
        mover_ok=mover_ok,
        stayer_ok=stayer_ok,
        mover_counts=mover_ok.astype(np.int64) * 10,
        stayer_counts=stayer_ok.astype(np.int64) * 10,
        trim_threshold=trim,
    )


def complete_graph(n_treatments, period_pair=(0, 1)):
    """Support graph where every mover cell and every stayer cell is feasible."""
    j = n_treatments
    return graph_from_flags(
        np.ones((j, j), dtype=bool), np.ones(j, dtype=bool), period_pair
    )


def _dot_grammar():
    ident = pp.Word(pp.alphanums + "_.")
    value = ident | pp.QuotedString('"')
    attr = pp.Group(ident + pp.Suppress("=") + value)
    attr_list = pp.Suppress("[") + pp.OneOrMore(attr) + pp.Suppress("]")
    edge = pp.Group(
        ident + pp.Suppress("->") + ident
        + pp.Group(pp.Optional(attr_list)) + pp.Suppress(";")
    )
    node = pp.Group(ident + pp.Group(pp.Optional(attr_list)) + pp.Suppress(";"))
    assign = pp.Group(ident + pp.Suppress("=") + value + pp.Suppress(";"))
    body = pp.ZeroOrMore(edge | assign | node)
    return (
        pp.Suppress("digraph")
        + ident("graph_name")
        + pp.Suppress("{")
        + pp.Group(body)("stmts")
        + pp.Suppress("}")
    )


_DOT = _dot_grammar()


def parse_dot(text):
    """Parse directed-graph text into (name, settings, nodes, edges).

    Covers the dialect emitted here: bare or quoted attribute values,
    space-separated attribute lists, one statement per ``;``. Statement
    kinds are told apart by shape: edges carry three tokens, nodes carry a
    nested attribute list, plain assignments carry a bare value.
    """
    result = _DOT.parse_string(text, parse_all=True)
    settings, nodes, edges = {}, {}, {}
    for stmt in result["stmts"]:
        toks = stmt.as_list()
        if len(toks) == 3:
            edges[(toks[0], toks[1])] = {k: v for k, v in toks[2]}
        elif isinstance(toks[1], list):
            nodes[toks[0]] = {k: v for k, v in toks[1]}
        else:
            settings[toks[0]] = toks[1]
    return str(result["graph_name"]), settings, nodes, edges


# ---------------------------------------------------------------------------
# process specs with exactly enumerable truths


def null_gmm_spec(seed=0):
    """Three treatments, zero effects, one-directional mover support.

    Forward-only transitions leave exactly two feasible chains (0,2) and
    (0,1,2) to target 2, each carrying a single direction, so the stacked
    system has two routes. All cell means are zero, so every route
    estimates zero and the route-equality null holds.
    """
    transition = np.array([
        [0.30, 0.12, 0.12],
        [0.00, 0.20, 0.16],
        [0.00, 0.00, 0.10],
    ])
    return DgpSpec(
        n_treatments=3,
        beta=np.zeros((3, 2)),
        transition=transition,
        eps_sd=1.0,
        seed=seed,
        name="null-forward-j3",
    )


def het_j2_spec(seed=0):
    """Binary treatment, effects varying by covariate and period.

    Both mover directions and both stayer cells have positive mass in both
    strata, so the single link supports every estimator; effects are
    origin-independent, so chain weighting recovers the mover effect.
    """
    beta = np.zeros((2, 2, 2))
    beta[0, :, 0] = (0.0, 0.5)
    beta[0, :, 1] = (1.0, 0.25)
    beta[1, :, 0] = (0.75, 2.0)
    beta[1, :, 1] = (2.5, 1.25)
    transition = np.array([
        [[0.35, 0.25], [0.15, 0.25]],
        [[0.20, 0.30], [0.30, 0.20]],
    ])
    return DgpSpec(
        n_treatments=2,
        beta=beta,
        transition=transition,
        x_values=(0, 1),
        x_probs=(0.625, 0.375),
        eps_sd=1.0,
        seed=seed,
        name="het-j2",
    )


def oracle_spec(n_treatments, seed=0, carryover=None):
    """Complete-support spec with covariate-heterogeneous effects.

    Every origin-destination cell has positive mass in both strata, so all
    chains are feasible in both modes. Effects vary by (treatment, period,
    covariate) but not by origin, and there is no carryover unless one is
    passed in, so parallel trends and effect homogeneity hold.
    """
    j = n_treatments
    rng = np.random.default_rng(900 + j)
    beta = np.round(rng.uniform(-2, 2, size=(j, 2, 2)), 3)
    mass = np.ones((2, j, j)) + np.arange(j * j).reshape(1, j, j) * 0.15
    mass[1] = mass[1][::-1]
    transition = mass / mass.sum(axis=(1, 2), keepdims=True)
    return DgpSpec(
        n_treatments=j,
        beta=beta,
        transition=transition,
        x_values=("a", "b"),
        x_probs=(0.55, 0.45),
        eps_sd=1.0,
        carryover=carryover,
        seed=seed,
        name=f"oracle-j{j}",
    )


def additive_carryover(n_treatments, origin_scale=0.6, dest_scale=0.25):
    """Carryover origin_scale*k + dest_scale*j: breaks impersistence only.

    The origin part telescopes into the earlier-period formulas; the
    destination part shifts every cell of a column equally, so conditional
    effect homogeneity and two-period parallel trends survive.
    """
    k = np.arange(n_treatments, dtype=float)
    return origin_scale * k[:, None] + dest_scale * k[None, :]


def two_link_spec(seed=0):
    """Two stayer cells and the mover ladder 0->1, 1->2, dyadic masses.

    Stayer shares 0.125 and 0.375 put a quarter of the stayers at 0; the
    stayer trends 0.25 and 1.25 differ by exactly 1, so the non-causal
    piece of the second coefficient is exactly 0.5.
    """
    beta = np.array([
        [0.0, 0.25],
        [0.5, 1.75],
        [1.0, 2.5],
    ])
    transition = np.array([
        [0.125, 0.25, 0.0],
        [0.0, 0.375, 0.25],
        [0.0, 0.0, 0.0],
    ])
    return DgpSpec(
        n_treatments=3,
        beta=beta,
        transition=transition,
        eps_sd=1.0,
        seed=seed,
        name="two-link-ladder",
    )


def no_stayer_spec(time_varying=True, seed=0):
    """Binary panel where every unit moves.

    The untreated growth is 0.5 in both strata (the mover composition of
    the two directions differs, so a stratum-varying growth would leak
    into the pooled coefficient); effects vary by period or by stratum.
    """
    beta = np.zeros((2, 2, 2))
    beta[0, :, 0] = (0.0, 0.5)
    beta[0, :, 1] = (0.25, 0.75)
    if time_varying:
        beta[1, :, 0] = beta[0, :, 0] + (1.5, 0.75)
        beta[1, :, 1] = beta[0, :, 1] + (1.5, 0.75)
    else:
        beta[1, :, 0] = beta[0, :, 0] + 2.0
        beta[1, :, 1] = beta[0, :, 1] + 0.5
    transition = np.array([
        [[0.0, 0.5], [0.5, 0.0]],
        [[0.0, 0.25], [0.75, 0.0]],
    ])
    return DgpSpec(
        n_treatments=2,
        beta=beta,
        transition=transition,
        x_values=(0, 1),
        x_probs=(0.5, 0.5),
        eps_sd=1.0,
        seed=seed,
        name="no-stayers",
    )


def t3_spec(seed=0):
    """Three periods, binary treatment, constant unit effect of 1."""
    beta = np.array([
        [0.0, 0.4, 0.9],
        [1.0, 1.4, 1.9],
    ])
    transition = np.array([[0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.2]])
    return DgpSpec(
        n_treatments=2,
        beta=beta,
        transition=transition,
        n_periods=3,
        eps_sd=1.0,
        seed=seed,
        name="three-period",
    )


def ceh_violating_spec(seed=0):
    """Binary spec whose mover effect depends on the origin.

    The carryover gives in-movers a period-1 effect of 1.7 and out-movers
    1.4; with sixty percent of movers going in, the mover effect is 1.58.
    """
    carryover = np.array([[0.0, 0.7], [-0.4, 0.0]])
    transition = np.array([[0.3, 0.3], [0.2, 0.2]])
    return DgpSpec(
        n_treatments=2,
        beta=np.array([[0.0, 0.5], [1.0, 1.5]]),
        transition=transition,
        carryover=carryover,
        eps_sd=1.0,
        seed=seed,
        name="origin-dependent",
    )


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260825)
