"""Differenced mover regressions and their cell-mean decompositions."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from matekit.errors import (
    BadPeriodPair,
    NoMovers,
    NotBinary,
    RankDeficientDesign,
)
from matekit.moverreg import (
    MoverRegression,
    decompose_lemma1,
    decompose_prop1,
    diagnose_prop2,
    fit_mover_regression,
    pivoted_least_squares,
)
from matekit.simlab import generate, population_oracle

from conftest import two_link_spec, make_panel


def random_binary_panel(rng, n=None, p_cells=None, ensure_mover=True):
    n = int(rng.integers(50, 400)) if n is None else n
    p = rng.dirichlet(np.ones(4)) if p_cells is None else np.asarray(p_cells)
    cells = rng.choice(4, size=n, p=p)
    treat = np.column_stack([cells // 2, cells % 2])
    if ensure_mover and not (treat[:, 0] != treat[:, 1]).any():
        treat[0] = (0, 1)
    outcomes = np.column_stack([rng.normal(size=n), rng.normal(size=n)])
    return make_panel(treat, outcomes, n_treatments=2)


def ols_by_normal_equations(panel):
    """Independent coefficient oracle: solve X'X b = X'y directly."""
    dy = panel.outcomes[:, 1] - panel.outcomes[:, 0]
    dd1 = (panel.treatments[:, 1] == 1).astype(float) - (
        panel.treatments[:, 0] == 1
    ).astype(float)
    design = np.column_stack([np.ones(panel.n_units), dd1])
    coef = np.linalg.solve(design.T @ design, design.T @ dy)
    return coef[1]


def test_constant_effect_recovered_exactly():
    # movers 0 -> 1 gain 2.0 in period 1, stayers at 0 are flat
    treat = [[0, 1]] * 4 + [[0, 0]] * 4
    outcomes = [[1.0, 3.0]] * 4 + [[1.0, 1.0]] * 4
    fit = fit_mover_regression(make_panel(treat, outcomes))
    assert fit.beta[0] == pytest.approx(2.0, abs=1e-10)
    assert fit.tau == pytest.approx(0.0, abs=1e-10)


def test_no_movers_raises():
    panel = make_panel([[0, 0], [1, 1]], [[0.0, 1.0], [2.0, 2.5]])
    with pytest.raises(NoMovers):
        fit_mover_regression(panel)
    with pytest.raises(NoMovers):
        decompose_lemma1(panel)


def test_unused_treatment_column_is_rank_deficient():
    # nobody ever enters or leaves treatment 2
    treat = [[0, 1], [1, 0], [0, 0], [2, 2]]
    panel = make_panel(treat, np.zeros((4, 2)))
    with pytest.raises(RankDeficientDesign):
        fit_mover_regression(panel)


def test_multi_period_panel_rejected():
    panel = make_panel([[0, 1, 1]], [[0.0, 1.0, 2.0]])
    with pytest.raises(BadPeriodPair):
        fit_mover_regression(panel)


def test_pivoted_solver_names_redundant_column():
    design = np.column_stack([np.ones(5), np.arange(5.0), 2 * np.arange(5.0)])
    with pytest.raises(RankDeficientDesign, match=r"x[12]"):
        pivoted_least_squares(design, np.zeros(5), ["const", "x1", "x2"])


def test_lemma_identity_on_random_panels(rng):
    for _ in range(25):
        panel = random_binary_panel(rng)
        oracle = ols_by_normal_equations(panel)
        dec = decompose_lemma1(panel)
        assert abs(dec.beta - oracle) < 1e-10
        assert abs(fit_mover_regression(panel).beta[0] - oracle) < 1e-10
        assert 0.0 <= dec.omega <= 1.0


def test_lemma_omega_formula_from_shares():
    # 3 joiners, 1 leaver, 4 stayers
    treat = [[0, 1]] * 3 + [[1, 0]] + [[0, 0]] * 4
    rng = np.random.default_rng(1)
    panel = make_panel(treat, rng.normal(size=(8, 2)))
    dec = decompose_lemma1(panel)
    p, q = 3 / 8, 1 / 8
    expected = (p * (1 - p) + p * q) / (p * (1 - p) + q * (1 - q) + 2 * p * q)
    assert dec.omega == pytest.approx(expected, abs=1e-14)
    assert dec.p_plus == pytest.approx(p)
    assert (dec.n_in, dec.n_stay, dec.n_out) == (3, 4, 1)


def test_lemma_no_stayers_gives_half_weight(rng):
    panel = random_binary_panel(rng, n=120, p_cells=[0.0, 0.5, 0.5, 0.0])
    dec = decompose_lemma1(panel)
    assert dec.no_stayers
    assert dec.beta == pytest.approx(0.5 * (dec.d_in - dec.d_out), abs=1e-14)
    assert dec.beta == pytest.approx(ols_by_normal_equations(panel), abs=1e-10)


def test_lemma_one_sided_movers_degenerates_cleanly(rng):
    panel = random_binary_panel(rng, n=90, p_cells=[0.6, 0.4, 0.0, 0.0])
    dec = decompose_lemma1(panel)
    assert dec.omega == pytest.approx(1.0)
    assert dec.beta == pytest.approx(dec.d_in - dec.d_stay, abs=1e-12)
    assert dec.beta == pytest.approx(ols_by_normal_equations(panel), abs=1e-10)


def test_location_shift_moves_only_the_intercept(rng):
    panel = random_binary_panel(rng, n=200)
    shifted = make_panel(
        panel.treatments, panel.outcomes + np.array([0.0, 7.5]), n_treatments=2
    )
    base, moved = fit_mover_regression(panel), fit_mover_regression(shifted)
    assert moved.beta[0] == pytest.approx(base.beta[0], abs=1e-10)
    assert moved.tau == pytest.approx(base.tau + 7.5, abs=1e-10)


def test_outcome_scaling_scales_all_decomposition_parts(rng):
    panel = random_binary_panel(rng, n=200)
    scaled = make_panel(panel.treatments, 3.0 * panel.outcomes, n_treatments=2)
    base, big = decompose_lemma1(panel), decompose_lemma1(scaled)
    assert big.beta == pytest.approx(3.0 * base.beta, abs=1e-10)
    assert big.d_in == pytest.approx(3.0 * base.d_in, abs=1e-10)
    assert big.omega == pytest.approx(base.omega, abs=1e-14)


def test_prop1_weights_are_convex_and_reconstruct(rng):
    for _ in range(10):
        panel = random_binary_panel(rng, n=300)
        dec = decompose_prop1(panel)
        weights = [c.weight for c in dec.cells.values()]
        assert min(weights) >= 0.0
        assert sum(weights) == pytest.approx(1.0, abs=1e-12)
        assert dec.beta == pytest.approx(ols_by_normal_equations(panel), abs=1e-10)
        for cell in dec.cells.values():
            if cell.weight > 0:
                assert cell.feasible


def test_prop1_concentrates_on_joiners_without_treated_stayers():
    treat = [[0, 1]] * 5 + [[0, 0]] * 5
    rng = np.random.default_rng(2)
    panel = make_panel(treat, rng.normal(size=(10, 2)))
    dec = decompose_prop1(panel)
    assert dec.branch == "general"
    assert dec.cells[(1, +1)].weight == pytest.approx(1.0)
    assert dec.cells[(1, +1)].value == pytest.approx(dec.beta, abs=1e-12)


def test_prop1_no_stayer_branch_carries_both_attributions(rng):
    panel = random_binary_panel(rng, n=150, p_cells=[0.0, 0.6, 0.4, 0.0])
    dec = decompose_prop1(panel)
    assert dec.branch == "no_stayers"
    assert dec.matched_weights == {(1, +1): 0.5, (0, -1): 0.5}
    assert dec.crossed_weights == {(0, +1): 0.5, (1, -1): 0.5}
    assert dec.beta == pytest.approx(0.5 * (dec.d_in - dec.d_out), abs=1e-14)


def test_prop2_requires_three_treatments():
    panel = make_panel([[0, 1], [0, 0]], [[0.0, 1.0], [1.0, 1.0]])
    with pytest.raises(NotBinary):
        diagnose_prop2(panel)


def test_prop2_gaps_vanish_under_common_trends_and_constant_effects():
    # beta[j, t] = b_j + tau_t: every diagnostic gap is exactly zero in the
    # population; at this sample size each gap is a few cell means wide
    from matekit.simlab import DgpSpec

    b = np.array([0.0, 1.0, 2.5])
    tau = np.array([0.0, 0.7])
    spec = DgpSpec(
        n_treatments=3,
        beta=b[:, None] + tau[None, :],
        transition=np.full((3, 3), 1.0 / 9.0),
        eps_sd=1.0,
        seed=3,
        name="additive",
    )
    panel = generate(spec, 50_000)
    diag = diagnose_prop2(panel)
    assert diag.stayer_trend_gaps and diag.chain_sum_gaps
    bound = 5 * np.sqrt(9.0 / panel.n_units)  # cell means have sd ~ sqrt(9/N)
    for gap in diag.stayer_trend_gaps.values():
        assert abs(gap) < 2 * bound
    for gap in diag.chain_sum_gaps.values():
        assert abs(gap) < 4 * bound


def test_prop2_two_link_layout_splits_beta2_exactly():
    panel = generate(two_link_spec(), 4_000)
    diag = diagnose_prop2(panel)
    assert diag.two_link is not None
    two = diag.two_link
    assert diag.fit.beta[1] == pytest.approx(two.beta2, abs=1e-10)
    assert diag.fit.beta[0] == pytest.approx(two.beta1, abs=1e-10)
    assert two.noncausal == pytest.approx(2 * two.p_stay0 * two.stayer_gap, abs=1e-12)


def test_prop2_two_link_tracks_population_values():
    spec = two_link_spec()
    truth = population_oracle(spec).prop2_population()
    panel = generate(spec, 200_000, seed=17)
    two = diagnose_prop2(panel).two_link
    assert two.beta2 == pytest.approx(truth["beta2"], abs=0.05)
    assert two.noncausal == pytest.approx(truth["noncausal"], abs=0.05)


def test_prop2_missing_cells_reported_absent_not_zero():
    # no stayers at 2 and no movers into 0 or out of 2: the affected
    # stayer gaps and every chain-sum term are absent rather than zeroed
    panel = generate(two_link_spec(), 2_000)
    diag = diagnose_prop2(panel)
    assert set(diag.stayer_trend_gaps) == {(0, 1)}
    assert diag.chain_sum_gaps == {}


def test_estimator_wrapper_matches_function(rng):
    panel = random_binary_panel(rng, n=120)
    est = MoverRegression().fit(panel)
    assert est.beta_[0] == pytest.approx(fit_mover_regression(panel).beta[0])
    again = clone(est).fit(panel)
    assert again.beta_[0] == est.beta_[0]
    assert est.predict(panel).shape == (panel.n_units,)
    assert est.get_params() == {"include_stayers": True, "covariates": False}


def test_covariate_columns_enter_in_levels(rng):
    n = 300
    cells = rng.choice(4, size=n, p=[0.3, 0.25, 0.2, 0.25])
    treat = np.column_stack([cells // 2, cells % 2])
    x = rng.integers(0, 2, size=n)
    outcomes = np.column_stack(
        [rng.normal(size=n), rng.normal(size=n) + 0.5 * x]
    )
    panel = make_panel(treat, outcomes, x=x, n_treatments=2)
    fit = fit_mover_regression(panel, covariates=True)
    assert "x=1" in fit.columns
    assert fit.gamma is not None


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_lemma_identity_is_sample_algebra(seed):
    rng = np.random.default_rng(seed)
    panel = random_binary_panel(rng, n=int(rng.integers(10, 80)))
    dec = decompose_lemma1(panel)
    assert abs(dec.beta - ols_by_normal_equations(panel)) < 1e-10
