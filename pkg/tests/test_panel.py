"""Panel container: loading, validation, differencing, classification."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_almost_equal, assert_array_equal

from matekit.errors import (
    BadPeriodPair,
    BadTreatmentCode,
    ContinuousColumn,
    MatekitError,
    NonFiniteOutcome,
    TimeVaryingCovariate,
    UnbalancedPanel,
)
from matekit.panel import (
    PanelSchema,
    check_period_pair,
    check_treatment,
    classify_movers,
    first_difference,
    load_panel,
    panel_from_arrays,
    panel_from_dataframe,
    read_config,
)

from conftest import make_panel


def write_csv(path, rows, header="unit,period,treatment,outcome"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")


def test_load_panel_minimal_two_by_two(tmp_path):
    csv = tmp_path / "panel.csv"
    write_csv(csv, [
        "a,0,0,1.0", "a,1,1,3.0",
        "b,0,0,0.5", "b,1,0,0.7",
    ])
    panel = load_panel(csv)
    assert panel.n_units == 2
    assert panel.n_periods == 2
    assert panel.n_treatments == 2
    assert_array_equal(panel.treatments, [[0, 1], [0, 0]])
    assert_array_almost_equal(panel.outcomes, [[1.0, 3.0], [0.5, 0.7]])


def test_load_panel_reindexes_periods_ascending(tmp_path):
    csv = tmp_path / "panel.csv"
    write_csv(csv, [
        "u,2021,1,4.0", "u,2019,0,1.0",
        "v,2019,0,2.0", "v,2021,0,2.5",
    ])
    panel = load_panel(csv)
    assert panel.period_labels == (2019, 2021)
    assert_array_equal(panel.treatments[0], [0, 1])
    assert_array_almost_equal(panel.outcomes[0], [1.0, 4.0])


def test_load_panel_respects_column_mapping_and_reference(tmp_path):
    csv = tmp_path / "panel.csv"
    write_csv(csv, [
        "1,0,2,1.0,9", "1,1,3,2.0,9",
        "2,0,3,1.5,7", "2,1,3,1.8,7",
    ], header="id,year,plan,spend,zip")
    cfg = {
        "columns": {
            "unit": "id", "period": "year", "treatment": "plan",
            "outcome": "spend", "covariates": ["zip"],
        },
        "reference_treatment": 2,
    }
    panel = load_panel(csv, PanelSchema.from_config(cfg))
    # codes stay positional: J is inferred as max+1 and code 2 swaps with 0
    assert panel.n_treatments == 4
    assert panel.code_map == (2, 1, 0, 3)
    assert_array_equal(panel.treatments, [[0, 3], [3, 3]])
    assert panel.covariate_names == ("zip",)
    frame = panel.to_dataframe(PanelSchema.from_config(cfg))
    assert sorted(frame["plan"].unique()) == [2, 3]


def test_unbalanced_missing_period_rejected(tmp_path):
    csv = tmp_path / "panel.csv"
    write_csv(csv, ["a,0,0,1.0", "a,1,1,2.0", "b,0,0,1.0"])
    with pytest.raises(UnbalancedPanel):
        load_panel(csv)


def test_duplicate_observation_rejected():
    import pandas as pd

    df = pd.DataFrame({
        "unit": ["a", "a", "a", "b", "b"],
        "period": [0, 1, 1, 0, 1],
        "treatment": [0, 1, 1, 0, 0],
        "outcome": [1.0, 2.0, 2.0, 3.0, 3.5],
    })
    with pytest.raises(UnbalancedPanel):
        panel_from_dataframe(df)


def test_treatment_code_above_declared_count_rejected(tmp_path):
    csv = tmp_path / "panel.csv"
    write_csv(csv, ["a,0,0,1.0", "a,1,5,2.0", "b,0,1,0.1", "b,1,2,0.2"])
    with pytest.raises(BadTreatmentCode):
        load_panel(csv, PanelSchema(n_treatments=3))


def test_negative_treatment_code_rejected():
    with pytest.raises(BadTreatmentCode):
        make_panel([[0, -1], [0, 0]], np.zeros((2, 2)))


def test_nonfinite_outcome_rejected():
    with pytest.raises(NonFiniteOutcome):
        make_panel([[0, 1], [0, 0]], [[1.0, np.nan], [0.0, 0.0]])


def test_time_varying_covariate_rejected():
    import pandas as pd

    df = pd.DataFrame({
        "unit": ["a", "a", "b", "b"],
        "period": [0, 1, 0, 1],
        "treatment": [0, 1, 0, 0],
        "outcome": [1.0, 2.0, 3.0, 3.5],
        "x": [5, 6, 7, 7],
    })
    schema = PanelSchema(covariates=(("x", "discrete"),))
    with pytest.raises(TimeVaryingCovariate):
        panel_from_dataframe(df, schema)


def test_classify_movers_flags_and_cells():
    treat = [[0, 0], [0, 1], [1, 0], [1, 1], [0, 1], [1, 1]]
    panel = make_panel(treat, np.zeros((6, 2)))
    cls = classify_movers(panel)
    assert_array_equal(cls.is_mover, [False, True, True, False, True, False])
    assert cls.n_movers == 3
    assert cls.cell_counts[(0, 0)] == 1
    assert cls.cell_counts[(0, 1)] == 2
    assert cls.cell_counts[(1, 0)] == 1
    assert cls.cell_counts[(1, 1)] == 2


def test_mover_definition_any_change_with_three_periods():
    treat = [[0, 1, 0], [2, 2, 2], [0, 0, 1]]
    panel = make_panel(treat, np.zeros((3, 3)))
    cls = classify_movers(panel)
    assert_array_equal(cls.is_mover, [True, False, True])


def test_first_difference_values_and_zero_sum():
    panel = make_panel([[0, 1], [1, 1]], [[2.0, 5.0], [1.0, 1.5]])
    fd = first_difference(panel, 0, 1)
    assert fd.dy[0] == pytest.approx(3.0)
    assert_array_equal(fd.delta_d[0], [-1, 1])
    assert_array_equal(fd.delta_d[1], [0, 0])
    assert_array_equal(fd.delta_d.sum(axis=1), [0, 0])


def test_first_difference_rejects_degenerate_pair():
    panel = make_panel([[0, 1]], [[0.0, 1.0]])
    with pytest.raises(BadPeriodPair):
        first_difference(panel, 1, 1)
    with pytest.raises(BadPeriodPair):
        first_difference(panel, 1, 0)


def test_check_helpers_reject_out_of_range():
    panel = make_panel([[0, 1]], [[0.0, 1.0]])
    with pytest.raises(BadPeriodPair):
        check_period_pair(panel, 0, 2)
    with pytest.raises(BadTreatmentCode):
        check_treatment(panel, 2)
    with pytest.raises(BadTreatmentCode):
        check_treatment(panel, -1)


def test_stratum_index_groups_by_joint_value():
    panel = make_panel(
        [[0, 1]] * 4, np.zeros((4, 2)), x=["b", "a", "b", "a"]
    )
    codes, labels = panel.stratum_index()
    assert labels == [("a",), ("b",)]
    assert_array_equal(codes, [1, 0, 1, 0])


def test_stratum_index_rejects_continuous_columns():
    panel = panel_from_arrays(
        [[0, 1], [0, 0]], np.zeros((2, 2)),
        covariates=np.array([[1.5], [2.5]], dtype=object),
        covariate_names=("z",), covariate_kinds=("continuous",),
    )
    with pytest.raises(ContinuousColumn):
        panel.stratum_index(("z",))


def test_take_supports_bootstrap_resamples():
    panel = make_panel([[0, 1], [0, 0], [1, 0]], np.arange(6.0).reshape(3, 2))
    boot = panel.take([2, 2, 0])
    assert_array_equal(boot.treatments, [[1, 0], [1, 0], [0, 1]])
    assert boot.n_units == 3
    assert panel.n_units == 3  # source untouched


def test_covariate_accessors():
    panel = make_panel([[0, 1]], [[0.0, 1.0]], x=[3])
    assert panel.covariate_column("x")[0] == 3
    assert panel.covariate_matrix(["x"]).shape == (1, 1)
    with pytest.raises(KeyError):
        panel.covariate_column("missing")
    rec = panel.unit(0)
    assert rec.treatments == (0, 1)
    assert rec.covariates == {"x": 3}


def test_unit_relabeling_changes_no_aggregate():
    import pandas as pd

    rows = {
        "unit": ["u3", "u3", "u1", "u1", "u2", "u2"],
        "period": [0, 1, 0, 1, 0, 1],
        "treatment": [0, 1, 1, 1, 1, 0],
        "outcome": [0.0, 2.0, 1.0, 1.5, 3.0, 2.0],
    }
    base = panel_from_dataframe(pd.DataFrame(rows))
    relabeled = panel_from_dataframe(
        pd.DataFrame({**rows, "unit": ["z", "z", "a", "a", "m", "m"]})
    )
    for panel in (base, relabeled):
        cls = classify_movers(panel)
        assert cls.n_movers == 2
        assert first_difference(panel).dy.sum() == pytest.approx(1.5)


def test_missing_files_raise_data_errors(tmp_path):
    with pytest.raises(MatekitError):
        load_panel(tmp_path / "absent.csv")
    with pytest.raises(MatekitError):
        read_config(tmp_path / "absent.yaml")


def test_read_config_parses_yaml_and_json(tmp_path):
    y = tmp_path / "c.yaml"
    y.write_text("columns:\n  unit: id\nreference_treatment: 1\n")
    assert read_config(y)["reference_treatment"] == 1
    j = tmp_path / "c.json"
    j.write_text('{"columns": {"unit": "id"}}')
    assert read_config(j)["columns"]["unit"] == "id"


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    n=st.integers(1, 8),
    t=st.integers(2, 3),
)
def test_dataframe_round_trip_preserves_panel(seed, n, t):
    rng = np.random.default_rng(seed)
    treat = rng.integers(0, 3, size=(n, t))
    outcomes = rng.normal(size=(n, t)).round(6)
    x = rng.integers(0, 2, size=n)
    panel = make_panel(treat, outcomes, x=x, n_treatments=3)
    back = panel_from_dataframe(
        panel.to_dataframe(),
        PanelSchema(covariates=(("x", "discrete"),), n_treatments=3),
    )
    assert_array_equal(back.treatments, panel.treatments)
    assert_array_almost_equal(back.outcomes, panel.outcomes, decimal=12)
    assert_array_equal(
        np.asarray(back.covariates, dtype=int),
        np.asarray(panel.covariates, dtype=int),
    )


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12))
def test_treatment_indicator_changes_sum_to_zero(seed, n):
    rng = np.random.default_rng(seed)
    panel = make_panel(
        rng.integers(0, 4, size=(n, 2)), rng.normal(size=(n, 2)),
        n_treatments=4,
    )
    fd = first_difference(panel)
    assert_array_equal(fd.delta_d.sum(axis=1), np.zeros(n, dtype=int))
