import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmst_tmle.core_data import (
    DataValidationError,
    SubjectRecord,
    encode_counting,
    expand_long,
    read_csv,
    reconstruct,
    risk_indicators,
    validate_dataset,
)

from helpers import hand_dataset, make_dataset


def _raw(**over):
    base = [{"id": "a", "w": (0.1,), "a": 1, "delta": 1, "t_tilde": 2},
            {"id": "b", "w": (0.2,), "a": 0, "delta": 0, "t_tilde": 3}]
    base[0].update(over)
    return base


def test_validate_builds_dataset():
    data = validate_dataset(_raw(), k=3)
    assert data.n == 2 and data.p == 1 and data.k_max == 3
    assert data.t_tilde.tolist() == [2, 3]


def test_k_defaults_to_largest_time():
    assert validate_dataset(_raw()).k_max == 3


@pytest.mark.parametrize("over, fragment", [
    ({"a": 2}, "arm must be 0 or 1"),
    ({"delta": 5}, "event indicator"),
    ({"t_tilde": -1}, "time must be >=0"),
    ({"t_tilde": 0}, "event time must be >=1"),
    ({"t_tilde": 1.5}, "not an integer"),
    ({"w": (float("nan"),)}, "non-finite covariate"),
    ({"w": (1.0, 2.0)}, "expected 2 covariates, got 1"),
    ({"id": "b"}, "duplicate id"),
])
def test_validation_errors(over, fragment):
    with pytest.raises(DataValidationError) as err:
        validate_dataset(_raw(**over), k=3)
    assert any(fragment in e for e in err.value.errors)


def test_time_beyond_k_and_missing_arm_all_reported():
    raw = [{"id": 1, "w": (), "a": 1, "delta": 1, "t_tilde": 9}]
    with pytest.raises(DataValidationError) as err:
        validate_dataset(raw, k=3)
    msgs = " | ".join(err.value.errors)
    assert "exceeds K=3" in msgs and "arm 0 has no subjects" in msgs


def test_empty_input_rejected():
    with pytest.raises(DataValidationError):
        validate_dataset([])


def test_counting_encoding_positions():
    # L_2 sits at position 3, R_1 at position 2
    assert encode_counting(SubjectRecord(0, (), 1, 1, 2), 3).tolist() == [0, 0, 0, 1, 0, 0]
    assert encode_counting(SubjectRecord(0, (), 1, 0, 1), 3).tolist() == [0, 0, 1, 0, 0, 0]
    # censored at K: administratively censored, nothing jumps
    assert encode_counting(SubjectRecord(0, (), 1, 0, 3), 3).sum() == 0


def test_risk_indicators_event_at_two():
    i_ind, j_ind = risk_indicators(encode_counting(SubjectRecord(0, (), 1, 1, 2), 3))
    assert i_ind[1:].tolist() == [1, 1, 0]
    assert j_ind[1:].tolist() == [1, 0, 0]


def test_long_form_rows_for_hand_data():
    long = expand_long(hand_dataset())
    # event at t contributes t rows, censoring at t < K contributes t+1 rows
    expected = [1, 2, 3, 3, 1, 1, 2, 3]
    assert np.bincount(long.subject).tolist() == expected


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans(), st.integers(0, 1)),
                min_size=2, max_size=30))
def test_long_form_round_trip(rows):
    k = 6
    t = [r[0] for r in rows]
    d = [int(r[1] and r[0] >= 1) for r in rows]
    a = [r[2] for r in rows]
    data = make_dataset(t, d, a, k=k)
    delta, t_back = reconstruct(expand_long(data), data.n)
    assert delta.tolist() == d
    assert t_back.tolist() == t


def test_read_csv(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("id,arm,time,event,age\n1,1,2,1,50\n2,0,3,0,61\n")
    data = read_csv(path)
    assert data.covariate_names == ("age",)
    assert data.w[:, 0].tolist() == [50.0, 61.0]


def test_read_csv_missing_column(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("id,arm,time\n1,1,2\n")
    with pytest.raises(DataValidationError, match="missing column"):
        read_csv(path)


def test_subset_relabel_makes_ids_unique():
    data = hand_dataset()
    sub = data.subset(np.array([0, 0, 5]), relabel=True)
    assert len(set(sub.ids)) == 3
    assert sub.t_tilde.tolist() == [1, 1, 1]
