import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sshp.model import (
    AssignmentSchedule,
    DataError,
    Dataset,
    EventSequence,
    init_parameters,
    load_dataset,
    split_dataset,
    write_dataset,
)


def _write(tmp_path, events, assignments="assignment_id,open_time_hours,deadline_scaled,label\nA1,0,3,hw1\n"):
    (tmp_path / "assignments.csv").write_text(assignments)
    (tmp_path / "events.csv").write_text("student_id,assignment_id,timestamp_hours\n" + events)
    return tmp_path / "events.csv", tmp_path / "assignments.csv"


def test_load_three_events(tmp_path):
    ev, asg = _write(tmp_path, "u1,A1,1.0\nu1,A1,2.5\nu1,A1,4.0\n")
    ds = load_dataset(ev, asg, course_end=100.0)
    assert (ds.U, ds.N) == (1, 1)
    assert len(ds.sequences[("u1", "A1")]) == 3


def test_unknown_assignment_names_row(tmp_path):
    ev, asg = _write(tmp_path, "u1,A1,1.0\nu1,B9,2.0\n")
    with pytest.raises(DataError, match="row 3"):
        load_dataset(ev, asg)


def test_duplicate_timestamps_collapse(tmp_path):
    ev, asg = _write(tmp_path, "u1,A1,2.0\nu1,A1,1.0\nu1,A1,2.0\n")
    seq = load_dataset(ev, asg).sequences[("u1", "A1")]
    assert len(seq) == 2
    assert np.all(np.diff(seq.timestamps) > 0)


@pytest.mark.parametrize("row", ["u1,A1,abc\n", "u1,A1,-1\n"])
def test_bad_timestamp_rejected(tmp_path, row):
    ev, asg = _write(tmp_path, row)
    with pytest.raises(DataError):
        load_dataset(ev, asg)


def test_deadline_before_opening_rejected(tmp_path):
    ev, asg = _write(tmp_path, "u1,A1,50\n", "assignment_id,open_time_hours,deadline_scaled,label\nA1,48,1,x\n")
    with pytest.raises(DataError, match="deadline"):
        load_dataset(ev, asg, s=24.0)


def test_timestamps_relative_to_opening(tmp_path):
    ev, asg = _write(tmp_path, "u1,A1,30\n", "assignment_id,open_time_hours,deadline_scaled,label\nA1,24,3,x\n")
    seq = load_dataset(ev, asg, course_end=100.0, s=24.0).sequences[("u1", "A1")]
    assert seq.timestamps[0] == pytest.approx(6.0)
    assert seq.window_end == pytest.approx(76.0)


def test_round_trip(tmp_path):
    ev, asg = _write(tmp_path, "u1,A1,1.0\nu2,A1,2.0\nu2,A1,3.25\n")
    ds = load_dataset(ev, asg, course_end=50.0)
    paths = write_dataset(ds, tmp_path / "out")
    again = load_dataset(paths["events"], paths["assignments"], course_end=50.0)
    assert again.sequences == ds.sequences
    assert again.assignments == ds.assignments


def _grid(n_pairs=10, k=10):
    seqs = {}
    for i in range(n_pairs):
        q = EventSequence(f"u{i}", "A", np.arange(1.0, k + 1.0), 0.0, 20.0)
        seqs[q.pair] = q
    return Dataset(tuple(f"u{i}" for i in range(n_pairs)), (AssignmentSchedule("A", 0.0, 30.0),), seqs, {}, 20.0)


def test_split_counts():
    sp = split_dataset(_grid(), 0.2, 0.7, seed=3)
    assert len(sp.complete_test) == 2
    assert all(len(q) == 7 for q in sp.train.sequences.values())
    assert all(len(t) == 3 for t in sp.partial_test.values())


def test_split_zero_holdout_and_determinism():
    assert split_dataset(_grid(), 0.0, 0.7).complete_test == {}
    a, b = split_dataset(_grid(), 0.3, 0.5, seed=9), split_dataset(_grid(), 0.3, 0.5, seed=9)
    assert set(a.complete_test) == set(b.complete_test)


def test_split_rejects_empty_train():
    ds = _grid(2)
    with pytest.raises(ValueError):
        split_dataset(ds, 0.5, 0.7, holdout_pairs=list(ds.sequences))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 99.0), min_size=1, max_size=40, unique=True), st.floats(0.05, 1.0))
def test_split_preserves_events(times, frac):
    x = np.sort(np.array(times))
    q = EventSequence("u", "A", x, 0.0, 100.0)
    ds = Dataset(("u",), (AssignmentSchedule("A", 0.0, 200.0),), {q.pair: q}, {}, 100.0)
    sp = split_dataset(ds, 0.0, frac)
    head = sp.train.sequences[q.pair].timestamps
    tail = sp.partial_test.get(q.pair, np.zeros(0))
    assert np.array_equal(np.concatenate([head, tail]), x)
    if tail.size:
        assert head.max() < tail.min()


def test_init_shapes_and_constraints():
    st_ = init_parameters(2, 3, seed=1)
    assert st_.A.shape == (2, 3) and st_.c.shape == (2,)
    assert np.all(st_.A >= 0) and np.all(st_.Gd >= 0) and np.all(st_.c >= 1)
    again = init_parameters(2, 3, seed=1)
    assert all(np.array_equal(getattr(st_, k), getattr(again, k)) for k in st_.blocks())


def test_init_rejects_bad_range():
    with pytest.raises(ValueError):
        init_parameters(2, 2, init_config={"b": (0.5, 1.5)})
