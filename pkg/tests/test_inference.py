import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sshp.inference import FittedModel, complete_unobserved, fit, prox_matrix, prox_vector
from sshp.model import AssignmentSchedule, Components, Dataset, HyperParams, init_parameters
from sshp.simulation import SyntheticConfig, generate_synthetic, sample_sequence


def test_prox_matrix_examples():
    assert np.array_equal(prox_matrix(np.zeros((3, 2)), 1.0), np.zeros((3, 2)))
    np.testing.assert_allclose(prox_matrix(np.eye(2), 0.5), 0.5 * np.eye(2), atol=1e-12)
    r1 = 0.5 * np.outer([1, 0], [0, 1])
    np.testing.assert_allclose(prox_matrix(r1, 1.0), 0.0, atol=1e-12)
    neg = np.array([[1.0, -2.0], [0.5, 0.3]])
    assert prox_matrix(neg, 0.0, clamp_nonneg=True)[0, 1] == 0.0
    assert prox_matrix(neg, 0.0, clamp_nonneg=False)[0, 1] == -2.0


def test_prox_vector_examples():
    assert prox_vector([0.5], "c")[0] == 1.0
    assert prox_vector([1.2], "b")[0] == 1 - 1e-6
    assert prox_vector([-3.0], "v")[0] == 1e-6
    assert prox_vector([-7.5], "p")[0] == -7.5


mats = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-50, 50))


@settings(max_examples=50, deadline=None)
@given(mats, st.floats(0, 20))
def test_prox_matrix_singular_values(mat, rho):
    out = prox_matrix(mat, rho, clamp_nonneg=False)
    before = np.linalg.svd(mat, compute_uv=False)
    after = np.linalg.svd(out, compute_uv=False)
    assert np.all(after <= np.maximum(before - rho, 0.0) + 1e-8 * (1 + before.max()))
    np.testing.assert_allclose(prox_matrix(mat, 0.0, clamp_nonneg=False), mat)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-10, 10)), st.sampled_from(["c", "p", "b", "v"]))
def test_prox_vector_idempotent(vec, name):
    once = prox_vector(vec, name)
    np.testing.assert_array_equal(prox_vector(once, name), once)


def test_completion_keeps_observed_and_fills_low_rank():
    rng = np.random.default_rng(0)
    truth = np.outer(rng.uniform(1, 2, 12), rng.uniform(1, 2, 6))
    obs = rng.uniform(size=truth.shape) > 0.2
    start = np.where(obs, truth, 0.3)
    out = complete_unobserved(start, obs, clamp_nonneg=True)
    np.testing.assert_array_equal(out[obs], truth[obs])
    assert np.abs(out - truth)[~obs].mean() < 0.5 * np.abs(start - truth)[~obs].mean()


@pytest.fixture(scope="module")
def small_course():
    cfg = SyntheticConfig(U=6, N=3, seed=2, mask_fraction=0.0, structure="factor")
    return generate_synthetic(cfg).dataset


def _hyper(**kw):
    base = dict(beta=1.0, s=1.0, gamma0=100.0, eta=2.0, rho=1.0, max_iter=40)
    base.update(kw)
    return HyperParams(**base)


def test_fit_trace_monotone_and_feasible(small_course):
    init = init_parameters(small_course.U, small_course.N, seed=0, s=1.0)
    fm = fit(small_course, _hyper(), init)
    tr = np.array(fm.loss_trace)
    assert np.all(np.isfinite(tr))
    assert np.all(np.diff(tr) <= 1e-12 * np.abs(tr[:-1]))
    d = np.array([a.relative_deadline(1.0) for a in small_course.assignments])
    fm.params.check(d)


def test_fit_deterministic(small_course):
    init = init_parameters(small_course.U, small_course.N, seed=0, s=1.0)
    a = fit(small_course, _hyper(max_iter=10), init)
    b = fit(small_course, _hyper(max_iter=10), init)
    assert a.to_dict() == b.to_dict()


def test_huge_rho_zeroes_matrices(small_course):
    init = init_parameters(small_course.U, small_course.N, seed=0, s=1.0)
    fm = fit(small_course, _hyper(rho=1e12, max_iter=5), init)
    for k in ("A", "Gh", "Go", "Gd", "M"):
        np.testing.assert_allclose(getattr(fm.params, k), 0.0, atol=1e-9)


def test_ablated_block_zeroed_and_flagged(small_course):
    init = init_parameters(small_course.U, small_course.N, seed=0, s=1.0)
    fm = fit(small_course, _hyper(max_iter=5), init, Components.ablate("d"))
    assert np.all(fm.params.Gd == 0.0)
    assert fm.to_dict()["ablated"] == ["deadline"]


def test_model_json_round_trip(small_course, tmp_path):
    init = init_parameters(small_course.U, small_course.N, seed=0, s=1.0)
    fm = fit(small_course, _hyper(max_iter=3), init)
    fm.save(tmp_path / "m.json")
    back = FittedModel.load(tmp_path / "m.json")
    assert back.to_dict() == fm.to_dict()


def test_fit_rejects_empty_data():
    ds = Dataset(("u",), (AssignmentSchedule("a", 0.0, 80.0),), {}, {}, 100.0)
    with pytest.raises(ValueError):
        fit(ds, _hyper(), init_parameters(1, 1, s=1.0))


MEANS = {"A": (0.4, 0.4), "Gh": (0.5, 0.5), "Go": (5, 5), "Gd": (15, 15), "M": (0, 0), "v": (20, 20), "b": (0.5, 0.5), "p": (6, 6), "c": (1.2, 1.2)}
# three times the reference parameter RMSEs, as in the desk-scale acceptance
BAND = {"A": 0.15, "Gh": 0.48, "M": 7.92, "Gd": 4.95, "Go": 3.24}


@pytest.fixture(scope="module")
def single_pair_fit():
    truth = init_parameters(1, 1, s=1.0, init_config=MEANS)
    seq = sample_sequence(truth.pair(0, 0, 80.0), 0.0, 100.0, seed=0, ids=("u", "a"))
    ds = Dataset(("u",), (AssignmentSchedule("a", 0.0, 80.0),), {("u", "a"): seq}, {}, 100.0)
    return truth, fit(ds, _hyper(max_iter=1000), init_parameters(1, 1, seed=1, s=1.0))


@pytest.mark.parametrize("k", ["A", "Gh", "M", "Go"])
def test_single_pair_round_trip(single_pair_fit, k):
    truth, fm = single_pair_fit
    assert abs(getattr(fm.params, k)[0, 0] - getattr(truth, k)[0, 0]) < BAND[k]


@pytest.mark.xfail(strict=True, reason="deadline weight is not identified: the likelihood grows without bound as v grows with an event at the support end")
def test_single_pair_round_trip_deadline_weight(single_pair_fit):
    truth, fm = single_pair_fit
    assert abs(fm.params.Gd[0, 0] - truth.Gd[0, 0]) < BAND["Gd"]
