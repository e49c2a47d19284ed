import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from koopman_boxqp.condensing import build_prediction_stack
from koopman_boxqp.koopman import (
    KoopmanModel,
    LiftSpec,
    RankDeficientError,
    SnapshotSet,
    edmd_objective,
    fit_edmd,
    lift,
    one_step_rms,
    predict,
    sample_rbf_centers,
)


def test_rbf_zero_at_center():
    c = np.array([[0.3, -0.2], [1.0, 1.0]])
    psi = lift(c[0], LiftSpec(c, 2))
    assert psi[2] == 0.0
    assert_allclose(psi[:2], c[0])


def test_rbf_zero_at_unit_radius():
    spec = LiftSpec(np.zeros((1, 2)), 2)
    assert lift(np.array([1.0, 0.0]), spec)[2] == pytest.approx(0.0, abs=1e-15)


def test_rbf_value_at_radius_e():
    spec = LiftSpec(np.zeros((1, 3)), 3)
    x = np.array([0.0, math.e, 0.0])
    assert lift(x, spec)[3] == pytest.approx(math.e**2, rel=1e-14)


def test_lift_batch_matches_rows():
    rng = np.random.default_rng(0)
    spec = LiftSpec(sample_rbf_centers(7, 3, seed=1), 3)
    X = rng.standard_normal((5, 3))
    batch = lift(X, spec)
    for i in range(5):
        assert_allclose(batch[i], lift(X[i], spec), rtol=1e-12)
    # brute-force reference for one coordinate
    r = np.linalg.norm(X[2] - spec.centers[4])
    assert batch[2, 3 + 4] == pytest.approx(r * r * math.log(r), rel=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10), st.integers(0, 2**32 - 1))
def test_embedded_state_block_is_identity(n_x, n_rbf, seed):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-1, 1, (n_rbf, n_x))
    spec = LiftSpec(centers, n_x)
    x = rng.standard_normal(n_x)
    C = np.eye(n_x, spec.n_psi)
    assert np.array_equal(C @ lift(x, spec), x)


def test_centers_deterministic_and_bounded():
    a = sample_rbf_centers(50, 4, seed=3)
    b = sample_rbf_centers(50, 4, seed=3)
    c = sample_rbf_centers(50, 4, seed=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.min() >= -1 and a.max() <= 1


def test_centers_per_coordinate_bounds():
    c = sample_rbf_centers(100, 2, bounds=[[0, 1], [5, 6]], seed=0)
    assert c[:, 0].min() >= 0 and c[:, 0].max() <= 1
    assert c[:, 1].min() >= 5 and c[:, 1].max() <= 6


def test_fit_scalar_linear_system_exact():
    x = np.array([0.3, -1.2, 0.7, 2.0])
    u = np.array([1.0, 0.5, -0.4, 0.0])
    data = SnapshotSet(x[:, None], u[:, None], (0.5 * x + u)[:, None])
    m = fit_edmd(data, LiftSpec.identity(1), ridge=0.0)
    assert m.A[0, 0] == pytest.approx(0.5, abs=1e-10)
    assert m.B[0, 0] == pytest.approx(1.0, abs=1e-10)


def test_fit_recovers_lifted_linear_system():
    rng = np.random.default_rng(5)
    n_x, n_u = 3, 2
    A = rng.standard_normal((n_x, n_x)) * 0.4
    B = rng.standard_normal((n_x, n_u))
    X = rng.standard_normal((200, n_x))
    U = rng.standard_normal((200, n_u))
    data = SnapshotSet(X, U, X @ A.T + U @ B.T)
    m = fit_edmd(data, LiftSpec.identity(n_x), ridge=0.0)
    assert_allclose(m.A, A, atol=1e-8)
    assert_allclose(m.B, B, atol=1e-8)


def test_fit_is_stationary_against_perturbations():
    rng = np.random.default_rng(6)
    X = rng.uniform(-1, 1, (300, 2))
    U = rng.uniform(-1, 1, (300, 1))
    Xp = np.column_stack([np.sin(X[:, 0]) + 0.1 * U[:, 0], X[:, 0] * X[:, 1]])
    spec = LiftSpec(sample_rbf_centers(5, 2, seed=0), 2)
    data = SnapshotSet(X, U, Xp)
    m = fit_edmd(data, spec, ridge=0.0)
    J = edmd_objective(m, data)
    for _ in range(20):
        d = rng.standard_normal(m.A.shape) * 1e-3
        pert = KoopmanModel(m.A + d, m.B, spec)
        assert edmd_objective(pert, data) >= J
    # finite-difference gradient of J with respect to A vanishes at the fit
    i, j, h = 3, 1, 1e-5
    Ap, Am = m.A.copy(), m.A.copy()
    Ap[i, j] += h
    Am[i, j] -= h
    g = (edmd_objective(KoopmanModel(Ap, m.B, spec), data) - edmd_objective(KoopmanModel(Am, m.B, spec), data)) / (2 * h)
    assert abs(g) <= 1e-6 * max(1.0, J)


def test_fit_objective_monotone_in_ridge():
    rng = np.random.default_rng(7)
    X = rng.uniform(-1, 1, (100, 2))
    U = rng.uniform(-1, 1, (100, 1))
    data = SnapshotSet(X, U, np.tanh(X) + U)
    spec = LiftSpec(sample_rbf_centers(6, 2, seed=2), 2)
    Js = [edmd_objective(fit_edmd(data, spec, ridge=r), data) for r in (1.0, 1e-1, 1e-2, 1e-4, 1e-8)]
    assert all(a >= b - 1e-9 * a for a, b in zip(Js, Js[1:]))


def test_fit_rank_deficient_reports_singular_value():
    X = np.ones((10, 2))  # identical columns -> rank deficient regressor
    data = SnapshotSet(X, np.zeros((10, 1)), X)
    with pytest.raises(RankDeficientError) as err:
        fit_edmd(data, LiftSpec.identity(2), ridge=0.0)
    assert err.value.smallest_singular_value >= 0.0


def test_fit_warns_when_underdetermined():
    rng = np.random.default_rng(0)
    data = SnapshotSet(rng.standard_normal((2, 3)), rng.standard_normal((2, 1)), rng.standard_normal((2, 3)))
    with pytest.warns(UserWarning):
        fit_edmd(data, LiftSpec.identity(3), ridge=1e-3)


def test_fit_chunking_is_invisible():
    rng = np.random.default_rng(8)
    X = rng.uniform(-1, 1, (97, 2))
    U = rng.uniform(-1, 1, (97, 1))
    data = SnapshotSet(X, U, np.sin(X) + U)
    spec = LiftSpec(sample_rbf_centers(4, 2, seed=0), 2)
    a = fit_edmd(data, spec, ridge=1e-8, chunk=10)
    b = fit_edmd(data, spec, ridge=1e-8, chunk=1000)
    assert_allclose(a.A, b.A, rtol=1e-9, atol=1e-10)


def test_predict_identity_dynamics_constant():
    spec = LiftSpec(sample_rbf_centers(3, 2, seed=0), 2)
    m = KoopmanModel(np.eye(5), np.zeros((5, 1)), spec)
    x0 = np.array([0.2, -0.4])
    assert_allclose(predict(m, x0, np.zeros(6)), np.tile(x0, (6, 1)))


def test_predict_single_step():
    rng = np.random.default_rng(9)
    spec = LiftSpec(sample_rbf_centers(3, 2, seed=0), 2)
    m = KoopmanModel(rng.standard_normal((5, 5)), rng.standard_normal((5, 2)), spec)
    x0, u0 = rng.standard_normal(2), rng.standard_normal(2)
    assert_allclose(predict(m, x0, u0[None, :])[0], m.C @ (m.A @ lift(x0, spec) + m.B @ u0), rtol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_predict_matches_prediction_stack(seed):
    rng = np.random.default_rng(seed)
    spec = LiftSpec(sample_rbf_centers(4, 3, seed=seed), 3)
    m = KoopmanModel(rng.standard_normal((7, 7)) * 0.3, rng.standard_normal((7, 2)), spec)
    x0 = rng.standard_normal(3)
    U = rng.standard_normal((6, 2))
    stack = build_prediction_stack(m, 6)
    stacked = stack.E @ lift(x0, spec) + stack.F @ U.reshape(-1)
    assert_allclose(predict(m, x0, U).reshape(-1), stacked, rtol=1e-12, atol=1e-12)


def test_one_step_rms_beats_trivial_on_smooth_system():
    rng = np.random.default_rng(10)
    X = rng.uniform(-1, 1, (500, 2))
    U = rng.uniform(-1, 1, (500, 1))
    data = SnapshotSet(X, U, 0.9 * X + 0.1 * np.sin(3 * X) + 0.2 * U)
    train, hold = data.split_holdout(0.1)
    assert len(hold) == 50
    m = fit_edmd(train, LiftSpec(sample_rbf_centers(20, 2, seed=0), 2))
    assert one_step_rms(m, hold) < one_step_rms(m, hold, trivial=True)


def test_model_json_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    spec = LiftSpec(sample_rbf_centers(3, 2, seed=0), 2)
    m = KoopmanModel(rng.standard_normal((5, 5)), rng.standard_normal((5, 1)), spec, 1e-8, 42)
    m.save(tmp_path / "m.json")
    m2 = KoopmanModel.load(tmp_path / "m.json")
    assert np.array_equal(m2.A, m.A) and np.array_equal(m2.B, m.B)
    assert np.array_equal(m2.lift.centers, m.lift.centers)
    assert m2.seed == 42 and m2.ridge == 1e-8


@pytest.mark.parametrize("name", ["snap.csv", "snap.csv.gz"])
def test_snapshot_csv_roundtrip(tmp_path, name):
    rng = np.random.default_rng(12)
    d = SnapshotSet(rng.standard_normal((4, 3)), rng.standard_normal((4, 2)), rng.standard_normal((4, 3)))
    d.to_csv(tmp_path / name)
    d2 = SnapshotSet.from_csv(tmp_path / name)
    assert np.array_equal(d2.X, d.X) and np.array_equal(d2.U, d.U) and np.array_equal(d2.Xplus, d.Xplus)


def test_snapshot_rejects_nonfinite_and_mismatch():
    with pytest.raises(ValueError):
        SnapshotSet(np.ones((2, 1)), np.ones((3, 1)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        SnapshotSet(np.array([[np.nan]]), np.ones((1, 1)), np.ones((1, 1)))
