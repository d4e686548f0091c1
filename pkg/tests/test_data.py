import numpy as np
import pytest

from ddrom.data import (
    DataSet,
    ExperimentConfig,
    check_rank,
    disturbance_cap,
    load_dataset,
    run_experiment,
    save_dataset,
    stacked_data,
)
from ddrom.system import Box, PlantModel


def casestudy_data(seed=1, amp=50.0):
    return run_experiment(PlantModel.casestudy(), ExperimentConfig(300, Box.symmetric(amp, 2), seed))


def test_zero_experiment():
    plant = PlantModel(np.eye(2) * 0.5, np.ones((2, 1)), 0.0)
    ds = run_experiment(plant, ExperimentConfig(5, Box.symmetric(0.0, 1), 0, "zero"))
    for M in (ds.X, ds.U, ds.X_plus):
        np.testing.assert_array_equal(M, 0.0)


def test_disturbance_cap_values():
    np.testing.assert_array_equal(disturbance_cap(0.0014, 300, 6), 5.88e-4 * np.eye(6))
    np.testing.assert_array_equal(disturbance_cap(0.0, 10, 3), np.zeros((3, 3)))
    np.testing.assert_array_equal(disturbance_cap(1.0, 1, 2), np.eye(2))
    with pytest.raises(ValueError):
        disturbance_cap(1.0, 0, 2)


def test_experiment_shapes_and_shift():
    ds = casestudy_data()
    assert ds.X.shape == ds.X_plus.shape == (6, 300) and ds.U.shape == (2, 300)
    np.testing.assert_array_equal(ds.X_plus[:, :-1], ds.X[:, 1:])
    np.testing.assert_array_equal(ds.Delta, disturbance_cap(0.0014, 300, 6))


def test_oracle_dynamics_and_cap_chain():
    plant = PlantModel.casestudy()
    ds = casestudy_data()
    resid = ds.X_plus - plant.A @ ds.X - plant.B @ ds.U - ds.W_true
    assert np.max(np.abs(resid)) <= 1e-10
    WW = ds.W_true @ ds.W_true.T
    total = float(np.sum(ds.W_true**2))
    assert np.linalg.eigvalsh(total * np.eye(6) - WW)[0] >= -1e-10
    assert np.linalg.eigvalsh(ds.Delta - total * np.eye(6))[0] >= -1e-10
    assert np.all(np.linalg.norm(ds.W_true, axis=0) <= ds.eps)


def test_stacked_data():
    ds = DataSet(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros((1, 2)), np.zeros((2, 2)), 0.0, np.zeros((2, 2)))
    np.testing.assert_array_equal(stacked_data(ds), [[0, 0], [1, 0], [0, 1]])
    cs = casestudy_data()
    H = stacked_data(cs)
    assert H.shape == (8, 300)
    np.testing.assert_array_equal(H[:2], cs.U)
    np.testing.assert_array_equal(H[2:], cs.X)


def test_rank_check():
    ds = casestudy_data()
    assert check_rank(ds) == (8, True)
    zero_u = DataSet(ds.X, np.zeros_like(ds.U), ds.X_plus, ds.eps, ds.Delta)
    rank, ok = check_rank(zero_u)
    assert rank <= 6 and not ok


def test_rank_minimal_horizon_generic(rng):
    X, U = rng.normal(size=(6, 8)), rng.normal(size=(2, 8))
    ds = DataSet(X, U, rng.normal(size=(6, 8)), 0.0, np.zeros((6, 6)))
    assert check_rank(ds)[1]


def test_rank_invariant_under_column_permutation(rng):
    ds = casestudy_data()
    perm = rng.permutation(ds.T)
    shuffled = DataSet(ds.X[:, perm], ds.U[:, perm], ds.X_plus[:, perm], ds.eps, ds.Delta)
    assert check_rank(shuffled) == check_rank(ds)


def test_short_horizon_rejected():
    with pytest.raises(ValueError):
        run_experiment(PlantModel.casestudy(), ExperimentConfig(7, Box.symmetric(1.0, 2)))


def test_determinism():
    a, b = casestudy_data(3), casestudy_data(3)
    assert a.digest() == b.digest()
    np.testing.assert_array_equal(a.W_true, b.W_true)


def test_dataset_is_read_only():
    ds = casestudy_data()
    with pytest.raises(ValueError):
        ds.X[0, 0] = 1.0


def test_save_load_roundtrip(tmp_path):
    ds = casestudy_data()
    save_dataset(ds, tmp_path / "plain")
    assert not (tmp_path / "plain" / "W_true.csv").exists()
    back = load_dataset(tmp_path / "plain")
    for a, b in ((ds.X, back.X), (ds.U, back.U), (ds.X_plus, back.X_plus), (ds.Delta, back.Delta)):
        np.testing.assert_array_equal(a, b)
    assert back.W_true is None and back.eps == ds.eps

    save_dataset(ds, tmp_path / "oracle", oracle=True)
    back = load_dataset(tmp_path / "oracle", oracle=True)
    np.testing.assert_array_equal(back.W_true, ds.W_true)
    assert load_dataset(tmp_path / "oracle").W_true is None
