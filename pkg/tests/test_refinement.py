import csv

import numpy as np
import pytest

from ddrom.certificate import Certificate, closeness_bound
from ddrom.refinement import (
    DemoGeometry,
    RomController,
    box_distance,
    check_bound,
    interface_input,
    reach_avoid_demo,
    run_paired,
    run_validation,
)
from ddrom.system import Box, DisturbanceSampler, PlantModel, RomModel

from conftest import MU, error_dynamics_rhs, random_instance

GP_REPORTED = np.array([[-3.6392, 4.6172, 1.4406, 0.40121, 0.3313, -0.86503],
                        [-0.67234, 2.1956, -2.4812, -2.1611, 0.54923, -0.78516]])
R_REPORTED = np.array([[0.5, 0, -0.375, -1.1625, -1.5359, -0.5551],
                       [0, 0.5, 1.125, 2.9374, 3.9216, 1.5898]]).T
E_REPORTED = np.array([[0.1324, -0.0735], [-0.5960, 1.4963]])
D_REPORTED = 1e-3 * np.array([[0.0404, 0.0573], [-0.2619, 0.5939]])


def cert_from(R, GP, E, D, P=None):
    n = R.shape[0]
    P = np.eye(n) if P is None else P
    lam = np.linalg.eigvalsh(P)
    return Certificate(R=R, P=P, alpha=float(lam[0]), kappa=0.5, rho=0.0, psi=0.0, Z=0.0, E=E, D=D, GP=GP, mu=MU,
                       eps=0.0, delta_max=0.0, xhat_max_sq=1.0, lam_max_P=float(lam[-1]), norm_K1=0.0,
                       norm_K2=0.0, norm_mismatch=0.0)


def test_interface_zero_matrices():
    cert = cert_from(np.ones((3, 2)), np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2)))
    np.testing.assert_array_equal(interface_input(cert, [1.0, 2, 3], [4.0, 5], [6.0, 7]), [0.0, 0.0])


def test_interface_on_range_of_R(rng):
    R, E = rng.normal(size=(4, 2)), rng.normal(size=(2, 2))
    cert = cert_from(R, rng.normal(size=(2, 4)), E, np.zeros((2, 2)))
    xh = rng.normal(size=2)
    np.testing.assert_allclose(interface_input(cert, R @ xh, xh, [3.0, -1.0]), E @ xh, atol=1e-12)


def test_interface_reported_matrices():
    cert = cert_from(R_REPORTED, GP_REPORTED, E_REPORTED, D_REPORTED)
    ones = np.ones(2)
    # on the range of R the feedback term vanishes and u is the row sums of E
    u = interface_input(cert, R_REPORTED @ ones, ones, np.zeros(2))
    np.testing.assert_allclose(u, [0.0589, 0.9003], atol=1e-12)
    # at x = 0 the feedback term -GP R 1 is present
    u0 = interface_input(cert, np.zeros(6), ones, np.zeros(2))
    ref = [sum(E_REPORTED[i]) - sum(GP_REPORTED[i, j] * R_REPORTED[j].sum() for j in range(6)) for i in range(2)]
    np.testing.assert_allclose(u0, ref, atol=1e-12)
    np.testing.assert_allclose(u0, [-2.118, 5.337], atol=1e-3)


def test_one_step_error_identity(rng):
    worst = 0.0
    for _ in range(100):
        n, m, nh = rng.integers(1, 9), rng.integers(1, 4), rng.integers(1, 4)
        mh = rng.integers(1, 4)
        A, B, Ah, Bh, cert = random_instance(rng, n, m, nh, mh)
        x, xh, uh, w = rng.normal(size=n), rng.normal(size=nh), rng.normal(size=mh), 0.1 * rng.normal(size=n)
        u = interface_input(cert, x, xh, uh)
        direct = A @ x + B @ u + w - cert.R @ (Ah @ xh + Bh @ uh)
        rhs = error_dynamics_rhs(A, B, Ah, Bh, cert, x, xh, uh, w)
        worst = max(worst, np.max(np.abs(direct - rhs)))
    assert worst <= 1e-10


def identity_reduction(rng):
    A = 0.5 * rng.normal(size=(2, 2))
    B = rng.normal(size=(2, 2))
    plant = PlantModel(A, B, 0.0)
    rom = RomModel(A.copy(), B.copy(), np.eye(2), Box.symmetric(5.0, 2), Box.symmetric(1.0, 2))
    cert = cert_from(np.eye(2), np.zeros((2, 2)), np.zeros((2, 2)), np.eye(2))
    return plant, rom, cert


@pytest.mark.parametrize("uh", [[0.0, 0.0], [0.3, -0.7]])
def test_identity_reduction_has_zero_mismatch(rng, uh):
    plant, rom, cert = identity_reduction(rng)
    ctrl = RomController("constant", rom.input_box, value=np.array(uh))
    traj = run_paired(plant, rom, cert, ctrl, np.array([1.0, -2.0]), DisturbanceSampler(0.0, 0), 50)
    assert traj.S0 == 0.0
    assert np.all(traj.mismatch == 0.0)


def random_sequence(cs, seed, K=200):
    return RomController("sequence", cs.rom.input_box, sequence=cs.rom.input_box.sample(np.random.default_rng(seed), K))


def test_casestudy_runs_respect_bound(cs):
    results = run_validation(
        cs.plant, cs.rom, cs.cert, lambda: random_sequence(cs, 5), [cs.cert.R @ np.array([1.0, -2.0])] * 3,
        seeds=[0, 1, 2], K=200, eps=cs.plant.disturbance_radius)
    for traj, rep in results:
        assert rep.passed, rep.to_dict()
        assert rep.chain_ok
        assert np.all(traj.mismatch**2 <= traj.V / cs.cert.alpha * (1 + 1e-10) + 1e-12)


def test_realized_bound_not_above_box_bound(cs):
    ctrl = RomController("constant", cs.rom.input_box, value=np.array([1.0, 2.0]))
    traj = run_paired(cs.plant, cs.rom, cs.cert, ctrl, np.zeros(6), DisturbanceSampler(0.0014, 0), 20)
    assert closeness_bound(cs.cert, traj.S0, ctrl.sup_norm) <= traj.bound
    assert ctrl.sup_norm == pytest.approx(np.sqrt(5.0))


def test_corrupted_interface_is_flagged(cs):
    bad = cs.cert.with_changes(GP=cs.cert.GP + 1.0)
    ctrl = random_sequence(cs, 0, 50)
    traj = run_paired(cs.plant, cs.rom, bad, ctrl, np.zeros(6), DisturbanceSampler(0.0014, 0), 50)
    rep = check_bound(traj, bad, traj.bound)
    assert rep.recursion_violation_steps and not rep.passed


def test_single_step_horizon(cs):
    ctrl = RomController("constant", cs.rom.input_box)
    traj = run_paired(cs.plant, cs.rom, cs.cert, ctrl, np.zeros(6), DisturbanceSampler(0.0014, 0), 1)
    assert traj.x.shape == (2, 6) and traj.u.shape == (1, 2) and traj.mismatch.shape == (2,)
    with pytest.raises(ValueError):
        run_paired(cs.plant, cs.rom, cs.cert, ctrl, np.zeros(6), DisturbanceSampler(0.0014, 0), 0)


class ScriptedSampler:
    def __init__(self, W):
        self.W, self.k, self.seed = W, 0, None

    def draw(self, n):
        self.k += 1
        return self.W[self.k - 1]


def test_interface_is_causal(cs, rng):
    K, j = 30, 12
    W1 = rng.normal(size=(K, 6)) * 1e-3
    W2 = W1.copy()
    W2[j:] = rng.normal(size=(K - j, 6)) * 1e-3
    runs = []
    for W in (W1, W2):
        ctrl = random_sequence(cs, 3, K)
        runs.append(run_paired(cs.plant, cs.rom, cs.cert, ctrl, np.ones(6), ScriptedSampler(W), K))
    # u(k) may only depend on w(0..k-1)
    np.testing.assert_array_equal(runs[0].u[: j + 1], runs[1].u[: j + 1])
    assert np.any(runs[0].u[j + 1] != runs[1].u[j + 1])


def test_controller_clips_into_box(cs):
    box = cs.rom.input_box
    ctrl = RomController("waypoint", box, waypoints=[np.array([1e6, -1e6])])
    xh = np.zeros(2)
    for k in range(5):
        uh = ctrl(cs.rom, xh, k)
        assert box.contains(uh)
        xh = cs.rom.A_hat @ xh + cs.rom.B_hat @ uh
    seq = RomController("sequence", box, sequence=np.array([[1.0, 1.0], [100.0, -100.0]]))
    np.testing.assert_array_equal(seq(cs.rom, xh, 5), [6.0, -6.0])
    with pytest.raises(ValueError):
        RomController("lqr", box)
    with pytest.raises(ValueError):
        RomController("waypoint", box)


def test_csv_columns(cs, tmp_path):
    ctrl = RomController("constant", cs.rom.input_box)
    traj = run_paired(cs.plant, cs.rom, cs.cert, ctrl, np.zeros(6), DisturbanceSampler(0.0014, 0), 5)
    path = traj.to_csv(tmp_path / "t.csv")
    with open(path) as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    assert head[0] == "k" and head[-3:] == ["mismatch", "V", "bound"]
    assert sum(h.startswith("x") and not h.startswith("xh") for h in head) == 6
    assert len(rows) == 1 + 6


def test_box_distance():
    b = Box.from_pairs([(0, 1), (0, 1)])
    assert box_distance(b, np.array([0.5, 0.5])) == 0.0
    assert box_distance(b, np.array([4.0, 5.0])) == pytest.approx(5.0)


def test_demo_without_obstacles_passes(cs):
    geo = DemoGeometry(start=Box.from_pairs([(1.0, 1.2), (1.0, 1.2)]), target=Box.from_pairs([(-2, 2), (-2, 2)]),
                       waypoints=[np.zeros(2)])
    rep = reach_avoid_demo(cs.plant, cs.rom, cs.cert, geo, K=100, seeds=[0, 1])
    assert rep.outcome == "pass", rep.to_dict()


def test_demo_tiny_target_is_too_loose(cs):
    geo = DemoGeometry(start=Box.from_pairs([(2, 3), (2, 3)]), target=Box.from_pairs([(0, 0.1), (0, 0.1)]))
    rep = reach_avoid_demo(cs.plant, cs.rom, cs.cert, geo, K=10)
    assert rep.outcome == "bound too loose" and not rep.runs


def test_demo_obstacle_over_start_is_too_loose(cs):
    geo = DemoGeometry(start=Box.from_pairs([(2, 3), (2, 3)]), target=Box.from_pairs([(-2, 2), (-2, 2)]),
                       obstacles=[Box.from_pairs([(3.1, 4), (2, 3)])])
    rep = reach_avoid_demo(cs.plant, cs.rom, cs.cert, geo, K=10)
    assert rep.outcome == "bound too loose"
