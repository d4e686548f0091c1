"""Acceptance suite: one ``[PASS]``/``[FAIL]`` line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` or directly as
``python3 tests/test_acceptance.py`` (exit status 1 on any failure).
"""
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import conftest  # noqa: E402
from conftest import CASESTUDY_SEEDS, Pipeline, casestudy, error_dynamics_rhs, random_instance  # noqa: E402
from ddrom.certificate import bound_value, closeness_bound, compute_rho_psi, verify_sf_conditions  # noqa: E402
from ddrom.config import load_config  # noqa: E402
from ddrom.data import disturbance_cap, run_experiment, stacked_data  # noqa: E402
from ddrom.refinement import interface_input, reach_avoid_demo, validation_runs  # noqa: E402
from ddrom.synthesis import q2_matrix  # noqa: E402
from ddrom.system import PlantModel  # noqa: E402

MU = (0.5, 0.25, 0.25, 0.1, 1.0, 1.0)


def emit(num, ok, text, seconds):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {text} ({seconds:.2f} s)"
    print("\n" + line, flush=True)
    return line


def _c1():
    plant = PlantModel.casestudy()
    cap = disturbance_cap(plant.disturbance_radius, 300, plant.state_dim)
    ref = 5.88e-4 * np.eye(6)
    ds = run_experiment(plant, load_config("casestudy").experiment_config())
    ok = np.array_equal(cap, ref) and np.array_equal(ds.Delta, ref)
    return ok, f"Delta = {float(cap[0, 0])!r} * I_6, bitwise equal: {ok}", 1.0


def _c2():
    rho, psi, _, _ = compute_rho_psi(6.8817e7, 0.0099, 1.2795e-6, 1.6699e-4, 5.88e-4, 0.0014, 72.0, MU)
    b = bound_value(2.2273e3, 0.7, rho, psi, 0.0, np.sqrt(72.0))
    ok = abs(rho - 30.7155) <= 0.01 and abs(psi - 2114.9) <= 1.0 and abs(b - 2.545) <= 0.005
    return ok, f"rho = {rho:.4f}, psi = {psi:.1f}, bound = {b:.4f}", 1.0


def _c3():
    parts, ok = [], True
    for seed in CASESTUDY_SEEDS:
        p = Pipeline(seed)
        conftest._cache[seed] = p
        r = p.report
        tight = p.hp.eq_tol == 1e-7 and p.hp.psd_slack == 1e-7
        b = closeness_bound(p.cert, 0.0, np.sqrt(p.rom.input_box.max_sq_norm()))
        good = p.sol.status == "optimal" and r.passed and tight and np.isfinite(b)
        ok &= good
        parts.append(f"seed {seed}: {p.sol.status}, checks {'pass' if r.passed else 'FAIL'}, eps_bar = {b:.4f}")
    return ok, "; ".join(parts), 60.0


def _c4():
    parts, ok = [], True
    for seed in CASESTUDY_SEEDS:
        p = casestudy(seed)
        res = validation_runs(p.plant, p.rom, p.cert, [0, 1, 2, 3, 4], 200, p.plant.disturbance_radius,
                              "boundary-sphere")
        viol = sum(len(r.violation_steps) for _, r in res)
        rec = min(float(r.recursion_slack.min()) for _, r in res)
        margin = min(float(r.margins.min()) for _, r in res)
        ok &= viol == 0 and rec >= -1e-7 and len(res) == 5
        parts.append(f"cert {seed}: 5 runs, bound violations {viol}, min margin {margin:.3g}, "
                     f"min recursion slack {rec:.3g}")
    return ok, "; ".join(parts), 10.0 * len(CASESTUDY_SEEDS)


def _c5():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        m, nh, mh = (int(v) for v in rng.integers(1, 4, size=3))
        A, B, Ah, Bh, cert = random_instance(rng, n, m, nh, mh)
        x, xh, uh = rng.normal(size=n), rng.normal(size=nh), rng.normal(size=mh)
        w = 0.01 * rng.normal(size=n)
        u = interface_input(cert, x, xh, uh)
        direct = A @ x + B @ u + w - cert.R @ (Ah @ xh + Bh @ uh)
        worst = max(worst, float(np.max(np.abs(direct - error_dynamics_rhs(A, B, Ah, Bh, cert, x, xh, uh, w)))))
    return worst <= 1e-10, f"100 instances, max |direct - closed form| = {worst:.2e}", 1.0


def _c6():
    parts, ok = [], True
    for seed in CASESTUDY_SEEDS:
        p = casestudy(seed)
        rep = verify_sf_conditions(p.cert, p.plant, p.rom, n_samples=10_000)
        ok &= rep.passed and rep.alpha_gap == 0.0 and rep.n_samples == 10_000
        parts.append(f"cert {seed}: violations {rep.violations}/10000, worst slack {rep.worst_slack:.3g}, "
                     f"lambda_min(P) - alpha = {rep.alpha_gap}")
    return ok, "; ".join(parts), 30.0 * len(CASESTUDY_SEEDS)


def _c7():
    parts, ok = [], True
    for seed in CASESTUDY_SEEDS:
        p = casestudy(seed)
        ds, sol, hp = p.ds, p.sol, p.hp
        n, m = ds.n, ds.m
        S = np.hstack([p.plant.B, p.plant.A])
        L = np.vstack([np.eye(n), S.T])
        GPb = np.vstack([sol.G, sol.Pbar])
        M1 = np.zeros((2 * n + m, 2 * n + m))
        M1[:n, :n] = hp.kappa * sol.Pbar
        M1[n:, n:] = -(1 + sum(hp.mu[:3])) * GPb @ np.linalg.solve(sol.Pbar, GPb.T)
        M2 = q2_matrix(ds.X, ds.U, ds.X_plus, ds.Delta)[: 2 * n + m, : 2 * n + m]
        C = L.T @ (M1 - sol.mu_bar * M2) @ L
        lam = float(np.linalg.eigvalsh(0.5 * (C + C.T))[0])
        W = ds.X_plus - S @ stacked_data(ds)
        # relative to the size of the operands that cancel
        rel = float(np.abs(L.T @ M2 @ L - (ds.Delta - W @ W.T)).max() / np.abs(M2).max())
        ok &= lam >= -1e-5 and rel <= 1e-8
        parts.append(f"cert {seed}: lambda_min = {lam:.3g}, identity rel. error {rel:.2e}")
    return ok, "; ".join(parts), 1.0


def _c8():
    p = casestudy(1)
    geo = p.cfg.geometry()
    rep = reach_avoid_demo(p.plant, p.rom, p.cert, geo, p.cfg.demo.K, p.cfg.demo.seeds)
    gap = geo.min_obstacle_gap()
    ok = rep.outcome == "pass" and rep.rom_ok and rep.plant_ok and len(rep.runs) == 5 and gap >= 4 * rep.eps_bar
    text = (f"eps_bar = {rep.eps_bar:.4f}, obstacle gap {gap:.2f} >= 4 eps_bar = {4 * rep.eps_bar:.3f}; "
            f"ROM spec {'ok' if rep.rom_ok else 'FAIL'}, plant spec {sum(r.plant_ok for r in rep.runs)}/5 runs")
    return ok, text, 10.0


def _c9():
    p = casestudy(1)
    eps = 10 * p.plant.disturbance_radius
    res = validation_runs(p.plant, p.rom, p.cert, list(range(20)), 200, eps, "boundary-sphere")
    rec = sum(1 for _, r in res if r.recursion_violation_steps)
    bnd = sum(1 for _, r in res if r.violation_steps)
    ok = rec + bnd >= 1
    return ok, f"eps x10 over 20 seeds: {rec} runs with recursion violations, {bnd} with bound violations", 30.0


CRITERIA = {
    1: ("disturbance cap reproduced bitwise", _c1),
    2: ("reported constituents reproduce rho, psi and the bound", _c2),
    3: ("end-to-end case study on three seeds", _c3),
    4: ("closeness bound and recursion on paired runs", _c4),
    5: ("one-step error identity", _c5),
    6: ("SF conditions on 10^4 oracle samples", _c6),
    7: ("S-procedure congruence with the true plant", _c7),
    8: ("reach-while-avoid demo", _c8),
    9: ("checks are falsifiable at ten times the noise", _c9),
}


def run_criterion(num):
    title, fn = CRITERIA[num]
    t = time.perf_counter()
    ok, detail, limit = fn()
    dt = time.perf_counter() - t
    fast = dt < limit
    if not fast:
        detail += f"; runtime over the {limit:.0f} s limit"
    emit(num, ok and fast, f"{title}: {detail}", dt)
    return ok and fast, detail


@pytest.mark.parametrize("num", sorted(CRITERIA))
def test_criterion(num, capsys):
    # the verdict line goes to the terminal even under output capture
    with capsys.disabled():
        ok, detail = run_criterion(num)
    assert ok, detail


if __name__ == "__main__":
    results = [run_criterion(k)[0] for k in sorted(CRITERIA)]
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
