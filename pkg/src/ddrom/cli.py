"""Command-line pipeline: collect -> synthesize -> validate -> demo.

Exit codes: 0 success, 2 configuration error, 3 infeasible or invalid
synthesis (also a failed rank check at collection), 4 validation failure,
5 demo bound too loose for the geometry.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from filelock import FileLock, Timeout

from .certificate import (
    Certificate,
    SearchOptions,
    closeness_bound,
    extract_certificate,
    verify_sf_conditions,
)
from .config import RunConfig, load_config
from .data import check_rank, load_dataset, run_experiment, save_dataset
from .errors import CertificateError, ConfigError, SolverError
from .refinement import reach_avoid_demo, validation_runs
from .synthesis import synthesize
from .system import PlantModel, RomModel

log = logging.getLogger("ddrom")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SYNTHESIS = 3
EXIT_VALIDATION = 4
EXIT_TOO_LOOSE = 5


def fmt(v) -> str:
    return f"{float(v):.6g}"


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def load_certificate(out: Path) -> Certificate:
    path = out / "certificate.json"
    if not path.exists():
        raise ConfigError(f"{path} not found; run 'synthesize' first")
    return Certificate.from_json(path.read_text())


def rom_from(cfg: RunConfig, cert: Certificate) -> RomModel:
    hp = cfg.hyperparams()
    sbox, ubox = cfg.rom_boxes()
    return RomModel(hp.A_hat, hp.B_hat, cert.R.copy(), sbox, ubox)


# --- commands ---------------------------------------------------------------------

def cmd_collect(cfg: RunConfig, out: Path, oracle: bool = False) -> int:
    plant = cfg.build_plant()
    ds = run_experiment(plant, cfg.experiment_config())
    save_dataset(ds, out / "data", oracle=oracle)
    rank, ok = check_rank(ds, cfg.synthesis.rank_tol)
    d = ds.Delta[0, 0]
    print(f"data: n={ds.n} m={ds.m} T={ds.T} eps={fmt(ds.eps)} -> {out / 'data'}")
    print(f"Delta = {fmt(d)} * I_{ds.n}")
    print(f"rank [U; X] = {rank} (need {ds.m + ds.n}): {'ok' if ok else 'FAILED'}")
    if not ok:
        print("rank condition fails: use a longer horizon T or a richer excitation", file=sys.stderr)
        return EXIT_SYNTHESIS
    return EXIT_OK


def cmd_synthesize(cfg: RunConfig, out: Path, dump: bool = False) -> int:
    data_dir = out / "data"
    if not (data_dir / "meta.json").exists():
        raise ConfigError(f"no dataset in {data_dir}; run 'collect' first")
    ds = load_dataset(data_dir)
    hp = cfg.hyperparams()
    if dump:
        from .synthesis import build_program

        with open(out / "program.txt", "w") as fh:
            build_program(ds, hp).dump(fh)
    try:
        sol, report = synthesize(ds, hp, cfg.solver_options())
    except SolverError as exc:
        print(f"solver failure: {exc}; residuals {exc.residuals}", file=sys.stderr)
        return EXIT_SYNTHESIS
    _write_json(out / "synthesis_report.json", {"status": sol.status, **report.to_dict()})
    if sol.K1.size:
        (out / "solution.json").write_text(sol.to_json() + "\n")
    print(f"solver status: {sol.status}")
    if not report.passed:
        print(report.table(), file=sys.stderr)
        return EXIT_SYNTHESIS
    sbox, ubox = cfg.rom_boxes()
    try:
        cert, _ = extract_certificate(sol, ds, hp, sbox, ubox, report)
    except CertificateError as exc:
        print(f"certificate refused: {exc}", file=sys.stderr)
        return EXIT_SYNTHESIS
    nu = np.sqrt(ubox.max_sq_norm())
    bound = closeness_bound(cert, 0.0, nu)
    (out / "certificate.json").write_text(cert.to_json() + "\n")
    for name, v in [
        ("alpha", cert.alpha), ("rho", cert.rho), ("psi", cert.psi),
        ("psi (data term)", cert.psi_terms[0]), ("psi (noise term)", cert.psi_terms[1]),
        ("|K1|", cert.norm_K1), ("|K2|", cert.norm_K2), ("|X+ K2 - X K1 Bh|", cert.norm_mismatch),
        ("beta", sol.beta), ("mu_bar", sol.mu_bar), ("bound (S0=0, box |uh|)", bound),
    ]:
        print(f"{name:<24} {fmt(v)}")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def _oracle_data_checks(plant: PlantModel, out: Path) -> dict:
    ds = load_dataset(out / "data", oracle=True)
    if ds.W_true is None:
        return {"available": False}
    resid = float(np.max(np.abs(ds.X_plus - plant.A @ ds.X - plant.B @ ds.U - ds.W_true)))
    lam = float(np.linalg.eigvalsh(ds.Delta - ds.W_true @ ds.W_true.T)[0])
    return {"available": True, "dynamics_residual": resid, "cap_min_eig": lam,
            "passed": resid <= 1e-10 and lam >= -1e-10}


def cmd_validate(cfg: RunConfig, out: Path, oracle: bool = False) -> int:
    cert = load_certificate(out)
    plant = cfg.build_plant()
    rom = rom_from(cfg, cert)
    v = cfg.validation
    eps = plant.disturbance_radius * v.eps_scale

    sf = verify_sf_conditions(cert, plant, rom, v.sf_samples, SearchOptions(seed=0, slack=v.slack_tol,
                                                                           eps_override=eps))
    results = []
    for traj, rep in validation_runs(plant, rom, cert, v.seeds, v.K, eps, v.sampler, v.x0_offset):
        traj.to_csv(out / "trajectories" / f"run_{traj.seed}.csv")
        realized = float(np.max(np.linalg.norm(traj.uh, axis=1)))
        results.append({"seed": traj.seed, "S0": traj.S0, "bound_box": traj.bound,
                        "bound_realized": closeness_bound(cert, traj.S0, realized), **rep.to_dict()})

    payload = {"eps": eps, "sf_check": sf.to_dict(), "runs": results}
    if oracle:
        payload["data_checks"] = _oracle_data_checks(plant, out)
    ok = sf.passed and all(r["passed"] for r in results)
    if oracle and payload["data_checks"].get("available"):
        ok = ok and payload["data_checks"]["passed"]
    payload["passed"] = ok
    _write_json(out / "reports" / "validation.json", payload)

    print(f"validation eps = {fmt(eps)}, sampler {v.sampler}")
    print(f"SF check: {sf.n_samples} samples, violations {sf.violations}, worst slack {fmt(sf.worst_slack)}, "
          f"alpha gap {fmt(sf.alpha_gap)}")
    for r in results:
        print(f"run {r['seed']}: max mismatch {fmt(r['max_mismatch'])} bound {fmt(r['bound'])} "
              f"min recursion slack {fmt(r['min_recursion_slack'])} -> {'pass' if r['passed'] else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_demo(cfg: RunConfig, out: Path) -> int:
    geom = cfg.geometry()
    if geom is None:
        raise ConfigError("config has no demo section")
    if not (out / "certificate.json").exists():
        for step in (lambda: cmd_collect(cfg, out), lambda: cmd_synthesize(cfg, out)):
            code = step()
            if code:
                return code
    cert = load_certificate(out)
    plant = cfg.build_plant()
    rom = rom_from(cfg, cert)
    d = cfg.demo
    report = reach_avoid_demo(plant, rom, cert, geom, d.K, d.seeds, mode=cfg.validation.sampler,
                              traj_dir=out / "demo" / "trajectories")
    (out / "demo").mkdir(parents=True, exist_ok=True)
    (out / "demo" / "demo.json").write_text(report.to_json() + "\n")
    print(f"demo: eps_bar = {fmt(report.eps_bar)}, obstacle gap {fmt(geom.min_obstacle_gap())}")
    if report.outcome == "bound too loose":
        print(f"bound too loose for this geometry: {report.reason}", file=sys.stderr)
        return EXIT_TOO_LOOSE
    for r in report.runs:
        print(f"run {r.seed}: rom {'ok' if r.rom_ok else 'FAIL'} plant {'ok' if r.plant_ok else 'FAIL'} "
              f"reach step {r.reach_step} obstacle margin {fmt(r.plant_obstacle_margin)}")
    return EXIT_OK if report.outcome == "pass" else EXIT_VALIDATION


def cmd_all(cfg: RunConfig, out: Path, oracle: bool = False) -> int:
    for step in (lambda: cmd_collect(cfg, out, oracle), lambda: cmd_synthesize(cfg, out),
                 lambda: cmd_validate(cfg, out, oracle)):
        code = step()
        if code:
            return code
    return cmd_demo(cfg, out) if cfg.demo is not None else EXIT_OK


# --- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddrom", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("collect", "run the excitation experiment and write the data matrices"),
        ("synthesize", "solve the SDP and write solution.json and certificate.json"),
        ("validate", "check the certificate on the true plant with paired runs"),
        ("demo", "reach-while-avoid demonstration through the interface"),
        ("all", "collect, synthesize, validate and demo in sequence"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, help="YAML config path, or 'casestudy' for the bundled preset")
        sp.add_argument("--seed", type=int, help="override experiment.seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--oracle", action="store_true", help="record W_true and run true-matrix data checks")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "synthesize":
            sp.add_argument("--dump", action="store_true", help="also write the conic program as program.txt")
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.experiment.seed = args.seed
        out = Path(args.out or cfg.out)
        out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        with FileLock(str(out / ".ddrom.lock"), timeout=0):
            if args.command == "collect":
                return cmd_collect(cfg, out, args.oracle)
            if args.command == "synthesize":
                return cmd_synthesize(cfg, out, args.dump)
            if args.command == "validate":
                return cmd_validate(cfg, out, args.oracle)
            if args.command == "demo":
                return cmd_demo(cfg, out)
            return cmd_all(cfg, out, args.oracle)
    except Timeout:
        print(f"another run holds the lock on {out}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
