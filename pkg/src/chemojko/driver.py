"""Time stepping, per-step diagnostics and persistence.

Output directory layout:

* ``step_00001.csv`` ... one file per step, columns ``x[,y],rho,phi,pressure,q_obstacle,vx[,vy]``
  (cell centers, shortest round-trip decimals).
* ``diagnostics.csv`` with rows ``step,t,check,value,bound,pass``. Trajectory-level
  checks are filed under the last step.
* ``manifest.ini``: the config echo in the INI layout of :mod:`chemojko.config`
  plus a ``[run]`` section (status, versions, wall times). ``parse_manifest``
  reads it back.
"""

from __future__ import annotations

import configparser
import csv
import logging
import math
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import RunConfig, config_to_text, parse_config_text
from .diagnostics import (DiagnosticsRecord, Trajectory, check_duality_bound, check_energy_inequality,
                          check_holder, check_obstacle, check_patch_preservation, check_step)
from .elliptic import EllipticSolveError
from .grid import DensityField, Grid
from .jko import JkoError, energy, jko_step
from .obstacle import ObstacleError, solve_obstacle
from .scenarios import get_scenario
from .transport import TransportError

log = logging.getLogger(__name__)

SOLVER_ERRORS = (JkoError, ObstacleError, EllipticSolveError, TransportError, np.linalg.LinAlgError)


@dataclass
class RunResult:
    config: RunConfig
    trajectory: Trajectory
    step_records: list = field(default_factory=list)  # DiagnosticsRecord per step
    final_record: DiagnosticsRecord = field(default_factory=DiagnosticsRecord)
    q_fields: list = field(default_factory=list)  # obstacle solution per step (None when not solved)
    status: str = "ok"  # ok | checks_failed | solver_failure
    failed_step: int | None = None
    error: str = ""
    wall_seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.status == "ok"

    def failures(self) -> list[tuple[int, str]]:
        out = [(n + 1, name) for n, rec in enumerate(self.step_records) for name in rec.failures()]
        out += [(len(self.step_records), name) for name in self.final_record.failures()]
        return out


def initial_density(cfg: RunConfig) -> DensityField:
    return get_scenario(cfg.scenario).initial_density(cfg)


def simulate_trajectory(cfg: RunConfig, rho_in: DensityField | None = None) -> Trajectory:
    """Plain time stepping without diagnostics (used by cross-solver comparisons)."""
    rho = initial_density(cfg) if rho_in is None else rho_in
    params = cfg.energy_params()
    opts = cfg.solver_options()
    traj = Trajectory(rho, params)
    state = None
    for _ in range(cfg.steps):
        step = jko_step(rho, params, opts, state)
        state = step.telemetry.get("state")
        traj.append(step)
        rho = step.rho_next
    return traj


def run(cfg: RunConfig, out: str | os.PathLike | None = None) -> RunResult:
    """Iterate the scheme from the scenario's initial density, checking every step.

    Solver failures stop the run; whatever was computed is kept (and written
    when ``out`` is given) and the failing step is recorded.
    """
    t_start = time.perf_counter()
    scen = get_scenario(cfg.scenario)
    checks = set(scen.checks)
    rho = scen.initial_density(cfg)
    params = cfg.energy_params()
    opts = cfg.solver_options()
    J_in = energy(rho, params)
    res = RunResult(cfg, Trajectory(rho, params, info={"J_in": J_in}))
    state = None
    for n in range(1, cfg.steps + 1):
        try:
            step = jko_step(rho, params, opts, state)
            rec = check_step(step, params, J_in, energy_rtol=cfg.energy_rtol, pressure_rtol=cfg.pressure_rtol,
                             pairing_tol=cfg.pairing_tol, delta_sat=cfg.delta_sat)
            q = None
            if cfg.obstacle:
                sol = solve_obstacle(step.rho_next, step.phi, omega=cfg.omega, tol_psor=cfg.tol_psor,
                                     max_sweeps=cfg.max_psor, delta_sat=cfg.delta_sat)
                q = sol.q.values
                rec.merge(check_obstacle(step, sol, complementarity_rtol=cfg.complementarity_rtol,
                                         match="obstacle_match" in checks, order_rtol=cfg.obstacle_order_rtol,
                                         gap=cfg.obstacle_gap, free_boundary="free_boundary" in checks,
                                         fb_tol=cfg.fb_tol))
        except SOLVER_ERRORS as exc:
            res.status, res.failed_step, res.error = "solver_failure", n, f"{type(exc).__name__}: {exc}"
            log.error("step %d failed: %s", n, res.error)
            break
        state = step.telemetry.get("state")
        res.trajectory.append(step, rec)
        res.step_records.append(rec)
        res.q_fields.append(q)
        rho = step.rho_next
        log.info("step %d  J=%.10g  W2^2=%.3e  lag=%d  %.2fs", n, step.energy_after, step.w2_sq,
                 step.outer_lag_iterations, step.telemetry.get("seconds", 0.0))
    if res.status != "solver_failure":
        res.final_record = final_checks(res.trajectory, cfg, checks)
        if any(not r.passed for r in res.step_records) or not res.final_record.passed:
            res.status = "checks_failed"
    res.wall_seconds = time.perf_counter() - t_start
    if out is not None:
        write_outputs(res, out)
    return res


def final_checks(traj: Trajectory, cfg: RunConfig, checks: set) -> DiagnosticsRecord:
    rec = DiagnosticsRecord()
    if len(traj) == 0:
        return rec
    J_in = traj.info.get("J_in", energy(traj.rho_in, traj.params))
    rec.merge(check_energy_inequality(traj, cfg.energy_rtol * abs(J_in) + 1e-14))
    if "holder" in checks and len(traj) >= 3:
        rec.merge(check_holder(traj, cfg.holder_safety, cfg.holder_pairs, cfg.seed))
    if "duality" in checks:
        # per-step pairs with the step's own plan cost, plus the endpoints in 1D
        worst = DiagnosticsRecord()
        for s in traj.steps:
            r = check_duality_bound(s.rho_prev, s.rho_next, w2=math.sqrt(max(s.w2_sq, 0.0)),
                                    prefix="duality_step")
            for name, (v, b, ok) in r.checks.items():
                if name not in worst or v / max(b, 1e-300) > worst[name][0] / max(worst[name][1], 1e-300):
                    worst.checks[name] = (v, b, ok)
        rec.merge(worst)
        if traj.grid.dim == 1:
            rec.merge(check_duality_bound(traj.rho_in, traj.steps[-1].rho_next, prefix="duality_endpoints"))
    if "patch" in checks and traj.params.mu == 0:
        rec.merge(check_patch_preservation(traj, cfg.patch_delta, cfg.patch_bound))
    return rec


# --------------------------------------------------------------------------
# files


def _fmt(v: float) -> str:
    return repr(float(v))


def step_columns(grid: Grid) -> list[str]:
    axes = ["x", "y"][: grid.dim]
    return axes + ["rho", "phi", "pressure", "q_obstacle"] + ["v" + a for a in axes]


def write_step_csv(path, grid: Grid, rho, phi, pressure, q, velocity_cells) -> None:
    cols = [c.ravel() for c in grid.centers()]
    cols += [np.asarray(a, float).ravel() for a in (rho, phi, pressure, q)]
    cols += [np.asarray(velocity_cells[a], float).ravel() for a in range(grid.dim)]
    data = np.column_stack(cols)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(step_columns(grid)) + "\n")
        # repr gives the shortest string that round-trips the double
        fh.writelines(",".join(map(repr, row)) + "\n" for row in data.tolist())


def read_step_csv(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return {name: data[:, k] for k, name in enumerate(header)}


def write_outputs(res: RunResult, out) -> None:
    os.makedirs(out, exist_ok=True)
    traj = res.trajectory
    grid = traj.grid
    tau = traj.params.tau
    for n, step in enumerate(traj.steps, start=1):
        q = res.q_fields[n - 1] if n - 1 < len(res.q_fields) and res.q_fields[n - 1] is not None else np.zeros(grid.shape)
        write_step_csv(os.path.join(out, f"step_{n:05d}.csv"), grid, step.rho_next.values, step.phi.values,
                       step.pressure_F.values, q, step.velocity.cells)
    with open(os.path.join(out, "diagnostics.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t", "check", "value", "bound", "pass"])
        for n, rec in enumerate(res.step_records, start=1):
            for name, (v, b, ok) in rec.checks.items():
                w.writerow([n, _fmt(n * tau), name, _fmt(v), _fmt(b), int(ok)])
        last = len(res.step_records)
        for name, (v, b, ok) in res.final_record.checks.items():
            w.writerow([last, _fmt(last * tau), name, _fmt(v), _fmt(b), int(ok)])
    write_manifest(res, os.path.join(out, "manifest.ini"))


def write_manifest(res: RunResult, path) -> None:
    import scipy

    run = configparser.ConfigParser(interpolation=None)
    info = {
        "status": res.status,
        "steps_completed": str(len(res.trajectory)),
        "failed_step": "none" if res.failed_step is None else str(res.failed_step),
        "error": res.error.replace("\n", " ") or "none",
        "failures": " ".join(f"{n}:{name}" for n, name in res.failures()) or "none",
        "wall_seconds": _fmt(res.wall_seconds),
        "step_seconds": " ".join(f"{s.telemetry.get('seconds', 0.0):.6g}" for s in res.trajectory.steps) or "none",
        "chemojko_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "python_version": platform.python_version(),
        "platform": platform.platform(),
    }
    run["run"] = info
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(res.config))
        run.write(fh)


def parse_manifest(path) -> tuple[RunConfig, dict]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    info = dict(parser["run"]) if parser.has_section("run") else {}
    parser.remove_section("run")
    import io

    buf = io.StringIO()
    parser.write(buf)
    return parse_config_text(buf.getvalue()), info


def load_final_state(out) -> DensityField:
    """Density of the last step file in ``out`` on the manifest's grid."""
    cfg, _ = parse_manifest(os.path.join(out, "manifest.ini"))
    files = sorted(f for f in os.listdir(out) if f.startswith("step_") and f.endswith(".csv"))
    if not files:
        return initial_density(cfg)
    grid = cfg.build_grid()
    cols = read_step_csv(os.path.join(out, files[-1]))
    return DensityField(grid, cols["rho"].reshape(grid.shape))
