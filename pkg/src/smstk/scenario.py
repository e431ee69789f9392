"""Scenario execution: plan, track, verify, emit artifacts."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ScenarioConfig
from .control import closed_loop_simulate, lyapunov_check
from .errors import ControllerDivergenceError, InfeasiblePlanError, InfeasibleStepError
from .logio import (
    CONSTRAINTS_FILE,
    MANIFEST_FILE,
    PLAN_FILE,
    TRACKING_FILE,
    column,
    read_csv,
    write_constraints,
    write_manifest,
    write_plan_csv,
    write_tracking_csv,
)
from .planner import plan_trajectory

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_DIVERGED = 3

MOMENTUM_LIMIT = 1e-7


@dataclass
class ScenarioResult:
    status: int
    manifest: dict
    plan: object = None
    tracking: object = None


def run_scenario(config: ScenarioConfig, out_dir: str | Path,
                 plan_only: bool = False) -> ScenarioResult:
    """Plan, track and verify one scenario, writing all artifacts.

    Exit status 0 means every acceptance check passed: feasible plan,
    terminal error within threshold, torques within limits, momentum
    conserved, Lyapunov checks green.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    manifest: dict = {"label": config.label, "seed": config.seed,
                      "config": config.echo, "checks": {}}

    try:
        plan = plan_trajectory(config.model, config.initial, config.r_d, config.planner)
    except (InfeasibleStepError, InfeasiblePlanError) as exc:
        manifest["status"] = "infeasible"
        manifest["error"] = str(exc)
        if getattr(exc, "report", None):
            manifest["diagnostics"] = exc.report
        manifest["wall_time_s"] = time.perf_counter() - t_start
        write_manifest(manifest, out / MANIFEST_FILE)
        return ScenarioResult(EXIT_INFEASIBLE, manifest)

    write_plan_csv(plan, out / PLAN_FILE)
    write_constraints(plan, out / CONSTRAINTS_FILE)
    base_disp = float(np.linalg.norm(plan.base_pos - plan.base_pos[0], axis=1).max())
    manifest["plan"] = {
        "feasible": plan.feasible,
        "final_error_m": float(plan.ee_error[-1]),
        "max_base_displacement_m": base_disp,
        "total_cost": plan.total_cost,
        "steps": plan.n_steps,
    }
    checks = manifest["checks"]
    checks["plan_feasible"] = plan.feasible
    if not plan.feasible:
        manifest["status"] = "infeasible"
        manifest["diagnostics"] = plan.diagnostics
        manifest["wall_time_s"] = time.perf_counter() - t_start
        write_manifest(manifest, out / MANIFEST_FILE)
        return ScenarioResult(EXIT_INFEASIBLE, manifest, plan=plan)
    if plan_only:
        manifest["status"] = "planned"
        manifest["wall_time_s"] = time.perf_counter() - t_start
        write_manifest(manifest, out / MANIFEST_FILE)
        return ScenarioResult(EXIT_OK, manifest, plan=plan)

    try:
        log = closed_loop_simulate(config.model, plan, config.gains)
    except ControllerDivergenceError as exc:
        manifest["status"] = "diverged"
        manifest["error"] = str(exc)
        manifest["wall_time_s"] = time.perf_counter() - t_start
        write_manifest(manifest, out / MANIFEST_FILE)
        return ScenarioResult(EXIT_DIVERGED, manifest, plan=plan)

    write_tracking_csv(log, out / TRACKING_FILE)
    rep = lyapunov_check(log, config.gains)
    final_err = float(log.ee_err[-1])
    max_tau = log.max_torques
    manifest["tracking"] = {
        "final_error_m": final_err,
        "max_abs_q_error_rad": float(np.linalg.norm(log.q_e, axis=1).max()),
        "max_torques_Nm": max_tau.tolist(),
        "momentum_residual": log.momentum_residual,
        "clamped_steps": int(log.clamped.any(axis=1).sum()),
    }
    manifest["lyapunov"] = {
        "nominal": {
            "vr_fraction_ok": rep.vr_fraction_ok,
            "vr_outside_steps": rep.vr_outside_steps,
            "vs_rate": rep.vs_rate,
            "vs_expected": rep.vs_expected,
        }
    }
    checks["terminal_error"] = final_err <= config.planner.r_th
    checks["torque_limits"] = bool(np.all(max_tau <= config.gains.tau_max + 1e-12))
    checks["momentum"] = log.momentum_residual <= MOMENTUM_LIMIT
    checks["lyapunov_nominal"] = rep.passed

    if config.probes:
        n = config.model.n
        reach = closed_loop_simulate(config.model, plan, config.gains,
                                     q0_offset=np.full(n, 0.004))
        rep_reach = lyapunov_check(reach, config.gains)
        qe0 = np.full(n, 0.01)
        slide = closed_loop_simulate(config.model, plan, config.gains,
                                     q0_offset=qe0,
                                     qd0_offset=-config.gains.Gamma @ qe0)
        rep_slide = lyapunov_check(slide, config.gains)
        manifest["lyapunov"]["reaching_probe"] = {
            "vr_fraction_ok": rep_reach.vr_fraction_ok,
            "vr_outside_steps": rep_reach.vr_outside_steps,
        }
        manifest["lyapunov"]["sliding_probe"] = {
            "vs_rate": rep_slide.vs_rate,
            "vs_expected": rep_slide.vs_expected,
        }
        checks["lyapunov_reaching"] = rep_reach.vr_ok
        checks["lyapunov_sliding"] = rep_slide.vs_rate_ok is True

    ok = all(checks.values())
    manifest["status"] = "ok" if ok else "failed"
    manifest["wall_time_s"] = time.perf_counter() - t_start
    write_manifest(manifest, out / MANIFEST_FILE)
    return ScenarioResult(EXIT_OK if ok else 1, manifest, plan=plan, tracking=log)


def verify_run(run_dir: str | Path, rtol: float = 1e-12) -> tuple[bool, list[str]]:
    """Recompute the manifest numbers from the CSVs and cross-check.

    Also recomputes every logged step cost from alpha/Hnorm/cos_theta_a to
    confirm the CSVs are self-consistent.
    """
    run = Path(run_dir)
    problems: list[str] = []
    manifest = json.loads((run / MANIFEST_FILE).read_text())
    if manifest.get("status") in ("infeasible", "diverged"):
        return True, [f"status {manifest['status']}: nothing to verify"]

    ph, pdata = read_csv(run / PLAN_FILE)
    th, tdata = read_csv(run / TRACKING_FILE)

    n = sum(1 for c in ph if c.startswith("alpha"))
    kappa = manifest["config"]["planner"]["kappa"]

    h_norm = column(ph, pdata, "Hnorm")
    cos_t = column(ph, pdata, "cos_theta_a")
    c_tilde = column(ph, pdata, "Ctilde")
    cost = column(ph, pdata, "step_cost")
    x = kappa * cos_t
    c_tilde_re = (np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))) / kappa
    # neutral/at-goal rows carry the softplus of 0 regardless of cos value
    mismatch = np.abs(c_tilde_re - c_tilde) > 1e-12
    cost_re = (c_tilde - (1.0 - h_norm)) ** 2
    if np.abs(cost_re - cost).max() > 1e-12:
        problems.append("step_cost not reproducible from Ctilde and Hnorm")
    if mismatch.mean() > 0.2:
        problems.append("Ctilde inconsistent with cos_theta_a on >20% of rows")

    final_err = float(column(th, tdata, "ee_err")[-1])
    if abs(final_err - manifest["tracking"]["final_error_m"]) > 1e-9:
        problems.append("manifest final_error_m does not match tracking CSV")

    rb = np.stack([column(ph, pdata, c) for c in ("rbx", "rby", "rbz")], axis=1)
    base_disp = float(np.linalg.norm(rb - rb[0], axis=1).max())
    if abs(base_disp - manifest["plan"]["max_base_displacement_m"]) > 1e-9:
        problems.append("manifest max_base_displacement_m does not match plan CSV")

    tau = np.stack([column(th, tdata, f"tau{i}") for i in range(1, n + 1)], axis=1)
    max_tau = np.abs(tau).max(axis=0)
    if np.abs(max_tau - np.asarray(manifest["tracking"]["max_torques_Nm"])).max() > 1e-9:
        problems.append("manifest max_torques_Nm does not match tracking CSV")

    mom = max(column(th, tdata, "hl_norm").max(), column(th, tdata, "ha_norm").max())
    if mom > MOMENTUM_LIMIT:
        problems.append(f"momentum residual {mom:.3e} exceeds {MOMENTUM_LIMIT}")

    steps = manifest["plan"]["steps"]
    if pdata.shape[0] != steps + 1:
        problems.append(f"plan CSV row count {pdata.shape[0]} != N+1 = {steps + 1}")

    return not problems, problems
