"""CSV and manifest serialization of plans and tracking logs.

Schemas are fixed: one row per time step, floats at 17 significant digits,
deterministic row order, so identical seed + config produce byte-identical
files.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .control import TrackingLog
from .planner import TrajectoryPlan

PLAN_FILE = "plan.csv"
TRACKING_FILE = "tracking.csv"
CONSTRAINTS_FILE = "constraints.json"
MANIFEST_FILE = "summary.json"


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def plan_header(n: int) -> list[str]:
    cols = ["t"]
    cols += [f"q{i}" for i in range(1, n + 1)]
    cols += [f"qd{i}" for i in range(1, n + 1)]
    cols += [f"qdd{i}" for i in range(1, n + 1)]
    cols += ["rbx", "rby", "rbz", "e1", "e2", "e3", "e4",
             "vbx", "vby", "vbz", "wbx", "wby", "wbz", "rex", "rey", "rez",
             "Hnorm", "cos_theta_a", "Ctilde", "step_cost"]
    cols += [f"alpha{i}" for i in range(1, n + 1)]
    return cols


def tracking_header(n: int) -> list[str]:
    cols = ["t"]
    cols += [f"qe{i}" for i in range(1, n + 1)]
    cols += [f"qde{i}" for i in range(1, n + 1)]
    cols += [f"s{i}" for i in range(1, n + 1)]
    cols += [f"tau{i}" for i in range(1, n + 1)]
    cols += [f"clamp{i}" for i in range(1, n + 1)]
    cols += ["ee_err", "Vr", "Vs", "hl_norm", "ha_norm"]
    return cols


def write_plan_csv(plan: TrajectoryPlan, path: Path) -> None:
    n = plan.q.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(plan_header(n))
        for k in range(len(plan.t)):
            row = [_fmt(plan.t[k])]
            row += [_fmt(v) for v in plan.q[k]]
            row += [_fmt(v) for v in plan.qd[k]]
            row += [_fmt(v) for v in plan.qdd[k]]
            row += [_fmt(v) for v in plan.base_pos[k]]
            row += [_fmt(v) for v in plan.base_quat[k]]
            row += [_fmt(v) for v in plan.base_vel[k]]
            row += [_fmt(v) for v in plan.r_e[k]]
            row += [_fmt(plan.h_norm[k]), _fmt(plan.cos_theta_a[k]),
                    _fmt(plan.c_tilde[k]), _fmt(plan.step_cost[k])]
            row += [_fmt(v) for v in plan.alpha[k]]
            w.writerow(row)


def write_tracking_csv(log: TrackingLog, path: Path) -> None:
    n = log.q_e.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(tracking_header(n))
        for k in range(len(log.t)):
            row = [_fmt(log.t[k])]
            row += [_fmt(v) for v in log.q_e[k]]
            row += [_fmt(v) for v in log.qd_e[k]]
            row += [_fmt(v) for v in log.s[k]]
            row += [_fmt(v) for v in log.tau[k]]
            row += [str(int(v)) for v in log.clamped[k]]
            row += [_fmt(log.ee_err[k]), _fmt(log.V_r[k]), _fmt(log.V_s[k]),
                    _fmt(log.h_l_norm[k]), _fmt(log.h_a_norm[k])]
            w.writerow(row)


def write_constraints(plan: TrajectoryPlan, path: Path) -> None:
    payload = {
        "feasible": plan.feasible,
        "diagnostics": plan.diagnostics,
        "reports": [rep.summary() for rep in plan.reports],
    }
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def write_manifest(manifest: dict, path: Path) -> None:
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    """(header, data matrix) of one of the run CSVs."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        data = np.array([[float(v) for v in row] for row in r])
    return header, data


def column(header: list[str], data: np.ndarray, name: str) -> np.ndarray:
    if name not in header:
        raise KeyError(f"column {name!r} not present")
    return data[:, header.index(name)]
