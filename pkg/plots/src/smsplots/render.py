"""Render run-directory CSV logs into the standard figure set.

Figures are pure functions of plan.csv, tracking.csv and summary.json --
nothing is recomputed from dynamics. Joint and torque panels draw the
configured limits as dotted lines, taken from the manifest's config echo.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RAD2DEG = 180.0 / np.pi

FIGURE_NAMES = (
    "joint_motion",
    "cost_metrics",
    "base_linear",
    "base_angular",
    "tracking_errors",
    "tracking_torques",
)


class SchemaError(Exception):
    """A required CSV column is missing."""


@dataclass
class FigureSpec:
    """Inputs and output layout for one rendering pass."""

    run_dir: Path
    out_dir: Path | None = None
    fmt: str = "png"
    dpi: int = 110
    figures: tuple[str, ...] = FIGURE_NAMES
    axis_limits: dict = field(default_factory=dict)

    def __post_init__(self):
        self.run_dir = Path(self.run_dir)
        self.out_dir = Path(self.out_dir) if self.out_dir else self.run_dir / "figures"
        if self.fmt not in ("png", "pdf"):
            raise ValueError(f"unsupported format {self.fmt!r}")
        unknown = set(self.figures) - set(FIGURE_NAMES)
        if unknown:
            raise ValueError(f"unknown figures: {sorted(unknown)}")


class RunData:
    """Schema-checked access to the run artifacts."""

    def __init__(self, run_dir: Path):
        run_dir = Path(run_dir)
        self.plan_header, self.plan = _read_csv(run_dir / "plan.csv")
        self.track_header, self.track = _read_csv(run_dir / "tracking.csv")
        self.manifest = json.loads((run_dir / "summary.json").read_text())
        self.n = sum(1 for c in self.plan_header if c.startswith("alpha"))

    def plan_col(self, name: str) -> np.ndarray:
        return _column(self.plan_header, self.plan, name, "plan.csv")

    def track_col(self, name: str) -> np.ndarray:
        return _column(self.track_header, self.track, name, "tracking.csv")

    def plan_block(self, prefix: str) -> np.ndarray:
        return np.stack([self.plan_col(f"{prefix}{i}") for i in range(1, self.n + 1)], axis=1)

    def track_block(self, prefix: str) -> np.ndarray:
        return np.stack([self.track_col(f"{prefix}{i}") for i in range(1, self.n + 1)], axis=1)


def _read_csv(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"missing run artifact: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    return header, data


def _column(header, data, name, where):
    if name not in header:
        raise SchemaError(f"{where}: required column {name!r} is missing")
    return data[:, header.index(name)]


def _limits(manifest):
    planner = manifest["config"]["planner"]
    controller = manifest["config"]["controller"]
    return {
        "q_max_deg": list(planner["q_max_deg"]),
        "qd_max_deg": list(planner["qd_max_deg"]),
        "tau_max": list(controller["tau_max"]),
        "r_th": planner["r_th"],
    }


def _dotted_limits(ax, values, colors):
    for v, c in zip(values, colors):
        ax.axhline(v, linestyle=":", linewidth=0.9, color=c)
        ax.axhline(-v, linestyle=":", linewidth=0.9, color=c)


def _fig_joint_motion(data: RunData, limits):
    t = data.plan_col("t")
    q = data.plan_block("q") * RAD2DEG
    qd = data.plan_block("qd") * RAD2DEG
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    colors = [f"C{i}" for i in range(data.n)]
    for i in range(data.n):
        axes[0].plot(t, q[:, i], color=colors[i], label=f"joint {i + 1}")
        axes[1].plot(t, qd[:, i], color=colors[i])
    _dotted_limits(axes[0], limits["q_max_deg"], colors)
    _dotted_limits(axes[1], limits["qd_max_deg"], colors)
    axes[0].set_ylabel("joint angle [deg]")
    axes[1].set_ylabel("joint rate [deg/s]")
    axes[1].set_xlabel("time [s]")
    axes[0].legend(loc="upper right", fontsize=8)
    fig.suptitle("Planned joint motion (dotted: limits)")
    return fig, {"q_limits_deg": limits["q_max_deg"], "qd_limits_deg": limits["qd_max_deg"]}


def _fig_cost_metrics(data: RunData, limits):
    t = data.plan_col("t")
    fig, axes = plt.subplots(3, 1, figsize=(7, 7.5), sharex=True)
    axes[0].plot(t, data.plan_col("step_cost"), color="C3")
    axes[0].set_ylabel("step cost")
    axes[1].plot(t, data.plan_col("cos_theta_a"), color="C0", label="cos(theta_a)")
    axes[1].plot(t, data.plan_col("Ctilde"), color="C2", label="C~")
    axes[1].plot(t, 1.0 - data.plan_col("Hnorm"), color="C5",
                 linestyle="--", linewidth=0.9, label="1 - Hnorm")
    axes[1].legend(loc="upper right", fontsize=8)
    axes[1].set_ylabel("coupling metrics")
    rex, rey, rez = (data.plan_col(c) for c in ("rex", "rey", "rez"))
    r_d = np.asarray(data.manifest["config"]["r_d"])
    err = np.linalg.norm(np.stack([rex, rey, rez], axis=1) - r_d, axis=1)
    axes[2].plot(t, err, color="C1")
    axes[2].axhline(limits["r_th"], linestyle=":", linewidth=0.9, color="k")
    axes[2].set_ylabel("EE position error [m]")
    axes[2].set_xlabel("time [s]")
    fig.suptitle("Coupling cost, assistance metric, end-effector error")
    return fig, {"r_th": limits["r_th"]}


def _fig_base_linear(data: RunData, limits):
    t = data.plan_col("t")
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for i, c in enumerate(("rbx", "rby", "rbz")):
        axes[0].plot(t, data.plan_col(c), label=c, color=f"C{i}")
        axes[1].plot(t, data.plan_col("v" + c[1:]), color=f"C{i}")
    axes[0].set_ylabel("base position [m]")
    axes[1].set_ylabel("base velocity [m/s]")
    axes[1].set_xlabel("time [s]")
    axes[0].legend(loc="upper right", fontsize=8)
    fig.suptitle("Induced base linear motion")
    return fig, {}


def _fig_base_angular(data: RunData, limits):
    t = data.plan_col("t")
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for i, c in enumerate(("e1", "e2", "e3", "e4")):
        axes[0].plot(t, data.plan_col(c), label=c, color=f"C{i}")
    for i, c in enumerate(("wbx", "wby", "wbz")):
        axes[1].plot(t, data.plan_col(c) * RAD2DEG, color=f"C{i}", label=c)
    axes[0].set_ylabel("base quaternion")
    axes[1].set_ylabel("base rate [deg/s]")
    axes[1].set_xlabel("time [s]")
    axes[0].legend(loc="center right", fontsize=8)
    axes[1].legend(loc="upper right", fontsize=8)
    fig.suptitle("Induced base angular motion")
    return fig, {}


def _fig_tracking_errors(data: RunData, limits):
    t = data.track_col("t")
    qe = data.track_block("qe") * RAD2DEG
    qde = data.track_block("qde") * RAD2DEG
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for i in range(data.n):
        axes[0].plot(t, qe[:, i], color=f"C{i}", label=f"joint {i + 1}")
        axes[1].plot(t, qde[:, i], color=f"C{i}")
    axes[0].set_ylabel("angle error [deg]")
    axes[1].set_ylabel("rate error [deg/s]")
    axes[1].set_xlabel("time [s]")
    axes[0].legend(loc="upper right", fontsize=8)
    fig.suptitle("Tracking errors")
    return fig, {}


def _fig_tracking_torques(data: RunData, limits):
    t = data.track_col("t")
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    axes[0].plot(t, data.track_col("ee_err"), color="C1")
    axes[0].axhline(limits["r_th"], linestyle=":", linewidth=0.9, color="k")
    axes[0].set_ylabel("EE position error [m]")
    tau = data.track_block("tau")
    colors = [f"C{i}" for i in range(data.n)]
    for i in range(data.n):
        axes[1].plot(t, tau[:, i], color=colors[i], label=f"joint {i + 1}")
    _dotted_limits(axes[1], limits["tau_max"], colors)
    axes[1].set_ylabel("joint torque [N m]")
    axes[1].set_xlabel("time [s]")
    axes[1].legend(loc="upper right", fontsize=8)
    fig.suptitle("Controlled end-effector error and joint torques (dotted: limits)")
    return fig, {"tau_limits": limits["tau_max"]}


_BUILDERS = {
    "joint_motion": _fig_joint_motion,
    "cost_metrics": _fig_cost_metrics,
    "base_linear": _fig_base_linear,
    "base_angular": _fig_base_angular,
    "tracking_errors": _fig_tracking_errors,
    "tracking_torques": _fig_tracking_torques,
}


def render_figures(run_dir, spec: FigureSpec | None = None) -> tuple[list[Path], dict]:
    """Render the figure set for a run directory.

    Returns (written paths, info) where info records the limit-line values
    drawn per figure, straight from the manifest's config echo.
    """
    spec = spec or FigureSpec(run_dir=run_dir)
    data = RunData(spec.run_dir)
    limits = _limits(data.manifest)
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    info = {}
    meta = {"CreationDate": None} if spec.fmt == "pdf" else None
    for name in spec.figures:
        fig, drawn = _BUILDERS[name](data, limits)
        if name in spec.axis_limits:
            for ax in fig.axes:
                ax.set_ylim(*spec.axis_limits[name])
        out = spec.out_dir / f"{name}.{spec.fmt}"
        fig.savefig(out, dpi=spec.dpi, metadata=meta)
        plt.close(fig)
        paths.append(out)
        info[name] = drawn
    return paths, info


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot_run", description="Render figures for a scenario run directory."
    )
    parser.add_argument("run_dir", help="directory containing plan.csv, tracking.csv, summary.json")
    parser.add_argument("--format", choices=("png", "pdf"), default="png")
    parser.add_argument("--out", default=None, help="output directory (default: <run>/figures)")
    args = parser.parse_args(argv)
    try:
        paths, _ = render_figures(
            args.run_dir,
            FigureSpec(run_dir=args.run_dir, out_dir=args.out, fmt=args.format),
        )
    except (SchemaError, FileNotFoundError) as exc:
        print(f"plot_run: {exc}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
