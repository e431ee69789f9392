"""Scenario configuration: TOML parsing, validation, testbed defaults.

Every field is optional; unspecified values fall back to the testbed
parameter set (masses, inertias, limits, gains) and are echoed into the
run manifest so a scenario is always fully reproducible from its outputs.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .control import SmcGains
from .errors import ConfigError, ValidationError
from .model import BodyParams, SmsModel, SmsState
from .planner import PlannerConfig

_DEG = np.pi / 180.0

TESTBED_DEFAULTS = {
    "base": {"mass": 31.015, "inertia": [1.1594, 1.1594, 1.1129],
             "dims": [0.464, 0.464, 0.483]},
    "link": {"mass": 0.569, "inertia": [0.0001, 0.0043, 0.0043],
             "length": 0.3, "width": 0.03, "height": 0.03},
    "n_links": 3,
    "initial": {"r_b": [-0.0356, -0.0006, 0.0], "eps": [0.0, 0.0, 0.0, 1.0],
                "q_deg": [1.0, 1.0, 1.0]},
    "planner": {"dt_plan": 0.05, "horizon": 10.0, "kappa": 10.0,
                "q_max_deg": [81.0, 162.0, 162.0],
                "qd_max_deg": [22.92, 22.92, 22.92],
                "qdd_max_deg": [28.65, 28.65, 28.65],
                "d_safe": 0.01, "r_th": 0.02,
                "terminal_window_fraction": 0.1,
                "candidates": 200, "refine_sweeps": 3,
                "literal_box_and": False},
    "controller": {"Gamma": [10.0, 10.0, 10.0], "K_s": [0.001, 0.001, 0.001],
                   "lambda": 0.02, "tau_max": [3.5, 1.5, 1.5], "dt_ctrl": 1e-3},
}


@dataclass
class ScenarioConfig:
    """Fully resolved scenario: model, initial state, limits, gains, goal."""

    label: str
    seed: int
    model: SmsModel
    initial: SmsState
    planner: PlannerConfig
    gains: SmcGains
    r_d: np.ndarray
    probes: bool = True
    echo: dict = field(default_factory=dict)


def _inertia_tensor(values, where: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape == (3,):
        return np.diag(arr)
    if arr.shape == (3, 3):
        return arr
    raise ConfigError(f"{where}: inertia must be 3 principal values or a 3x3 matrix")


def _build_body(raw: dict, defaults: dict, where: str) -> BodyParams:
    mass = float(raw.get("mass", defaults["mass"]))
    inertia = _inertia_tensor(raw.get("inertia", defaults["inertia"]), where)
    if "dims" in defaults:
        dims = raw.get("dims", defaults["dims"])
    else:
        dims = [raw.get("length", defaults["length"]),
                raw.get("width", defaults["width"]),
                raw.get("height", defaults["height"])]
    try:
        return BodyParams(mass=mass, inertia=inertia, dims=tuple(float(d) for d in dims))
    except ValidationError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def resolve_config(raw: dict, label: str = "scenario") -> ScenarioConfig:
    """Validate a raw mapping and fill defaults; raises ConfigError with the
    offending field path."""
    d = TESTBED_DEFAULTS
    model_raw = raw.get("model", {})
    base = _build_body(model_raw.get("base", {}), d["base"], "model.base")

    links_raw = model_raw.get("links")
    if links_raw is None:
        links_raw = [{} for _ in range(d["n_links"])]
    links = tuple(
        _build_body(lr, d["link"], f"model.links[{i}]") for i, lr in enumerate(links_raw)
    )
    n = len(links)
    link_len = np.array([l.dims[0] for l in links])

    axes = model_raw.get("joint_axes", [[0.0, 0.0, 1.0]] * n)
    mount = model_raw.get("mount_offset", [0.5 * base.dims[0], 0.0, 0.0])
    com_off = model_raw.get("link_com_offset",
                            [[0.5 * L, 0.0, 0.0] for L in link_len])
    tip_off = model_raw.get("link_tip_offset", [[L, 0.0, 0.0] for L in link_len])
    try:
        model = SmsModel(base=base, links=links, joint_axes=np.asarray(axes, dtype=float),
                         mount_offset=mount, link_com_offset=com_off,
                         link_tip_offset=tip_off)
    except ValidationError as exc:
        raise ConfigError(f"model: {exc}") from exc

    init_raw = model_raw.get("initial", {})
    try:
        initial = SmsState(
            r_b=np.asarray(init_raw.get("r_b", d["initial"]["r_b"]), dtype=float),
            eps=np.asarray(init_raw.get("eps", d["initial"]["eps"]), dtype=float),
            q=np.asarray(init_raw.get("q_deg", d["initial"]["q_deg"]), dtype=float) * _DEG,
        )
    except Exception as exc:
        raise ConfigError(f"model.initial: {exc}") from exc

    p_raw = dict(d["planner"])
    p_raw.update(raw.get("planner", {}))
    seed = int(raw.get("seed", 0))
    try:
        planner = PlannerConfig(
            dt_plan=float(p_raw["dt_plan"]),
            horizon=float(p_raw["horizon"]),
            kappa=float(p_raw["kappa"]),
            q_max=np.asarray(p_raw["q_max_deg"], dtype=float) * _DEG,
            qd_max=np.asarray(p_raw["qd_max_deg"], dtype=float) * _DEG,
            qdd_max=np.asarray(p_raw["qdd_max_deg"], dtype=float) * _DEG,
            d_safe=float(p_raw["d_safe"]),
            r_th=float(p_raw["r_th"]),
            terminal_window_fraction=float(p_raw["terminal_window_fraction"]),
            candidates=int(p_raw["candidates"]),
            refine_sweeps=int(p_raw["refine_sweeps"]),
            literal_box_and=bool(p_raw["literal_box_and"]),
            seed=seed,
        )
    except ValidationError as exc:
        raise ConfigError(f"planner: {exc}") from exc
    for name in ("q_max_deg", "qd_max_deg", "qdd_max_deg"):
        vals = np.asarray(p_raw[name], dtype=float)
        if vals.shape != (n,):
            raise ConfigError(f"planner.{name}: expected {n} entries, got {vals.shape}")

    c_raw = dict(d["controller"])
    c_raw.update(raw.get("controller", {}))
    try:
        gains = SmcGains(
            Gamma=np.diag(np.asarray(c_raw["Gamma"], dtype=float))
            if np.asarray(c_raw["Gamma"]).ndim == 1 else np.asarray(c_raw["Gamma"], dtype=float),
            K_s=np.diag(np.asarray(c_raw["K_s"], dtype=float))
            if np.asarray(c_raw["K_s"]).ndim == 1 else np.asarray(c_raw["K_s"], dtype=float),
            lam=float(c_raw["lambda"]),
            tau_max=np.asarray(c_raw["tau_max"], dtype=float),
            dt_ctrl=float(c_raw["dt_ctrl"]),
        )
    except ValidationError as exc:
        raise ConfigError(f"controller: {exc}") from exc

    if "r_d" not in raw:
        raise ConfigError("r_d: desired end-effector position is required")
    r_d = np.asarray(raw["r_d"], dtype=float)
    if r_d.shape != (3,):
        raise ConfigError(f"r_d: expected 3 components, got shape {r_d.shape}")

    echo = {
        "label": raw.get("label", label),
        "seed": seed,
        "r_d": r_d.tolist(),
        "model": {
            "base": {"mass": base.mass, "inertia": np.diag(base.inertia).tolist(),
                     "dims": list(base.dims)},
            "links": [{"mass": l.mass, "inertia": np.diag(l.inertia).tolist(),
                       "dims": list(l.dims)} for l in links],
            "initial": {"r_b": initial.r_b.tolist(), "eps": initial.eps.tolist(),
                        "q_deg": (initial.q / _DEG).tolist()},
        },
        "planner": {k: (list(v) if isinstance(v, (list, tuple)) else v)
                    for k, v in p_raw.items()},
        "controller": {k: (list(v) if isinstance(v, (list, tuple)) else v)
                       for k, v in c_raw.items()},
    }
    return ScenarioConfig(
        label=str(raw.get("label", label)), seed=seed, model=model,
        initial=initial, planner=planner, gains=gains, r_d=r_d,
        probes=bool(raw.get("probes", True)), echo=echo,
    )


def load_config(path: str | Path) -> ScenarioConfig:
    """Parse and validate a TOML scenario file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from exc
    return resolve_config(raw, label=path.stem)


def bundled_config_path(name: str) -> Path:
    """Path of a bundled scenario file (case1, case2)."""
    return Path(__file__).parent / "configs" / f"{name}.toml"
