"""Coupling-informed trajectory planning.

Each step picks joint-rate scaling factors alpha over the coupling
directions V(k) that minimize the step cost
(softplus(kappa*cos_theta)/kappa - (1 - H_norm))^2, subject to joint,
self/base collision and terminal constraints. The cost is invariant to the
magnitude of the induced motion, so the end-effector speed is scheduled
separately to arrive inside the terminal ball before the terminal window
opens; among cost-optimal candidates the planner prefers goal progress.

Base motion follows from momentum conservation, [v_b; w_b] = C_bm qd, and
is integrated alongside the joints so every emitted plan carries (numerically)
zero momentum.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .coupling import (
    CouplingAnalysis,
    analyze_coupling,
    assist_metric,
    softplus_cost,
)
from .dynamics import get_engine, inertia_blocks
from .errors import InfeasibleStepError, ValidationError
from .kinematics import forward_kinematics, link_jacobians, quat_multiply, quat_rate, quat_to_rotation
from .model import SmsModel, SmsState

log = logging.getLogger(__name__)

_DEG = np.pi / 180.0


@dataclass
class PlannerConfig:
    """Grid, limits and optimizer settings for trajectory generation."""

    dt_plan: float = 0.05
    horizon: float = 10.0
    kappa: float = 10.0
    q_max: np.ndarray = field(default_factory=lambda: np.array([81.0, 162.0, 162.0]) * _DEG)
    qd_max: np.ndarray = field(default_factory=lambda: np.array([22.92, 22.92, 22.92]) * _DEG)
    qdd_max: np.ndarray = field(default_factory=lambda: np.array([28.65, 28.65, 28.65]) * _DEG)
    d_safe: float = 0.01
    r_th: float = 0.02
    terminal_window_fraction: float = 0.1
    base_box_margin: float = 0.005
    literal_box_and: bool = False
    candidates: int = 200
    refine_sweeps: int = 3
    seed: int = 0
    screen_margin: float = 1e-3
    arrival_fraction: float = 0.8  # aim to arrive by this fraction of the horizon
    target_error_fraction: float = 0.4  # settle at this fraction of r_th

    def __post_init__(self):
        self.q_max = np.asarray(self.q_max, dtype=float)
        self.qd_max = np.asarray(self.qd_max, dtype=float)
        self.qdd_max = np.asarray(self.qdd_max, dtype=float)
        for name in ("q_max", "qd_max", "qdd_max"):
            if np.any(getattr(self, name) <= 0.0):
                raise ValidationError(f"{name} entries must be strictly positive")
        if not (0.0 < self.terminal_window_fraction < 1.0):
            raise ValidationError("terminal_window_fraction must be in (0, 1)")
        if self.dt_plan <= 0.0 or self.horizon <= 0.0:
            raise ValidationError("dt_plan and horizon must be positive")
        if self.d_safe <= 0.0 or self.r_th <= 0.0:
            raise ValidationError("d_safe and r_th must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt_plan))

    @property
    def terminal_start(self) -> int:
        """First grid index of the terminal window."""
        return int(np.ceil((1.0 - self.terminal_window_fraction) * self.n_steps))


@dataclass
class CollisionGeometry:
    """Arm check points (joints, link midpoints, end-effector) and the base box.

    `body_ids[i]` lists the rigid bodies point i is attached to; pairs that
    share a body have constant separation and are skipped in the clearance
    check. `checked_pairs` holds the remaining (i, j), i < j.
    """

    labels: list[str]
    body_ids: list[frozenset[int]]
    checked_pairs: list[tuple[int, int]]
    base_dims: tuple[float, float, float]

    @classmethod
    def from_model(cls, model: SmsModel) -> "CollisionGeometry":
        n = model.n
        labels = []
        body_ids = []
        for i in range(1, n + 1):
            labels.append(f"joint{i}")
            body_ids.append(frozenset({i - 1, i}))
            labels.append(f"mid{i}")
            body_ids.append(frozenset({i}))
        labels.append("ee")
        body_ids.append(frozenset({n}))
        pairs = [
            (i, j)
            for i in range(len(labels))
            for j in range(i + 1, len(labels))
            if not (body_ids[i] & body_ids[j])
        ]
        return cls(labels=labels, body_ids=body_ids, checked_pairs=pairs,
                   base_dims=model.base.dims)

    @property
    def n_points(self) -> int:
        return len(self.labels)


def collision_points(model: SmsModel, cache) -> np.ndarray:
    """Check points in chain order: joint_i, mid_i for each link, then the EE."""
    pts = []
    for i in range(model.n):
        pts.append(cache.p[i])
        pts.append(cache.p[i] + cache.R[i] @ (0.5 * model.link_tip_offset[i]))
    pts.append(cache.r_e)
    return np.array(pts)


def _batched_rotations(eps: np.ndarray) -> np.ndarray:
    """(L,4) unit quaternions -> (L,3,3) rotation matrices."""
    x, y, z, w = eps[:, 0], eps[:, 1], eps[:, 2], eps[:, 3]
    R = np.empty((eps.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def batched_check_points(model: SmsModel, r_b: np.ndarray, eps: np.ndarray,
                         q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized FK over L configurations.

    Returns (points (L, 2n+1, 3), R_b (L,3,3)); point order matches
    `collision_points`.
    """
    L, n = q.shape
    R_b = _batched_rotations(eps)
    pts = np.empty((L, 2 * n + 1, 3))
    R_prev = R_b
    pj = r_b + np.einsum("lij,j->li", R_b, model.mount_offset)
    eye = np.eye(3)
    for i in range(n):
        k = model.joint_axes[i]
        K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
        kkT = np.outer(k, k)
        c = np.cos(q[:, i])[:, None, None]
        s = np.sin(q[:, i])[:, None, None]
        R_rel = c * eye + s * K + (1.0 - c) * kkT
        R_i = np.einsum("lij,ljk->lik", R_prev, R_rel)
        pts[:, 2 * i] = pj
        pts[:, 2 * i + 1] = pj + np.einsum("lij,j->li", R_i, 0.5 * model.link_tip_offset[i])
        pj = pj + np.einsum("lij,j->li", R_i, model.link_tip_offset[i])
        R_prev = R_i
    pts[:, 2 * n] = pj
    return pts, R_b


def batched_manipulability(model: SmsModel, r_b: np.ndarray, eps: np.ndarray,
                           q: np.ndarray) -> np.ndarray:
    """Product of the two largest singular values of the end-effector
    translational Jacobian, batched over L configurations.

    A planar chain has one structurally zero singular value, so the top-2
    product measures in-plane dexterity; near stretched-out poses it
    collapses and goal-directed speed becomes the bottleneck.
    """
    L, n = q.shape
    R_b = _batched_rotations(eps)
    R_prev = R_b
    pj = r_b + np.einsum("lij,j->li", R_b, model.mount_offset)
    eye = np.eye(3)
    axes = np.empty((L, n, 3))
    joints = np.empty((L, n, 3))
    for i in range(n):
        k = model.joint_axes[i]
        K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
        kkT = np.outer(k, k)
        c = np.cos(q[:, i])[:, None, None]
        s = np.sin(q[:, i])[:, None, None]
        axes[:, i] = np.einsum("lij,j->li", R_prev, k)
        R_i = np.einsum("lij,ljk->lik", R_prev, c * eye + s * K + (1.0 - c) * kkT)
        joints[:, i] = pj
        pj = pj + np.einsum("lij,j->li", R_i, model.link_tip_offset[i])
        R_prev = R_i
    jte = np.cross(axes, pj[:, None, :] - joints)  # (L,n,3) columns as rows
    sv = np.linalg.svd(jte, compute_uv=False)      # (L, min(n,3)) descending
    if sv.shape[1] < 2:
        return sv[:, 0]
    return sv[:, 0] * sv[:, 1]


@dataclass
class ConstraintFamily:
    name: str
    ok: bool
    margin: float
    detail: str = ""


@dataclass
class ConstraintReport:
    """Per-family pass/fail with worst margins (positive margin = satisfied)."""

    step: int
    families: dict[str, ConstraintFamily]

    @property
    def ok(self) -> bool:
        return all(f.ok for f in self.families.values())

    def worst(self) -> ConstraintFamily:
        return min(self.families.values(), key=lambda f: f.margin)

    def summary(self) -> dict:
        return {
            "step": self.step,
            "ok": self.ok,
            "families": {
                name: {"ok": f.ok, "margin": f.margin, "detail": f.detail}
                for name, f in self.families.items()
            },
        }


def _box_margins(points: np.ndarray, r_b: np.ndarray, R_b: np.ndarray,
                 dims: tuple[float, float, float], extra: float,
                 literal_and: bool) -> np.ndarray:
    """Per-point base-box margin, batched over (L, P, 3) points.

    Point-outside-box semantics: a point passes if at least one body-frame
    coordinate exceeds its half-extent (positive margin). literal_and
    requires all three simultaneously, the printed-inequality reading.
    """
    rel = points - r_b[:, None, :]
    f = np.einsum("lji,lpj->lpi", R_b, rel)  # body-frame components
    half = 0.5 * np.asarray(dims) + extra
    per_axis = np.abs(f) - half
    if literal_and:
        return per_axis.min(axis=2)
    return per_axis.max(axis=2)


def check_constraints(
    model: SmsModel,
    config: PlannerConfig,
    geometry: CollisionGeometry,
    q: np.ndarray,
    qd: np.ndarray,
    qdd: np.ndarray,
    r_b: np.ndarray,
    eps: np.ndarray,
    r_d: np.ndarray,
    k: int,
    box_margin: float | None = None,
) -> ConstraintReport:
    """Evaluate every constraint family at one grid point (reporting only)."""
    fams: dict[str, ConstraintFamily] = {}
    tol = 1e-10  # closed inequalities: exact saturation at a limit passes

    def scalar_family(name, margins, labels=None):
        i = int(np.argmin(margins))
        detail = labels[i] if labels is not None else f"joint{i + 1}"
        fams[name] = ConstraintFamily(name, bool(margins[i] >= -tol), float(margins[i]), detail)

    scalar_family("joint_angle", config.q_max - np.abs(q))
    scalar_family("joint_velocity", config.qd_max - np.abs(qd))
    scalar_family("joint_acceleration", config.qdd_max - np.abs(qdd))

    pts, R_b = batched_check_points(model, r_b[None, :], eps[None, :], q[None, :])
    pts0 = pts[0]
    pairs = geometry.checked_pairs
    dists = np.linalg.norm(pts0[[i for i, _ in pairs]] - pts0[[j for _, j in pairs]], axis=1)
    margins = dists - config.d_safe
    i = int(np.argmin(margins))
    fams["pairwise_clearance"] = ConstraintFamily(
        "pairwise_clearance", bool(margins[i] >= -tol), float(margins[i]),
        f"{geometry.labels[pairs[i][0]]}-{geometry.labels[pairs[i][1]]}",
    )

    bm = _box_margins(pts, r_b[None, :], R_b,
                      geometry.base_dims,
                      config.base_box_margin if box_margin is None else box_margin,
                      config.literal_box_and)[0][1:]  # mount joint excluded
    i = int(np.argmin(bm))
    fams["base_box"] = ConstraintFamily(
        "base_box", bool(bm[i] >= -tol), float(bm[i]), geometry.labels[1 + i]
    )

    if k >= config.terminal_start:
        err = float(np.linalg.norm(r_d - pts0[-1]))
        fams["terminal"] = ConstraintFamily("terminal", err <= config.r_th + tol,
                                            config.r_th - err, f"error {err:.4f} m")
    return ConstraintReport(step=k, families=fams)


def step_cost(c_tilde: float, h_norm: float) -> float:
    """Single-step coupling cost (C_tilde - (1 - H_norm))^2."""
    return (c_tilde - (1.0 - h_norm)) ** 2


def _target_alignment(h_norm: float, kappa: float) -> float:
    """cos(theta) value that zeroes the step cost, clamped to [-1, 1]."""
    target = 1.0 - h_norm
    x = np.expm1(kappa * target)
    if x <= 0.0:
        return -1.0
    return float(np.clip(np.log(x) / kappa, -1.0, 1.0))


@dataclass
class StepDecision:
    """Outcome of one per-step optimization."""

    alpha: np.ndarray
    qd: np.ndarray
    cos_theta_a: float
    c_tilde: float
    cost: float
    progress: float
    clip_counts: dict


class _StepOptimizer:
    """Candidate generation, screening and refinement for one planning step."""

    def __init__(self, model: SmsModel, config: PlannerConfig,
                 geometry: CollisionGeometry, r_d: np.ndarray):
        self.model = model
        self.cfg = config
        self.geo = geometry
        self.r_d = np.asarray(r_d, dtype=float)
        pairs = geometry.checked_pairs
        self._pi = np.array([i for i, _ in pairs])
        self._pj = np.array([j for _, j in pairs])

    # -- candidate pipeline -------------------------------------------------

    def _clip(self, qd_raw: np.ndarray, qd_prev: np.ndarray) -> tuple[np.ndarray, dict]:
        """Component-wise velocity and acceleration clipping, with counters."""
        cfg = self.cfg
        vel_clipped = np.clip(qd_raw, -cfg.qd_max, cfg.qd_max)
        dv_lim = cfg.qdd_max * cfg.dt_plan
        dv = np.clip(vel_clipped - qd_prev, -dv_lim, dv_lim)
        qd = qd_prev + dv
        counts = {
            "velocity": int(np.sum(np.abs(qd_raw) > cfg.qd_max + 1e-15)),
            "acceleration": int(np.sum(np.abs(vel_clipped - qd_prev) > dv_lim + 1e-15)),
        }
        return qd, counts

    def _screen(self, state: SmsState, c_bm: np.ndarray, qd_set: np.ndarray,
                k: int) -> tuple[np.ndarray, np.ndarray]:
        """Feasibility of each candidate at the look-ahead state and at the
        braking extrapolation beyond it.

        The stop state (worst-case coast while decelerating at the joint
        acceleration limit) must also clear every geometric constraint, so
        an accepted candidate always leaves a feasible escape by braking;
        without this, momentum can wedge the arm against a constraint
        boundary that no single step can undo.

        Returns (feasible mask, worst screening margin per candidate).
        """
        cfg = self.cfg
        dt = cfg.dt_plan
        L = qd_set.shape[0]
        q_next = state.q + dt * qd_set
        # position change if braking at full deceleration from qd_set
        q_stop = q_next + qd_set * np.abs(qd_set) / (2.0 * cfg.qdd_max)
        margins = np.full(L, np.inf)

        margins = np.minimum(margins, (cfg.q_max - np.abs(q_next)).min(axis=1))
        margins = np.minimum(margins, (cfg.q_max - np.abs(q_stop)).min(axis=1))

        xb = (c_bm @ qd_set.T).T  # (L,6) base twist per candidate
        t_stop = np.abs(qd_set).max(axis=1, keepdims=True) / cfg.qdd_max.min()
        for q_eval, r_eval, w_scale in (
            (q_next, state.r_b + dt * xb[:, :3], dt),
            (q_stop, state.r_b + (dt + 0.5 * t_stop) * xb[:, :3], None),
        ):
            if w_scale is not None:
                eps_eval = _advance_quaternion(state.eps, xb[:, 3:], dt)
            else:
                eps_eval = _advance_quaternion(
                    state.eps, xb[:, 3:] * (1.0 + 0.5 * t_stop / dt), dt)
            pts, R_b = batched_check_points(self.model, r_eval, eps_eval, q_eval)

            d = np.linalg.norm(pts[:, self._pi] - pts[:, self._pj], axis=2)
            margins = np.minimum(margins, d.min(axis=1) - cfg.d_safe - cfg.screen_margin)

            bm = _box_margins(pts, r_eval, R_b, self.geo.base_dims,
                              cfg.base_box_margin + cfg.screen_margin,
                              cfg.literal_box_and)[:, 1:]
            margins = np.minimum(margins, bm.min(axis=1))

            if k + 1 >= cfg.terminal_start:
                err_next = np.linalg.norm(self.r_d - pts[:, -1], axis=1)
                margins = np.minimum(margins, cfg.r_th - cfg.screen_margin - err_next)

        return margins >= 0.0, margins

    @staticmethod
    def _z_window(A, null_dir, lo, hi, s):
        """Interval of null coefficients z with lo <= s*A + z*null_dir <= hi."""
        zlo, zhi = -np.inf, np.inf
        for j in range(A.size):
            base = s * A[j]
            nj = null_dir[j] if null_dir is not None else 0.0
            if abs(nj) < 1e-12:
                if base < lo[j] - 1e-12 or base > hi[j] + 1e-12:
                    return None
                continue
            a = (lo[j] - base) / nj
            b = (hi[j] - base) / nj
            if a > b:
                a, b = b, a
            zlo, zhi = max(zlo, a), min(zhi, b)
            if zlo > zhi:
                return None
        if null_dir is None:
            return (0.0, 0.0)
        if not np.isfinite(zlo):
            zlo = zhi if np.isfinite(zhi) else 0.0
        if not np.isfinite(zhi):
            zhi = zlo
        return (zlo, zhi)

    @classmethod
    def _speed_range_in_box(cls, A, null_dir, lo, hi, s_cap):
        """(s_min, s_max) over s in [0, s_cap] with s*A + z*null_dir inside
        the box for some z, by vertex enumeration of the 2-variable polygon.

        The feasible s-set may exclude s = 0 (the box sits away from the
        origin once the arm is moving), which is why the minimum matters:
        it is the slowest on-cone speed reachable this step.
        """
        lines = [(1.0, 0.0, 0.0), (1.0, 0.0, s_cap)]
        for j in range(A.size):
            nj = null_dir[j] if null_dir is not None else 0.0
            lines.append((A[j], nj, lo[j]))
            lines.append((A[j], nj, hi[j]))

        def feasible(s, z, tol=1e-9):
            if s < -tol or s > s_cap + tol:
                return False
            for j in range(A.size):
                nj = null_dir[j] if null_dir is not None else 0.0
                v = s * A[j] + z * nj
                if v < lo[j] - tol or v > hi[j] + tol:
                    return False
            return True

        s_min = s_max = None
        for i in range(len(lines)):
            a1, b1, c1 = lines[i]
            for k in range(i + 1, len(lines)):
                a2, b2, c2 = lines[k]
                det = a1 * b2 - a2 * b1
                if abs(det) < 1e-14:
                    continue
                s = (c1 * b2 - c2 * b1) / det
                z = (a1 * c2 - a2 * c1) / det
                if feasible(s, z):
                    s_max = s if s_max is None else max(s_max, s)
                    s_min = s if s_min is None else min(s_min, s)
        if s_max is None:
            return None
        return max(s_min, 0.0), s_max

    def _cone_candidates(self, analysis: CouplingAnalysis, qd_prev: np.ndarray,
                         d_hat: np.ndarray, c_star: float,
                         speed: float) -> list[np.ndarray]:
        """Joint rates achieving cos(theta) = c_star exactly, box-feasible.

        The step cost vanishes on the whole cone, so these are global
        minimizers whenever reachable. Several speed fractions and null
        coefficients are emitted: slower variants free box budget for
        internal (null-space) motion, which costs nothing and buys
        manipulability near stretched-out configurations.
        """
        cfg = self.cfg
        jv = analysis.j_star[:3]
        u, sv, vt = np.linalg.svd(jv, full_matrices=True)
        rank = int((sv > 1e-9 * (sv[0] if sv.size else 1.0)).sum())
        inv = np.zeros((jv.shape[1], 3))
        for i in range(rank):
            inv += np.outer(vt[i], u[:, i]) / sv[i]
        null_dir = vt[rank] if rank == jv.shape[1] - 1 else None

        dv = cfg.qdd_max * cfg.dt_plan
        lo = np.maximum(-cfg.qd_max, qd_prev - dv) + 1e-12
        hi = np.minimum(cfg.qd_max, qd_prev + dv) - 1e-12
        if np.any(lo > hi):
            return []

        t1 = np.cross(d_hat, [0.0, 0.0, 1.0])
        if np.linalg.norm(t1) < 1e-9:
            t1 = np.cross(d_hat, [0.0, 1.0, 0.0])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(d_hat, t1)
        root = np.sqrt(max(0.0, 1.0 - c_star * c_star))

        out = []
        fallback = []
        for tv in (t1, -t1, t2, -t2):
            u_dir = c_star * d_hat + root * tv
            A = inv @ u_dir
            if np.linalg.norm(A) < 1e-12:
                continue
            # the achieved direction must actually lie on the cone
            achieved = jv @ A
            na = np.linalg.norm(achieved)
            if na < 1e-12 or abs(float(achieved @ d_hat) / na - c_star) > 1e-6:
                continue
            # box-clipped cone target: deterministic best effort even when
            # the exact cone is unreachable this step
            fallback.append(np.clip(speed * A, lo, hi))
            rng_s = self._speed_range_in_box(A, null_dir, lo, hi, 10.0 * speed + 1.0)
            if rng_s is None or rng_s[1] <= 1e-7:
                continue
            s_min, s_max = rng_s
            s_aim = float(np.clip(speed, max(s_min, 1e-7), s_max))
            trial_speeds = {s_aim, max(s_min, 1e-7),
                            float(np.clip(0.4 * s_aim, max(s_min, 1e-7), s_max))}
            for s in trial_speeds:
                w = self._z_window(A, null_dir, lo, hi, s)
                if w is None:
                    continue
                zs = (w[0], 0.5 * (w[0] + w[1]), w[1]) if null_dir is not None else (0.0,)
                for z in zs:
                    qd = s * A + (z * null_dir if null_dir is not None else 0.0)
                    out.append(qd)
        # deterministic extras: clipped cone targets and a full brake
        out.extend(fallback)
        out.append(np.clip(np.zeros(jv.shape[1]), lo, hi))
        return out

    def _candidates(self, analysis: CouplingAnalysis, state: SmsState,
                    d_hat: np.ndarray, c_star: float, speed: float,
                    alpha_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        cfg = self.cfg
        n = self.model.n
        cands = [np.zeros(n), alpha_prev.copy(), 0.5 * alpha_prev]
        jv = analysis.j_star[:3]
        pinv_v = np.linalg.pinv(jv, rcond=1e-8)

        def aimed(direction):
            qd = pinv_v @ (speed * direction)
            a = analysis.v.T @ qd
            m = np.abs(a).max()
            if m > 1.0:
                a = a / m
            return a

        cands.append(aimed(d_hat))
        sampled = rng.uniform(-1.0, 1.0, size=(cfg.candidates, n))
        return np.vstack([np.array(cands), sampled])

    # -- main entry ----------------------------------------------------------

    def optimize(self, state: SmsState, qd_prev: np.ndarray, k: int,
                 analysis: CouplingAnalysis, rng: np.random.Generator,
                 alpha_prev: np.ndarray, cache) -> StepDecision:
        cfg = self.cfg
        n = self.model.n
        r_e = cache.r_e
        d = self.r_d - r_e
        dist = float(np.linalg.norm(d))
        at_goal = dist <= 1e-9
        d_hat = d / dist if not at_goal else np.zeros(3)
        c_star = _target_alignment(analysis.h_norm, cfg.kappa)
        speed = self._speed_schedule(dist, k, c_star)

        alpha_cands = self._candidates(analysis, state, d_hat, c_star, speed,
                                       alpha_prev, rng)
        qd_raw = alpha_cands @ analysis.v.T  # (L,n): V @ alpha rows
        dv_lim = cfg.qdd_max * cfg.dt_plan
        qd_set = np.clip(qd_raw, -cfg.qd_max, cfg.qd_max)
        qd_set = qd_prev + np.clip(qd_set - qd_prev, -dv_lim, dv_lim)
        cone = self._cone_candidates(analysis, qd_prev, d_hat, c_star, speed)
        if cone:
            qd_set = np.vstack([np.array(cone), qd_set])

        feasible, margins = self._screen(state, analysis.c_bm, qd_set, k)
        if not feasible.any():
            worst = int(np.argmax(margins))
            raise InfeasibleStepError(
                f"step {k}: no feasible candidate; best screening margin "
                f"{margins[worst]:.4g}",
                report={"step": k, "best_margin": float(margins[worst])},
            )

        costs, progress = self._score(analysis, qd_set, d_hat, dist)
        costs = np.where(feasible, costs, np.inf)
        best = float(costs.min())
        band = np.flatnonzero(costs <= best + 1e-12)

        # monotone-error guard: from mid-horizon on, never trade progress away
        if k * cfg.dt_plan >= 0.45 * cfg.horizon:
            fwd = band[progress[band] >= 0.0]
            if fwd.size:
                band = fwd

        if dist <= 1.2 * cfg.target_error_fraction * cfg.r_th:
            # hold phase: creep, so second-order end-effector wander from
            # internal motion stays below the micro-meter scale
            score = -np.linalg.norm(qd_set[band], axis=1)
        else:
            # among (numerically exact) cost minimizers: progress plus a
            # bonus for internal motion that grows manipulability while the
            # chain is nearly stretched out, minus a joint-limit proximity
            # penalty that spends null motion keeping joints centered --
            # all free under the magnitude-invariant cost
            manip_now = float(batched_manipulability(
                self.model, state.r_b[None, :], state.eps[None, :], state.q[None, :])[0])
            fold_w = self._fold_weight(manip_now, dist, k)
            score = progress[band].copy()
            q_next = state.q + cfg.dt_plan * qd_set[band]
            limit_pen = ((np.abs(q_next) / cfg.q_max) ** 6).max(axis=1)
            score = score - 0.2 * limit_pen
            if fold_w > 0.0:
                manip_next = batched_manipulability(
                    self.model,
                    np.repeat(state.r_b[None, :], len(band), axis=0),
                    np.repeat(state.eps[None, :], len(band), axis=0),
                    q_next,
                )
                score = score + fold_w * (manip_next - manip_now) / cfg.dt_plan
        pick = band[int(np.argmax(score))]

        qd_best = qd_set[pick]
        cost_best = float(costs[pick])
        prog_best = float(progress[pick])
        if cost_best > 1e-20:
            qd_best, cost_best, prog_best = self._refine(
                analysis, state, qd_prev, k, qd_best, cost_best, prog_best, d_hat, dist
            )
        if cost_best > 1e-18:
            qd_best, cost_best, prog_best = self._cone_bisect(
                analysis, state, k, qd_set[feasible], qd_best, cost_best,
                prog_best, d_hat, dist, c_star,
            )

        alpha = np.clip(analysis.v.T @ qd_best, -1.0, 1.0)
        qd_final = analysis.v @ alpha
        metric = assist_metric(qd_final, analysis.j_star, r_e, self.r_d, cfg.kappa)
        _, counts = self._clip(qd_final, qd_prev)
        return StepDecision(
            alpha=alpha,
            qd=qd_final,
            cos_theta_a=metric.cos_theta_a,
            c_tilde=metric.c_tilde,
            cost=step_cost(metric.c_tilde, analysis.h_norm),
            progress=float(d_hat @ (analysis.j_star[:3] @ qd_final)),
            clip_counts=counts,
        )

    def _fold_weight(self, manip: float, dist: float, k: int,
                     floor: float = 0.15, scale: float = 8.0) -> float:
        """Weight of the manipulability-preservation bonus.

        Null-space motion changes dexterity without moving the end-effector,
        so spending it against singularity collapse is free -- but only while
        the time budget allows: the weight gates off when the remaining time
        barely covers the approach at cruise speed, and fades near the goal
        where the hold phase takes over. Monotone error decrease in the
        second half is protected separately by the progress filter.
        """
        cfg = self.cfg
        t = k * cfg.dt_plan
        t_arrive = cfg.arrival_fraction * cfg.horizon
        slack = (t_arrive - t) - dist / 0.2
        gate = float(np.clip(slack / 0.5, 0.0, 1.0))
        return scale * max(0.0, 1.0 - manip / floor) * min(1.0, dist / 0.25) * gate

    def _speed_schedule(self, dist: float, k: int, c_star: float) -> float:
        """Commanded end-effector speed.

        Fast enough to arrive before the terminal window, but always inside
        the braking envelope sqrt(2 a_brake gap) so the approach can slow
        down within the joint acceleration limits instead of overshooting.
        The step cost is speed-invariant, so this schedule is free.
        """
        cfg = self.cfg
        t = k * cfg.dt_plan
        t_arrive = cfg.arrival_fraction * cfg.horizon
        target = cfg.target_error_fraction * cfg.r_th
        gap = max(dist - 0.5 * target, 0.0)
        t_go = max(t_arrive - t, 2.0 * cfg.dt_plan)
        v_req = 2.0 * gap / t_go / max(c_star, 0.2)
        a_brake = 0.25
        v_brake = np.sqrt(2.0 * a_brake * gap)
        return float(np.clip(min(v_req, v_brake, 2.5 * gap), 1e-4, 0.45))

    def _score(self, analysis: CouplingAnalysis, qd_set: np.ndarray,
               d_hat: np.ndarray, dist: float) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        re_dc = qd_set @ analysis.j_star[:3].T  # (L,3)
        speeds = np.linalg.norm(re_dc, axis=1)
        progress = re_dc @ d_hat
        with np.errstate(invalid="ignore", divide="ignore"):
            cos_t = np.where(speeds > 1e-12, progress / np.where(speeds > 0, speeds, 1.0), 0.0)
        cos_t = np.clip(cos_t, -1.0, 1.0)
        x = cfg.kappa * cos_t
        c_tilde = (np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))) / cfg.kappa
        costs = (c_tilde - (1.0 - analysis.h_norm)) ** 2
        return costs, progress

    def _cone_bisect(self, analysis, state, k, qd_feasible, qd0, cost0, prog0,
                     d_hat, dist, c_star):
        """Polish by blending two feasible candidates that straddle the
        cost-minimizing alignment.

        The velocity/acceleration box is convex, so any blend of feasible
        candidates respects the rate limits; the alignment varies
        continuously along the blend, and bisection pins it to c_star,
        driving the step cost to its floor whenever the cone crosses the
        reachable set.
        """
        cfg = self.cfg
        jv = analysis.j_star[:3]
        re_dc = qd_feasible @ jv.T
        speeds = np.linalg.norm(re_dc, axis=1)
        valid = speeds > 1e-12
        if valid.sum() < 2:
            return qd0, cost0, prog0
        cos_all = np.full(len(qd_feasible), np.nan)
        cos_all[valid] = np.clip((re_dc[valid] @ d_hat) / speeds[valid], -1.0, 1.0)
        below = np.flatnonzero(valid & (cos_all < c_star))
        above = np.flatnonzero(valid & (cos_all >= c_star))
        if below.size == 0 or above.size == 0:
            return qd0, cost0, prog0
        lo = qd_feasible[below[np.argmax(cos_all[below])]]
        hi = qd_feasible[above[np.argmin(cos_all[above])]]

        def cos_of(qd):
            u = jv @ qd
            nu = np.linalg.norm(u)
            return None if nu <= 1e-12 else float(u @ d_hat) / nu

        a, b = 0.0, 1.0
        for _ in range(50):
            mid = 0.5 * (a + b)
            c = cos_of((1.0 - mid) * lo + mid * hi)
            if c is None:
                b = mid
                continue
            if c < c_star:
                a = mid
            else:
                b = mid
        qd_try = (1.0 - 0.5 * (a + b)) * lo + 0.5 * (a + b) * hi
        feas, _ = self._screen(state, analysis.c_bm, qd_try[None, :], k)
        if not feas[0]:
            return qd0, cost0, prog0
        costs, progress = self._score(analysis, qd_try[None, :], d_hat, dist)
        if costs[0] < cost0:
            return qd_try, float(costs[0]), float(progress[0])
        return qd0, cost0, prog0

    def _refine(self, analysis, state, qd_prev, k, qd0, cost0, prog0, d_hat, dist):
        """Coordinate descent on alpha with shrinking steps; ties break on progress."""
        cfg = self.cfg
        n = self.model.n
        alpha = np.clip(analysis.v.T @ qd0, -1.0, 1.0)
        best_qd, best_cost, best_prog = qd0, cost0, prog0
        step = 0.25
        dv_lim = cfg.qdd_max * cfg.dt_plan
        for _ in range(cfg.refine_sweeps):
            for j in range(n):
                trials = []
                for sgn in (+1.0, -1.0):
                    a = alpha.copy()
                    a[j] = np.clip(a[j] + sgn * step, -1.0, 1.0)
                    trials.append(a)
                qd_raw = np.array(trials) @ analysis.v.T
                qd_set = np.clip(qd_raw, -cfg.qd_max, cfg.qd_max)
                qd_set = qd_prev + np.clip(qd_set - qd_prev, -dv_lim, dv_lim)
                feasible, _ = self._screen(state, analysis.c_bm, qd_set, k)
                if not feasible.any():
                    continue
                costs, progress = self._score(analysis, qd_set, d_hat, dist)
                costs = np.where(feasible, costs, np.inf)
                i = int(np.argmin(costs))
                improved = costs[i] < best_cost - 1e-15 or (
                    abs(costs[i] - best_cost) <= 1e-15 and progress[i] > best_prog + 1e-15
                )
                if improved:
                    best_qd, best_cost, best_prog = qd_set[i], float(costs[i]), float(progress[i])
                    alpha = np.clip(analysis.v.T @ best_qd, -1.0, 1.0)
            step *= 0.4
        return best_qd, best_cost, best_prog


def _advance_quaternion(eps: np.ndarray, w: np.ndarray, dt: float) -> np.ndarray:
    """Exact-rotation quaternion update for inertial angular velocity, batched.

    The rotation increment is about an inertial axis, so the delta
    quaternion left-composes onto the current attitude.
    """
    w = np.atleast_2d(w)
    L = w.shape[0]
    theta = np.linalg.norm(w, axis=1) * dt
    half = 0.5 * theta
    # axis * sin(half) == w*dt * sinc-like factor, finite at theta -> 0
    factor = np.where(theta > 1e-12, np.sin(half) / np.where(theta > 0.0, theta, 1.0), 0.5)
    dq = np.concatenate([w * dt * factor[:, None], np.cos(half)[:, None]], axis=1)
    out = np.empty((L, 4))
    for i in range(L):
        out[i] = quat_multiply(dq[i], eps)
        out[i] /= np.linalg.norm(out[i])
    return out


def optimize_step(model: SmsModel, state: SmsState, r_d: np.ndarray,
                  config: PlannerConfig, k: int = 0,
                  qd_prev: np.ndarray | None = None,
                  rng: np.random.Generator | None = None) -> StepDecision:
    """One-off step optimization at a state (plan_trajectory drives the loop)."""
    geometry = CollisionGeometry.from_model(model)
    cache = forward_kinematics(model, state)
    jac = link_jacobians(model, cache)
    blocks = inertia_blocks(model, cache, jac)
    analysis = analyze_coupling(model, state, jac, blocks)
    if qd_prev is None:
        qd_prev = np.zeros(model.n)
    if rng is None:
        rng = np.random.default_rng([config.seed, k])
    opt = _StepOptimizer(model, config, geometry, r_d)
    return opt.optimize(state, qd_prev, k, analysis, rng, np.zeros(model.n), cache)


@dataclass
class TrajectoryPlan:
    """Time-gridded plan: joint states, induced base motion, per-step metrics."""

    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    base_pos: np.ndarray
    base_quat: np.ndarray
    base_vel: np.ndarray
    r_e: np.ndarray
    alpha: np.ndarray
    h_norm: np.ndarray
    cos_theta_a: np.ndarray
    c_tilde: np.ndarray
    step_cost: np.ndarray
    reports: list[ConstraintReport]
    feasible: bool
    diagnostics: dict
    r_d: np.ndarray
    config: PlannerConfig

    @property
    def n_steps(self) -> int:
        return len(self.t) - 1

    @property
    def ee_error(self) -> np.ndarray:
        return np.linalg.norm(self.r_d[None, :] - self.r_e, axis=1)

    @property
    def total_cost(self) -> float:
        return float(self.step_cost[:-1].sum())


def _propagate_pose(model: SmsModel, r_b, eps, q, qd, dt) -> tuple[np.ndarray, np.ndarray]:
    """RK4 integration of the zero-momentum base-pose flow over one interval.

    Joint rates are held constant; the base twist tracks C_bm(state) @ qd so
    total momentum stays (numerically) zero along the whole interval.
    """
    eng = get_engine(model)
    n = model.n

    def rate(rb_, eps_, q_):
        y = np.concatenate([rb_, eps_, q_, np.zeros(6 + n)])
        H, _, _ = eng.terms(y)
        xb = -np.linalg.solve(H[:6, :6], H[:6, 6:] @ qd)
        R_b = quat_to_rotation(eps_ / np.linalg.norm(eps_))
        eps_dot = quat_rate(eps_ / np.linalg.norm(eps_), R_b.T @ xb[3:])
        return xb[:3], eps_dot

    def deriv(x, tloc):
        rb_, eps_ = x[:3], x[3:7]
        q_ = q + tloc * qd
        vr, ve = rate(rb_, eps_, q_)
        return np.concatenate([vr, ve])

    x0 = np.concatenate([r_b, eps])
    k1 = deriv(x0, 0.0)
    k2 = deriv(x0 + 0.5 * dt * k1, 0.5 * dt)
    k3 = deriv(x0 + 0.5 * dt * k2, 0.5 * dt)
    k4 = deriv(x0 + dt * k3, dt)
    x = x0 + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x[:3], x[3:7] / np.linalg.norm(x[3:7])


def plan_trajectory(model: SmsModel, initial: SmsState, r_d: np.ndarray,
                    config: PlannerConfig) -> TrajectoryPlan:
    """Sequential coupling-informed planning over the full horizon.

    Raises InfeasibleStepError if some step has no feasible candidate at
    all; an emitted plan is marked infeasible (with diagnostics) if any
    realized grid point violates a constraint family, including the
    terminal window requirement.
    """
    cfg = config
    n = model.n
    N = cfg.n_steps
    dt = cfg.dt_plan
    geometry = CollisionGeometry.from_model(model)
    optimizer = _StepOptimizer(model, cfg, geometry, r_d)
    rng_root = np.random.SeedSequence(cfg.seed)
    step_seeds = rng_root.spawn(N)

    t = np.arange(N + 1) * dt
    q = np.empty((N + 1, n))
    qd = np.empty((N + 1, n))
    base_pos = np.empty((N + 1, 3))
    base_quat = np.empty((N + 1, 4))
    base_vel = np.empty((N + 1, 6))
    r_e = np.empty((N + 1, 3))
    alpha = np.empty((N + 1, n))
    h_norm = np.empty(N + 1)
    cos_t = np.empty(N + 1)
    c_tl = np.empty(N + 1)
    cost = np.empty(N + 1)

    state = SmsState(initial.r_b.copy(), initial.eps.copy(), initial.q.copy())
    qd_prev = initial.qd.copy()
    alpha_prev = np.zeros(n)
    clip_totals = {"velocity": 0, "acceleration": 0}

    for k in range(N):
        cache = forward_kinematics(model, state)
        jac = link_jacobians(model, cache)
        blocks = inertia_blocks(model, cache, jac)
        analysis = analyze_coupling(model, state, jac, blocks)
        rng = np.random.default_rng(step_seeds[k])
        try:
            decision = optimizer.optimize(state, qd_prev, k, analysis, rng,
                                          alpha_prev, cache)
        except InfeasibleStepError as exc:
            report = dict(exc.report or {})
            report["clip_counts"] = clip_totals
            # name the limit that throttled the motion when the goal became
            # unreachable: compare the speed still required against what the
            # joint-rate and joint-acceleration limits admit
            dist = float(np.linalg.norm(np.asarray(r_d, dtype=float) - cache.r_e))
            t_left = max((N - k) * dt, dt)
            required = dist / t_left
            sigma1 = float(np.linalg.svd(analysis.j_star[:3], compute_uv=False)[0])
            vel_cap = sigma1 * float(np.linalg.norm(cfg.qd_max))
            acc_cap = sigma1 * float(np.linalg.norm(cfg.qdd_max)) * 0.5 * t_left
            if required > vel_cap:
                report["binding_limit"] = "joint_velocity"
            elif required > acc_cap:
                report["binding_limit"] = "joint_acceleration"
            else:
                report["binding_limit"] = "constraint_screening"
            report["required_speed"] = required
            report["velocity_capped_speed"] = vel_cap
            exc.report = report
            raise

        q[k] = state.q
        qd[k] = decision.qd
        base_pos[k] = state.r_b
        base_quat[k] = state.eps
        base_vel[k] = analysis.c_bm @ decision.qd
        r_e[k] = cache.r_e
        alpha[k] = decision.alpha
        h_norm[k] = analysis.h_norm
        cos_t[k] = decision.cos_theta_a
        c_tl[k] = decision.c_tilde
        cost[k] = decision.cost
        for key in clip_totals:
            clip_totals[key] += decision.clip_counts[key]

        r_b_next, eps_next = _propagate_pose(model, state.r_b, state.eps,
                                             state.q, decision.qd, dt)
        state = SmsState(r_b_next, eps_next, state.q + dt * decision.qd)
        qd_prev = decision.qd
        alpha_prev = decision.alpha

    # final grid point: joint rates held, metrics recomputed at the state
    cache = forward_kinematics(model, state)
    jac = link_jacobians(model, cache)
    blocks = inertia_blocks(model, cache, jac)
    analysis = analyze_coupling(model, state, jac, blocks)
    q[N] = state.q
    qd[N] = qd[N - 1]
    base_pos[N] = state.r_b
    base_quat[N] = state.eps
    base_vel[N] = analysis.c_bm @ qd[N]
    r_e[N] = cache.r_e
    alpha[N] = np.clip(analysis.v.T @ qd[N], -1.0, 1.0)
    h_norm[N] = analysis.h_norm
    metric = assist_metric(analysis.v @ alpha[N], analysis.j_star, cache.r_e, r_d, cfg.kappa)
    cos_t[N] = metric.cos_theta_a
    c_tl[N] = metric.c_tilde
    cost[N] = step_cost(metric.c_tilde, analysis.h_norm)

    qdd = np.zeros_like(qd)
    qdd[:N] = np.diff(qd, axis=0) / dt

    reports = [
        check_constraints(model, cfg, geometry, q[k], qd[k], qdd[k],
                          base_pos[k], base_quat[k], r_d, k)
        for k in range(N + 1)
    ]
    feasible = all(rep.ok for rep in reports)
    diagnostics = {
        "clip_counts": clip_totals,
        "final_error": float(np.linalg.norm(r_d - r_e[N])),
        "violations": [rep.summary() for rep in reports if not rep.ok],
    }
    if not feasible:
        worst = min((rep.worst() for rep in reports if not rep.ok), key=lambda f: f.margin)
        dom = max(clip_totals, key=clip_totals.get)
        diagnostics["worst_family"] = worst.name
        diagnostics["binding_limit"] = (
            f"joint_{dom}" if worst.name == "terminal" and clip_totals[dom] > 0 else worst.name
        )
        log.warning("plan infeasible: worst family %s (margin %.4g)", worst.name, worst.margin)

    return TrajectoryPlan(
        t=t, q=q, qd=qd, qdd=qdd, base_pos=base_pos, base_quat=base_quat,
        base_vel=base_vel, r_e=r_e, alpha=alpha, h_norm=h_norm,
        cos_theta_a=cos_t, c_tilde=c_tl, step_cost=cost, reports=reports,
        feasible=feasible, diagnostics=diagnostics,
        r_d=np.asarray(r_d, dtype=float), config=cfg,
    )
