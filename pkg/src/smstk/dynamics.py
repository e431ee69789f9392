"""Free-floating multibody dynamics assembled from momentum-form inertia blocks.

The generalized velocity is xi = [v_b, w_b, qd] with w_b resolved in the
inertial frame; configuration is (r_b, quaternion, q). The equations of
motion are H(cfg) @ xi_dot + bias(cfg, xi) = tau, where the bias vector is
the exact Newton-Euler velocity-product force (gravity-free).
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from ._engine import DynamicsEngine
from .errors import SingularConfigurationError
from .kinematics import (
    KinematicsCache,
    Jacobians,
    forward_kinematics,
    link_jacobians,
    quat_rate,
    quat_to_rotation,
    skew,
)
from .model import SmsModel, SmsState

COND_LIMIT = 1e12

_ENGINES: "weakref.WeakKeyDictionary[SmsModel, DynamicsEngine]" = weakref.WeakKeyDictionary()


def get_engine(model: SmsModel) -> DynamicsEngine:
    """Shared fast evaluator for a model (engines are immutable)."""
    eng = _ENGINES.get(model)
    if eng is None:
        eng = DynamicsEngine(model)
        _ENGINES[model] = eng
    return eng


@dataclass
class InertiaBlocks:
    """Blocks of the (6+n)x(6+n) generalized inertia matrix.

    H_v = m_c I; H_vw couples base translation/rotation; H_w is the locked
    rotational inertia about the base COM; H_vm/H_wm couple joints to the
    base; H_m is the arm block. Link inertia tensors are rotated to the
    inertial frame before use. r_cb and r_ib are cached lever arms.
    """

    H_v: np.ndarray
    H_vw: np.ndarray
    H_w: np.ndarray
    H_vm: np.ndarray
    H_wm: np.ndarray
    H_m: np.ndarray
    r_cb: np.ndarray
    r_ib: np.ndarray

    def assemble(self) -> np.ndarray:
        n = self.H_m.shape[0]
        H = np.empty((6 + n, 6 + n))
        H[:3, :3] = self.H_v
        H[:3, 3:6] = self.H_vw
        H[3:6, :3] = self.H_vw.T
        H[3:6, 3:6] = self.H_w
        H[:3, 6:] = self.H_vm
        H[6:, :3] = self.H_vm.T
        H[3:6, 6:] = self.H_wm
        H[6:, 3:6] = self.H_wm.T
        H[6:, 6:] = self.H_m
        return H

    def base_block(self) -> np.ndarray:
        """6x6 momentum coefficient block [[H_v, H_vw], [H_vw^T, H_w]]."""
        M = np.empty((6, 6))
        M[:3, :3] = self.H_v
        M[:3, 3:] = self.H_vw
        M[3:, :3] = self.H_vw.T
        M[3:, 3:] = self.H_w
        return M

    def coupling_block(self) -> np.ndarray:
        """6xn block [[H_vm], [H_wm]] coupling joint rates to base momentum."""
        return np.vstack([self.H_vm, self.H_wm])


def rotated_inertias(model: SmsModel, cache: KinematicsCache) -> np.ndarray:
    """Link inertia tensors in the inertial frame, stacked (n,3,3)."""
    I_body = np.stack([l.inertia for l in model.links])
    return np.einsum("nij,njk,nlk->nil", cache.R, I_body, cache.R)


def inertia_blocks(
    model: SmsModel, cache: KinematicsCache, jac: Jacobians | None = None
) -> InertiaBlocks:
    if jac is None:
        jac = link_jacobians(model, cache)
    n = model.n
    m = model.link_masses
    m_c = model.total_mass
    I_b = cache.R_b @ model.base.inertia @ cache.R_b.T
    I_in = rotated_inertias(model, cache)

    r_ib = cache.r - cache.r_b
    r_cb = (m @ r_ib) / m_c

    H_v = m_c * np.eye(3)
    H_vw = m_c * skew(r_cb).T
    H_w = I_b.copy()
    H_vm = np.zeros((3, n))
    H_wm = np.zeros((3, n))
    H_m = np.zeros((n, n))
    for i in range(n):
        S = skew(r_ib[i])
        H_w += I_in[i] + m[i] * (S.T @ S)
        H_vm += m[i] * jac.J_ti[i]
        H_wm += I_in[i] @ jac.J_ri[i] + m[i] * (S @ jac.J_ti[i])
        H_m += jac.J_ri[i].T @ I_in[i] @ jac.J_ri[i] + m[i] * (jac.J_ti[i].T @ jac.J_ti[i])
    return InertiaBlocks(H_v=H_v, H_vw=H_vw, H_w=H_w, H_vm=H_vm, H_wm=H_wm, H_m=H_m,
                         r_cb=r_cb, r_ib=r_ib)


def kinetic_energy(blocks: InertiaBlocks, v_b, w_b, qd) -> float:
    xi = np.concatenate([v_b, w_b, qd])
    return 0.5 * float(xi @ blocks.assemble() @ xi)


@dataclass
class BodyVelocities:
    """Inertial-frame link twists and joint-point velocities along the chain."""

    w: np.ndarray        # (n,3) link angular velocities
    v_com: np.ndarray    # (n,3) link COM velocities
    v_joint: np.ndarray  # (n,3) joint-point velocities


def chain_velocities(model: SmsModel, cache: KinematicsCache, state: SmsState) -> BodyVelocities:
    n = model.n
    w = np.empty((n, 3))
    v_com = np.empty((n, 3))
    v_joint = np.empty((n, 3))
    w_prev = state.w_b
    vj = state.v_b + np.cross(state.w_b, cache.p[0] - state.r_b)
    for i in range(n):
        v_joint[i] = vj
        w[i] = w_prev + cache.axes[i] * state.qd[i]
        v_com[i] = vj + np.cross(w[i], cache.r[i] - cache.p[i])
        if i + 1 < n:
            vj = vj + np.cross(w[i], cache.p[i + 1] - cache.p[i])
        w_prev = w[i]
    return BodyVelocities(w=w, v_com=v_com, v_joint=v_joint)


def coriolis_vector(
    model: SmsModel,
    state: SmsState,
    cache: KinematicsCache | None = None,
    jac: Jacobians | None = None,
) -> np.ndarray:
    """Velocity-product generalized force C(cfg, vel) @ vel, length 6+n.

    Computed as the exact Newton-Euler bias: each body's acceleration with
    xi_dot = 0 is propagated down the chain and projected through the body
    Jacobians, plus the gyroscopic w x I w torques. Quadratic in the
    velocities, zero at rest.
    """
    if cache is None:
        cache = forward_kinematics(model, state)
    if jac is None:
        jac = link_jacobians(model, cache)
    n = model.n
    m = model.link_masses
    I_in = rotated_inertias(model, cache)
    I_b = cache.R_b @ model.base.inertia @ cache.R_b.T
    vel = chain_velocities(model, cache, state)

    bias = np.zeros(6 + n)
    bias[3:6] = np.cross(state.w_b, I_b @ state.w_b)

    alpha_prev = np.zeros(3)
    w_prev = state.w_b
    a_joint = np.cross(state.w_b, vel.v_joint[0] - state.v_b)
    for i in range(n):
        alpha = alpha_prev + np.cross(w_prev, cache.axes[i]) * state.qd[i]
        a_com = a_joint + np.cross(alpha, cache.r[i] - cache.p[i]) \
            + np.cross(vel.w[i], vel.v_com[i] - vel.v_joint[i])
        f = m[i] * a_com
        t = I_in[i] @ alpha + np.cross(vel.w[i], I_in[i] @ vel.w[i])
        bias[:3] += f
        bias[3:6] += np.cross(cache.r[i] - state.r_b, f) + t
        bias[6:] += jac.J_ti[i].T @ f + jac.J_ri[i].T @ t
        if i + 1 < n:
            a_joint = a_joint + np.cross(alpha, cache.p[i + 1] - cache.p[i]) \
                + np.cross(vel.w[i], vel.v_joint[i + 1] - vel.v_joint[i])
        alpha_prev = alpha
        w_prev = vel.w[i]
    return bias


def forward_dynamics(model: SmsModel, state: SmsState, tau: np.ndarray) -> np.ndarray:
    """Generalized accelerations [v_b_dot, w_b_dot, q_ddot] under force tau.

    In a free-floating system the first six entries of tau are zero. Raises
    SingularConfigurationError if the inertia matrix is not usable.
    """
    cache = forward_kinematics(model, state)
    jac = link_jacobians(model, cache)
    H = inertia_blocks(model, cache, jac).assemble()
    bias = coriolis_vector(model, state, cache, jac)
    rhs = np.asarray(tau, dtype=float) - bias
    try:
        acc = np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularConfigurationError(f"inertia matrix singular: {exc}") from exc
    if not np.all(np.isfinite(acc)):
        raise SingularConfigurationError("non-finite accelerations (ill-conditioned H)")
    return acc


def _pack(state: SmsState) -> np.ndarray:
    return np.concatenate([state.r_b, state.eps, state.q, state.v_b, state.w_b, state.qd])


def _unpack(y: np.ndarray, n: int) -> SmsState:
    st = SmsState.__new__(SmsState)
    st.r_b = y[0:3]
    st.eps = y[3:7]
    st.q = y[7:7 + n]
    st.v_b = y[7 + n:10 + n]
    st.w_b = y[10 + n:13 + n]
    st.qd = y[13 + n:]
    return st


def state_derivative(model: SmsModel, state: SmsState, tau: np.ndarray) -> np.ndarray:
    """Reference (unoptimized) time derivative of the packed state vector.

    Same vector field the integrator engine uses; kept as the readable
    formulation and for cross-checks.
    """
    acc = forward_dynamics(model, state, tau)
    R_b = quat_to_rotation(state.eps)
    eps_dot = quat_rate(state.eps, R_b.T @ state.w_b)
    return np.concatenate([state.v_b, eps_dot, state.qd, acc])


def integrate_step(model: SmsModel, state: SmsState, tau: np.ndarray, dt: float) -> SmsState:
    """One classical RK4 step with tau held constant; quaternion renormalized."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    n = model.n
    y = get_engine(model).step(_pack(state), np.asarray(tau, dtype=float), dt)
    out = _unpack(y, n)
    return SmsState(out.r_b, out.eps, out.q, out.v_b, out.w_b, out.qd)


def momentum(model: SmsModel, state: SmsState,
             cache: KinematicsCache | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Linear and angular momentum (about the system COM), from the block form."""
    if cache is None:
        cache = forward_kinematics(model, state)
    jac = link_jacobians(model, cache)
    blocks = inertia_blocks(model, cache, jac)
    xb = np.concatenate([state.v_b, state.w_b])
    h6 = blocks.base_block() @ xb + blocks.coupling_block() @ state.qd
    h_l = h6[:3]
    # block form references the base COM; shift the moment to the system COM
    r_c = state.r_b + blocks.r_cb
    h_a = h6[3:] + np.cross(state.r_b - r_c, h_l)
    return h_l, h_a


def system_com(model: SmsModel, state: SmsState) -> np.ndarray:
    """Inertial position of the whole-system center of mass."""
    cache = forward_kinematics(model, state)
    return state.r_b + (model.link_masses @ (cache.r - state.r_b)) / model.total_mass
