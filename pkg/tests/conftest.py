"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately avoid the library's computation paths:
forward kinematics via homogeneous transforms, body velocities via local
twist recursion on those transforms, energies and momenta as per-body
sums.
"""
from __future__ import annotations

import numpy as np
import pytest

from smstk import default_model, default_initial_state
from smstk.model import SmsState


@pytest.fixture(scope="session")
def model():
    return default_model()


@pytest.fixture(scope="session")
def init_state():
    return default_initial_state()


def random_state(rng, n=3, speed=0.5) -> SmsState:
    eps = rng.normal(size=4)
    eps /= np.linalg.norm(eps)
    return SmsState(
        r_b=rng.normal(size=3),
        eps=eps,
        q=rng.uniform(-1.5, 1.5, size=n),
        v_b=rng.normal(size=3) * speed,
        w_b=rng.normal(size=3) * speed,
        qd=rng.normal(size=n) * speed,
    )


# ---------------------------------------------------------------------------
# homogeneous-transform FK oracle
# ---------------------------------------------------------------------------

def _htm(R, p):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = p
    return T


def _axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.cos(angle) * np.eye(3) + np.sin(angle) * K \
        + (1 - np.cos(angle)) * np.outer(axis, axis)


def _quat_to_R(eps):
    x, y, z, w = eps
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def fk_oracle(model, state):
    """Joint positions, link COM positions and orientations, end-effector.

    Pure homogeneous-transform chain composition; returns
    (p (n,3), r (n,3), R (n,3,3), r_e (3,), R_b).
    """
    n = model.n
    R_b = _quat_to_R(state.eps / np.linalg.norm(state.eps))
    T = _htm(R_b, state.r_b) @ _htm(np.eye(3), model.mount_offset)
    p = np.zeros((n, 3))
    r = np.zeros((n, 3))
    R = np.zeros((n, 3, 3))
    for i in range(n):
        T = T @ _htm(_axis_angle(model.joint_axes[i], state.q[i]), np.zeros(3))
        p[i] = T[:3, 3]
        R[i] = T[:3, :3]
        r[i] = (T @ _htm(np.eye(3), model.link_com_offset[i]))[:3, 3]
        T = T @ _htm(np.eye(3), model.link_tip_offset[i])
    return p, r, R, T[:3, 3].copy(), R_b


def body_velocities_oracle(model, state):
    """Per-body twists from the basic velocity-composition recursion."""
    n = model.n
    p, r, R, r_e, R_b = fk_oracle(model, state)
    w = np.zeros((n, 3))
    v = np.zeros((n, 3))
    w_cur = state.w_b.copy()
    v_joint = state.v_b + np.cross(state.w_b, p[0] - state.r_b)
    axes = np.zeros((n, 3))
    R_parent = R_b
    for i in range(n):
        axes[i] = R_parent @ model.joint_axes[i]
        w_cur = w_cur + axes[i] * state.qd[i]
        w[i] = w_cur
        v[i] = v_joint + np.cross(w_cur, r[i] - p[i])
        if i + 1 < n:
            v_joint = v_joint + np.cross(w_cur, p[i + 1] - p[i])
        R_parent = R[i]
    return w, v


def energy_oracle(model, state):
    """Kinetic energy as the per-body Lagrangian sum."""
    _, r, R, _, R_b = fk_oracle(model, state)
    w, v = body_velocities_oracle(model, state)
    I_b = R_b @ model.base.inertia @ R_b.T
    T = 0.5 * model.base.mass * state.v_b @ state.v_b \
        + 0.5 * state.w_b @ I_b @ state.w_b
    for i, link in enumerate(model.links):
        I_in = R[i] @ link.inertia @ R[i].T
        T += 0.5 * link.mass * v[i] @ v[i] + 0.5 * w[i] @ I_in @ w[i]
    return T


def momentum_oracle(model, state):
    """(h_l, h_a about the system COM) as per-body sums."""
    _, r, R, _, R_b = fk_oracle(model, state)
    w, v = body_velocities_oracle(model, state)
    masses = model.link_masses
    m_c = model.total_mass
    r_c = (model.base.mass * state.r_b + masses @ r) / m_c
    h_l = model.base.mass * state.v_b + masses @ v
    I_b = R_b @ model.base.inertia @ R_b.T
    h_a = I_b @ state.w_b + np.cross(state.r_b - r_c, model.base.mass * state.v_b)
    for i, link in enumerate(model.links):
        I_in = R[i] @ link.inertia @ R[i].T
        h_a += I_in @ w[i] + np.cross(r[i] - r_c, link.mass * v[i])
    return h_l, h_a
