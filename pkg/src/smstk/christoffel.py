"""Christoffel-form Coriolis construction in a local attitude chart.

The base attitude is parameterized by the vector part rho of a small
quaternion composed onto the current attitude, giving true (holonomic)
coordinates z = (r_b, rho, q) with velocity map xi = B(z) zdot. The mass
matrix in the chart is B^T H B, and its Christoffel symbols (partials by
central finite differences) yield a Coriolis matrix with the exact
skew-symmetry property d/dt(Hc) - 2*Cc antisymmetric.

This route is slower and carries finite-difference noise; the production
dynamics use the closed-form Newton-Euler bias in `dynamics`. The two are
cross-checked in the test suite.
"""
from __future__ import annotations

import numpy as np

from .dynamics import inertia_blocks
from .kinematics import forward_kinematics, quat_multiply, quat_to_rotation, skew
from .model import SmsModel, SmsState

DEFAULT_DELTA = 1e-6


def _chart_quaternion(eps0: np.ndarray, rho: np.ndarray) -> np.ndarray:
    e4 = np.sqrt(max(0.0, 1.0 - float(rho @ rho)))
    return quat_multiply(eps0, np.concatenate([rho, [e4]]))


def _body_rate_map(rho: np.ndarray) -> np.ndarray:
    """W with w_body = W(rho) @ rho_dot for the local quaternion chart."""
    e4 = np.sqrt(max(0.0, 1.0 - float(rho @ rho)))
    return 2.0 * (e4 * np.eye(3) - skew(rho) + np.outer(rho, rho) / e4)


def chart_mass_matrix(model: SmsModel, state: SmsState,
                      rho: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Mass matrix in chart coordinates displaced from `state` by (rho, q)."""
    n = model.n
    eps = _chart_quaternion(state.eps, rho)
    st = SmsState(state.r_b, eps / np.linalg.norm(eps), q)
    H = inertia_blocks(model, forward_kinematics(model, st)).assemble()
    B = np.eye(6 + n)
    B[3:6, 3:6] = quat_to_rotation(st.eps) @ _body_rate_map(rho)
    return B.T @ H @ B


def chart_velocity(state: SmsState) -> np.ndarray:
    """Chart velocity zdot = (v_b, rho_dot, qd) matching the state's xi."""
    R_b = quat_to_rotation(state.eps)
    return np.concatenate([state.v_b, 0.5 * (R_b.T @ state.w_b), state.qd])


def chart_partials(model: SmsModel, state: SmsState,
                   delta: float = DEFAULT_DELTA) -> tuple[np.ndarray, np.ndarray]:
    """(H_chart, P) with P[k] = dH_chart/dz_k by central differences.

    Translational partials vanish identically and are skipped.
    """
    n = model.n
    dim = 6 + n
    H0 = chart_mass_matrix(model, state, np.zeros(3), state.q)
    P = np.zeros((dim, dim, dim))
    for k in range(3):
        rho = np.zeros(3)
        rho[k] = delta
        Hp = chart_mass_matrix(model, state, rho, state.q)
        Hm = chart_mass_matrix(model, state, -rho, state.q)
        P[3 + k] = (Hp - Hm) / (2.0 * delta)
    for k in range(n):
        dq = np.zeros(n)
        dq[k] = delta
        Hp = chart_mass_matrix(model, state, np.zeros(3), state.q + dq)
        Hm = chart_mass_matrix(model, state, np.zeros(3), state.q - dq)
        P[6 + k] = (Hp - Hm) / (2.0 * delta)
    return H0, P


def coriolis_matrix_chart(model: SmsModel, state: SmsState,
                          delta: float = DEFAULT_DELTA) -> tuple[np.ndarray, np.ndarray]:
    """(H_chart, C_chart) with C from Christoffel symbols of the chart metric.

    C_ij = sum_k 0.5 * (dH_ij/dz_k + dH_ik/dz_j - dH_jk/dz_i) zdot_k.
    """
    H0, P = chart_partials(model, state, delta)
    zd = chart_velocity(state)
    Hdot = np.einsum("kij,k->ij", P, zd)
    A = np.einsum("ijk,k->ij", P, zd)
    C = 0.5 * (Hdot + A.T - A)
    return H0, C


def chart_forward_dynamics(model: SmsModel, state: SmsState, tau: np.ndarray,
                           delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Accelerations [v_b_dot, w_b_dot, q_ddot] via the chart Lagrangian route."""
    n = model.n
    H0, C = coriolis_matrix_chart(model, state, delta)
    zd = chart_velocity(state)
    R_b = quat_to_rotation(state.eps)
    B = np.eye(6 + n)
    B[3:6, 3:6] = 2.0 * R_b
    zdd = np.linalg.solve(H0, B.T @ np.asarray(tau, dtype=float) - C @ zd)
    acc = zdd.copy()
    acc[3:6] = 2.0 * R_b @ zdd[3:6]
    return acc
