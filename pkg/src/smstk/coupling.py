"""Momentum-based base-arm coupling: coupling matrices, SVD metrics, cost terms.

Under zero total momentum the base twist is a linear function of the joint
rates, [v_b; w_b] = C_bm qd. The SVD of C_bm exposes which joint-space
directions shake the base hardest; the normalized entropy of its singular
values and the alignment of coupling-induced end-effector motion with the
goal direction are the two scalar metrics the planner optimizes over.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dynamics import InertiaBlocks, inertia_blocks
from .errors import NumericalConditioningError, UnsupportedDimensionError, ValidationError
from .kinematics import Jacobians, forward_kinematics, link_jacobians
from .model import SmsModel, SmsState

log = logging.getLogger(__name__)

COND_LIMIT = 1e12
PINV_RTOL = 1e-10
DEFAULT_KAPPA = 10.0


@dataclass
class CouplingAnalysis:
    """Coupling matrices and SVD metrics at one configuration.

    cos_theta_a and c_tilde depend on a direction choice, so they stay None
    until a joint velocity has been scored against a goal.
    """

    c_bm: np.ndarray
    j_star: np.ndarray
    j_star_pinv: np.ndarray
    c_be: np.ndarray
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    h_norm: float
    degenerate: bool = False
    rank_deficient: bool = False
    cos_theta_a: float | None = None
    c_tilde: float | None = None


def coupling_matrix(blocks: InertiaBlocks) -> np.ndarray:
    """Joint-to-base coupling matrix: [v_b; w_b] = C_bm @ qd at zero momentum."""
    M_bb = blocks.base_block()
    cond = np.linalg.cond(M_bb)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericalConditioningError(
            f"momentum coefficient block condition number {cond:.3e} exceeds {COND_LIMIT:.0e}"
        )
    return -np.linalg.solve(M_bb, blocks.coupling_block())


def generalized_jacobian(
    J_b: np.ndarray, J_m: np.ndarray, c_bm: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    """(J*, pinv(J*), C_be, rank_deficient) from the base/manipulator Jacobians.

    J* maps joint rates to the end-effector twist with the base reaction
    eliminated through momentum conservation; C_be maps end-effector twists
    back to base twists.
    """
    j_star = J_b @ c_bm + J_m
    u, s, vt = np.linalg.svd(j_star, full_matrices=False)
    tol = PINV_RTOL * (s[0] if s.size else 0.0)
    nonzero = s > tol
    rank_deficient = int(nonzero.sum()) < min(j_star.shape)
    if rank_deficient:
        log.warning("generalized Jacobian rank-deficient (rank %d of %d)",
                    int(nonzero.sum()), min(j_star.shape))
    inv_s = np.where(nonzero, 1.0 / np.where(nonzero, s, 1.0), 0.0)
    j_star_pinv = (vt.T * inv_s) @ u.T
    c_be = c_bm @ j_star_pinv
    return j_star, j_star_pinv, c_be, rank_deficient


def svd_metrics(c_bm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, bool]:
    """(U, sigma, V, H_norm, degenerate) for the coupling matrix.

    Singular values are descending; H_norm is the Shannon entropy of the
    normalized spectrum over n values (zero-padded if n exceeds the number
    of singular values), scaled by 1/log(n). 0*log(0) is taken as 0. Each
    right-singular vector is sign-fixed so its largest-magnitude entry is
    positive, keeping planner scaling factors continuous across steps.
    """
    n = c_bm.shape[1]
    if n < 2:
        raise UnsupportedDimensionError("entropy undefined for a single joint (log(n) = 0)")
    u, s, vt = np.linalg.svd(c_bm)
    v = vt.T
    # sign convention: dominant entry of each joint-space direction positive
    for i in range(v.shape[1]):
        j = np.argmax(np.abs(v[:, i]))
        if v[j, i] < 0.0:
            v[:, i] = -v[:, i]
            if i < u.shape[1] and i < s.size:
                u[:, i] = -u[:, i]
    total = s.sum()
    degenerate = total <= 0.0
    if degenerate:
        return u, s, v, 0.0, True
    padded = np.zeros(n)
    padded[: s.size] = s
    p = padded / total
    nz = p > 0.0
    h_norm = float(-(p[nz] * np.log(p[nz])).sum() / np.log(n))
    return u, s, v, h_norm, False


def coupled_joint_velocity(alpha: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Joint velocity built from scaled coupling directions: qd = V @ alpha."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (v.shape[1],):
        raise ValidationError(f"alpha must have shape ({v.shape[1]},), got {alpha.shape}")
    if np.any(np.abs(alpha) > 1.0 + 1e-12):
        raise ValidationError(f"alpha entries must lie in [-1, 1], got {alpha}")
    return v @ alpha


@dataclass
class AssistMetric:
    """Alignment of coupling-induced end-effector motion with the goal direction."""

    cos_theta_a: float
    c_tilde: float
    at_goal: bool = False
    neutral: bool = False


def softplus_cost(cos_theta_a: float, kappa: float) -> float:
    """(1/kappa) * log(1 + exp(kappa * cos_theta_a)), overflow-safe."""
    x = kappa * cos_theta_a
    return (max(x, 0.0) + np.log1p(np.exp(-abs(x)))) / kappa


def assist_metric(
    qd_dc: np.ndarray,
    j_star: np.ndarray,
    r_e: np.ndarray,
    r_d: np.ndarray,
    kappa: float = DEFAULT_KAPPA,
) -> AssistMetric:
    """cos(theta_a) between the induced end-effector velocity and the goal
    direction, plus its softplus transform.

    At the goal the direction is undefined (at_goal flag); a zero induced
    velocity gives the neutral value 0 (flagged).
    """
    d = np.asarray(r_d, dtype=float) - np.asarray(r_e, dtype=float)
    dist = np.linalg.norm(d)
    if dist <= 1e-9:
        return AssistMetric(0.0, softplus_cost(0.0, kappa), at_goal=True)
    re_dc = j_star[:3] @ qd_dc
    speed = np.linalg.norm(re_dc)
    if speed <= 1e-12:
        return AssistMetric(0.0, softplus_cost(0.0, kappa), neutral=True)
    cos_theta = float(d @ re_dc) / (dist * speed)
    cos_theta = min(1.0, max(-1.0, cos_theta))
    return AssistMetric(cos_theta, softplus_cost(cos_theta, kappa))


def analyze_coupling(model: SmsModel, state: SmsState,
                     jac: Jacobians | None = None,
                     blocks: InertiaBlocks | None = None) -> CouplingAnalysis:
    """Full coupling analysis at a state: C_bm, J*, SVD factors and entropy."""
    if jac is None or blocks is None:
        cache = forward_kinematics(model, state)
        jac = link_jacobians(model, cache)
        blocks = inertia_blocks(model, cache, jac)
    c_bm = coupling_matrix(blocks)
    j_star, j_star_pinv, c_be, rank_def = generalized_jacobian(jac.J_b, jac.J_m, c_bm)
    u, sigma, v, h_norm, degenerate = svd_metrics(c_bm)
    return CouplingAnalysis(
        c_bm=c_bm, j_star=j_star, j_star_pinv=j_star_pinv, c_be=c_be,
        u=u, sigma=sigma, v=v, h_norm=h_norm,
        degenerate=degenerate, rank_deficient=rank_def,
    )
