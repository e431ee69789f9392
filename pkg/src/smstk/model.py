"""Physical description of a free-floating base with a serial manipulator.

All quantities are SI. Quaternions are stored vector-part-first,
scalar last. Angular velocities are resolved in the inertial frame
unless a function says otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidStateError, ValidationError

QUAT_NORM_TOL = 1e-6


def _as_vec(x, n, name) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.shape != (n,):
        raise ValidationError(f"{name} must be a length-{n} vector, got shape {v.shape}")
    return v


def _check_spd(m: np.ndarray, name: str) -> None:
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-12 * max(1.0, abs(m).max())):
        raise ValidationError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(m).min() <= 0.0:
        raise ValidationError(f"{name} must be positive definite")


@dataclass(frozen=True, eq=False)
class BodyParams:
    """Mass, body-frame inertia tensor and bounding dimensions of one rigid body.

    `dims` is (length, width, height) for the base box; for links it is
    (length, cross-section width, cross-section height).
    """

    mass: float
    inertia: np.ndarray
    dims: tuple[float, float, float]

    def __post_init__(self):
        if self.mass <= 0.0:
            raise ValidationError(f"mass must be positive, got {self.mass}")
        inertia = np.asarray(self.inertia, dtype=float)
        if inertia.shape != (3, 3):
            raise ValidationError(f"inertia must be 3x3, got {inertia.shape}")
        _check_spd(inertia, "inertia")
        if any(d <= 0.0 for d in self.dims):
            raise ValidationError(f"dims must be strictly positive, got {self.dims}")
        object.__setattr__(self, "inertia", inertia)
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))


@dataclass(frozen=True, eq=False)
class SmsModel:
    """Immutable description of the base + n-link serial arm.

    Joint axes are unit vectors in the parent body frame (base frame for
    joint 1). `mount_offset` runs from the base COM to joint 1;
    `link_com_offset[i]` / `link_tip_offset[i]` run from joint i+1 to the
    link COM / to the next joint (end-effector for the last link), in the
    link body frame.
    """

    base: BodyParams
    links: tuple[BodyParams, ...]
    joint_axes: np.ndarray
    mount_offset: np.ndarray
    link_com_offset: np.ndarray
    link_tip_offset: np.ndarray

    def __post_init__(self):
        links = tuple(self.links)
        n = len(links)
        if n < 1:
            raise ValidationError("need at least one link")
        axes = np.asarray(self.joint_axes, dtype=float).reshape(n, 3)
        norms = np.linalg.norm(axes, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValidationError(f"joint axes must be unit vectors, norms {norms}")
        object.__setattr__(self, "links", links)
        object.__setattr__(self, "joint_axes", axes)
        object.__setattr__(self, "mount_offset", _as_vec(self.mount_offset, 3, "mount_offset"))
        object.__setattr__(
            self, "link_com_offset", np.asarray(self.link_com_offset, dtype=float).reshape(n, 3)
        )
        object.__setattr__(
            self, "link_tip_offset", np.asarray(self.link_tip_offset, dtype=float).reshape(n, 3)
        )

    @property
    def n(self) -> int:
        return len(self.links)

    @property
    def total_mass(self) -> float:
        return self.base.mass + sum(l.mass for l in self.links)

    @property
    def link_masses(self) -> np.ndarray:
        return np.array([l.mass for l in self.links])


@dataclass
class SmsState:
    """Generalized position (r_b, quaternion, q) and velocity (v_b, w_b, qd).

    `w_b` is the base angular velocity resolved in the inertial frame.
    """

    r_b: np.ndarray
    eps: np.ndarray
    q: np.ndarray
    v_b: np.ndarray = field(default=None)
    w_b: np.ndarray = field(default=None)
    qd: np.ndarray = field(default=None)

    def __post_init__(self):
        self.r_b = _as_vec(self.r_b, 3, "r_b")
        self.eps = _as_vec(self.eps, 4, "eps")
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        self.v_b = np.zeros(3) if self.v_b is None else _as_vec(self.v_b, 3, "v_b")
        self.w_b = np.zeros(3) if self.w_b is None else _as_vec(self.w_b, 3, "w_b")
        self.qd = np.zeros(n) if self.qd is None else _as_vec(self.qd, n, "qd")
        err = abs(float(self.eps @ self.eps) - 1.0)
        if err > 1e-9:
            raise InvalidStateError(f"quaternion norm violates unit constraint by {err:.3e}")

    @property
    def n(self) -> int:
        return self.q.size

    def copy(self) -> "SmsState":
        return SmsState(
            self.r_b.copy(), self.eps.copy(), self.q.copy(),
            self.v_b.copy(), self.w_b.copy(), self.qd.copy(),
        )


def default_model() -> SmsModel:
    """Base + three identical links; masses and inertias of the testbed arm.

    Joints are revolute about local z; at q = 0 the arm extends along the
    base +x axis, mounted at the +x face center. Link COMs sit at the
    geometric midpoints.
    """
    base = BodyParams(
        mass=31.015,
        inertia=np.diag([1.1594, 1.1594, 1.1129]),
        dims=(0.464, 0.464, 0.483),
    )
    link = BodyParams(
        mass=0.569,
        inertia=np.diag([0.0001, 0.0043, 0.0043]),
        dims=(0.3, 0.03, 0.03),
    )
    return SmsModel(
        base=base,
        links=(link, link, link),
        joint_axes=np.tile([0.0, 0.0, 1.0], (3, 1)),
        mount_offset=np.array([0.232, 0.0, 0.0]),
        link_com_offset=np.tile([0.15, 0.0, 0.0], (3, 1)),
        link_tip_offset=np.tile([0.3, 0.0, 0.0], (3, 1)),
    )


def default_initial_state() -> SmsState:
    """Rest state used by the bundled scenarios: 1 deg at each joint."""
    deg = np.pi / 180.0
    return SmsState(
        r_b=np.array([-0.0356, -0.0006, 0.0]),
        eps=np.array([0.0, 0.0, 0.0, 1.0]),
        q=np.array([1.0, 1.0, 1.0]) * deg,
    )
