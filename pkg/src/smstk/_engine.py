"""Allocation-light dynamics evaluator for simulation hot loops.

Same equations as `dynamics` (cross-checked in the test suite), but all
3-vector/3x3 work is done in plain Python floats: numpy ufunc dispatch on
length-3 arrays dominates the runtime of tight integration loops otherwise.
The engine holds only immutable model constants, so one instance can be
shared across threads; every call works on locals.
"""
from __future__ import annotations

from math import cos, sin, sqrt

import numpy as np

from .errors import SingularConfigurationError
from .model import SmsModel

Vec = tuple[float, float, float]
Mat = tuple[Vec, Vec, Vec]

_EYE: Mat = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


def _v(x) -> Vec:
    a = [float(c) for c in x]
    return (a[0], a[1], a[2])


def _mat(M) -> Mat:
    return tuple(_v(row) for row in np.asarray(M, dtype=float))


def _add(a: Vec, b: Vec) -> Vec:
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def _sub(a: Vec, b: Vec) -> Vec:
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _scl(a: Vec, s: float) -> Vec:
    return (a[0] * s, a[1] * s, a[2] * s)


def _dot(a: Vec, b: Vec) -> float:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _cross(a: Vec, b: Vec) -> Vec:
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def _mv(M: Mat, v: Vec) -> Vec:
    return (
        M[0][0] * v[0] + M[0][1] * v[1] + M[0][2] * v[2],
        M[1][0] * v[0] + M[1][1] * v[1] + M[1][2] * v[2],
        M[2][0] * v[0] + M[2][1] * v[1] + M[2][2] * v[2],
    )


def _mtv(M: Mat, v: Vec) -> Vec:
    """M^T @ v."""
    return (
        M[0][0] * v[0] + M[1][0] * v[1] + M[2][0] * v[2],
        M[0][1] * v[0] + M[1][1] * v[1] + M[2][1] * v[2],
        M[0][2] * v[0] + M[1][2] * v[1] + M[2][2] * v[2],
    )


def _mm(A: Mat, B: Mat) -> Mat:
    (a00, a01, a02), (a10, a11, a12), (a20, a21, a22) = A
    (b00, b01, b02), (b10, b11, b12), (b20, b21, b22) = B
    return (
        (a00 * b00 + a01 * b10 + a02 * b20,
         a00 * b01 + a01 * b11 + a02 * b21,
         a00 * b02 + a01 * b12 + a02 * b22),
        (a10 * b00 + a11 * b10 + a12 * b20,
         a10 * b01 + a11 * b11 + a12 * b21,
         a10 * b02 + a11 * b12 + a12 * b22),
        (a20 * b00 + a21 * b10 + a22 * b20,
         a20 * b01 + a21 * b11 + a22 * b21,
         a20 * b02 + a21 * b12 + a22 * b22),
    )


def _mmT(A: Mat, B: Mat) -> Mat:
    """A @ B^T."""
    (a00, a01, a02), (a10, a11, a12), (a20, a21, a22) = A
    (b00, b01, b02), (b10, b11, b12), (b20, b21, b22) = B
    return (
        (a00 * b00 + a01 * b01 + a02 * b02,
         a00 * b10 + a01 * b11 + a02 * b12,
         a00 * b20 + a01 * b21 + a02 * b22),
        (a10 * b00 + a11 * b01 + a12 * b02,
         a10 * b10 + a11 * b11 + a12 * b12,
         a10 * b20 + a11 * b21 + a12 * b22),
        (a20 * b00 + a21 * b01 + a22 * b02,
         a20 * b10 + a21 * b11 + a22 * b12,
         a20 * b20 + a21 * b21 + a22 * b22),
    )


def _rot_similarity(R: Mat, I: Mat) -> Mat:
    """R @ I @ R^T."""
    return _mmT(_mm(R, I), R)


def _rot_similarity_diag(R: Mat, d: Vec) -> Mat:
    """R @ diag(d) @ R^T (principal-axis inertia fast path)."""
    (r00, r01, r02), (r10, r11, r12), (r20, r21, r22) = R
    d0, d1, d2 = d
    a0, a1, a2 = d0 * r00, d1 * r01, d2 * r02
    b0, b1, b2 = d0 * r10, d1 * r11, d2 * r12
    c0, c1, c2 = d0 * r20, d1 * r21, d2 * r22
    m01 = a0 * r10 + a1 * r11 + a2 * r12
    m02 = a0 * r20 + a1 * r21 + a2 * r22
    m12 = b0 * r20 + b1 * r21 + b2 * r22
    return (
        (a0 * r00 + a1 * r01 + a2 * r02, m01, m02),
        (m01, b0 * r10 + b1 * r11 + b2 * r12, m12),
        (m02, m12, c0 * r20 + c1 * r21 + c2 * r22),
    )


def _quat_rot(e1: float, e2: float, e3: float, e4: float) -> Mat:
    xx, yy, zz = e1 * e1, e2 * e2, e3 * e3
    xy, xz, yz = e1 * e2, e1 * e3, e2 * e3
    wx, wy, wz = e4 * e1, e4 * e2, e4 * e3
    return (
        (1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)),
        (2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)),
        (2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)),
    )


class DynamicsEngine:
    """Precompiled constants of one model plus fast dynamics evaluations.

    State layout y = [r_b(3), eps(4), q(n), v_b(3), w_b(3), qd(n)].
    """

    def __init__(self, model: SmsModel):
        n = model.n
        self.n = n
        self.dim = 13 + 2 * n
        self.masses = [float(l.mass) for l in model.links]
        self.m_c = float(model.total_mass)
        self.I_base = _mat(model.base.inertia)
        self.I_links = [_mat(l.inertia) for l in model.links]

        def _diag_of(M):
            arr = np.asarray(M, dtype=float)
            off = arr - np.diag(np.diag(arr))
            return _v(np.diag(arr)) if not off.any() else None

        self.I_base_diag = _diag_of(model.base.inertia)
        self.I_links_diag = [_diag_of(l.inertia) for l in model.links]
        self.axes_body = [_v(model.joint_axes[i]) for i in range(n)]
        self.mount = _v(model.mount_offset)
        self.coms = [_v(model.link_com_offset[i]) for i in range(n)]
        self.tips = [_v(model.link_tip_offset[i]) for i in range(n)]
        # Rodrigues pieces for each joint axis: R(q) = cos*I + sin*K + (1-cos)*kk^T
        self.K = []
        self.kkT = []
        for k in self.axes_body:
            kx, ky, kz = k
            self.K.append(((0.0, -kz, ky), (kz, 0.0, -kx), (-ky, kx, 0.0)))
            self.kkT.append(tuple(tuple(k[i] * k[j] for j in range(3)) for i in range(3)))

    def _axis_rot(self, i: int, angle: float) -> Mat:
        c, s = cos(angle), sin(angle)
        cc = 1.0 - c
        (k00, k01, k02), (k10, k11, k12), (k20, k21, k22) = self.K[i]
        (p00, p01, p02), (p10, p11, p12), (p20, p21, p22) = self.kkT[i]
        return (
            (c + s * k00 + cc * p00, s * k01 + cc * p01, s * k02 + cc * p02),
            (s * k10 + cc * p10, c + s * k11 + cc * p11, s * k12 + cc * p12),
            (s * k20 + cc * p20, s * k21 + cc * p21, c + s * k22 + cc * p22),
        )

    def terms(self, y: np.ndarray):
        """(H, bias, aux) at the packed state y.

        H is the (6+n)x(6+n) generalized inertia, bias the Newton-Euler
        velocity-product force. aux carries (r_b, r_cb, r_e, eps_dot) for
        logging and kinematics without re-evaluation.
        """
        n = self.n
        masses = self.masses
        yl = y.tolist()
        r_b: Vec = (yl[0], yl[1], yl[2])
        e1, e2, e3, e4 = yl[3], yl[4], yl[5], yl[6]
        qn = 1.0 / sqrt(e1 * e1 + e2 * e2 + e3 * e3 + e4 * e4)
        e1, e2, e3, e4 = e1 * qn, e2 * qn, e3 * qn, e4 * qn
        q = yl[7:7 + n]
        v_b: Vec = (yl[7 + n], yl[8 + n], yl[9 + n])
        w_b: Vec = (yl[10 + n], yl[11 + n], yl[12 + n])
        qd = yl[13 + n:13 + 2 * n]

        R_b = _quat_rot(e1, e2, e3, e4)

        # forward kinematics
        axes: list[Vec] = []
        p: list[Vec] = []
        rcom: list[Vec] = []
        R_prev = R_b
        pj = _add(r_b, _mv(R_b, self.mount))
        I_in: list[Mat] = []
        diag = self.I_links_diag
        axes_body, coms, tips = self.axes_body, self.coms, self.tips
        axis_rot = self._axis_rot
        for i in range(n):
            axes.append(_mv(R_prev, axes_body[i]))
            R_i = _mm(R_prev, axis_rot(i, q[i]))
            p.append(pj)
            rcom.append(_add(pj, _mv(R_i, coms[i])))
            pj = _add(pj, _mv(R_i, tips[i]))
            if diag[i] is not None:
                I_in.append(_rot_similarity_diag(R_i, diag[i]))
            else:
                I_in.append(_rot_similarity(R_i, self.I_links[i]))
            R_prev = R_i
        r_e = pj
        if self.I_base_diag is not None:
            I_b_in = _rot_similarity_diag(R_b, self.I_base_diag)
        else:
            I_b_in = _rot_similarity(R_b, self.I_base)

        # link COM Jacobian columns Jt[i][m] = axes[m] x (rcom[i] - p[m]), m <= i
        Jt = [[_cross(axes[m], _sub(rcom[i], p[m])) for m in range(i + 1)] for i in range(n)]
        r_ib = [_sub(rcom[i], r_b) for i in range(n)]

        # --- inertia blocks ---
        cx = cy = cz = 0.0
        for i in range(n):
            cx += masses[i] * r_ib[i][0]
            cy += masses[i] * r_ib[i][1]
            cz += masses[i] * r_ib[i][2]
        inv_mc = 1.0 / self.m_c
        r_cb: Vec = (cx * inv_mc, cy * inv_mc, cz * inv_mc)

        # H_w symmetric part accumulated on scalars
        hw00, hw01, hw02 = I_b_in[0]
        _, hw11, hw12 = I_b_in[1]
        hw22 = I_b_in[2][2]
        for i in range(n):
            m_i = masses[i]
            rx, ry, rz = r_ib[i]
            rr = rx * rx + ry * ry + rz * rz
            Ii = I_in[i]
            hw00 += Ii[0][0] + m_i * (rr - rx * rx)
            hw01 += Ii[0][1] - m_i * rx * ry
            hw02 += Ii[0][2] - m_i * rx * rz
            hw11 += Ii[1][1] + m_i * (rr - ry * ry)
            hw12 += Ii[1][2] - m_i * ry * rz
            hw22 += Ii[2][2] + m_i * (rr - rz * rz)
        Hw = [[hw00, hw01, hw02], [hw01, hw11, hw12], [hw02, hw12, hw22]]

        Hvm0 = [0.0] * n
        Hvm1 = [0.0] * n
        Hvm2 = [0.0] * n
        Hwm0 = [0.0] * n
        Hwm1 = [0.0] * n
        Hwm2 = [0.0] * n
        Hm = [[0.0] * n for _ in range(n)]
        # per-link cache of I_in[i] @ axes[m] for reuse in Hm
        for i in range(n):
            m_i = masses[i]
            Ii = I_in[i]
            Jti = Jt[i]
            rib = r_ib[i]
            Ia = [_mv(Ii, axes[m]) for m in range(i + 1)]
            for m in range(i + 1):
                c0, c1, c2 = Jti[m]
                Hvm0[m] += m_i * c0
                Hvm1[m] += m_i * c1
                Hvm2[m] += m_i * c2
                iam = Ia[m]
                tx, ty, tz = _cross(rib, (c0, c1, c2))
                Hwm0[m] += iam[0] + m_i * tx
                Hwm1[m] += iam[1] + m_i * ty
                Hwm2[m] += iam[2] + m_i * tz
                axm = axes[m]
                colm = Jti[m]
                row = Hm[m]
                for mm2 in range(m, i + 1):
                    v = _dot(axm, Ia[mm2]) + m_i * _dot(colm, Jti[mm2])
                    row[mm2] += v
                    if mm2 != m:
                        Hm[mm2][m] += v
        Hvm = (Hvm0, Hvm1, Hvm2)
        Hwm = (Hwm0, Hwm1, Hwm2)

        # --- assemble H as one flat buffer (cheaper than nested conversion) ---
        dim = 6 + n
        m_c = self.m_c
        # H_vw = m_c * skew(r_cb)^T
        sx, sy, sz = m_c * r_cb[0], m_c * r_cb[1], m_c * r_cb[2]
        flat = [m_c, 0.0, 0.0, 0.0, sz, -sy] + Hvm[0] \
            + [0.0, m_c, 0.0, -sz, 0.0, sx] + Hvm[1] \
            + [0.0, 0.0, m_c, sy, -sx, 0.0] + Hvm[2] \
            + [0.0, -sz, sy] + Hw[0] + Hwm[0] \
            + [sz, 0.0, -sx] + Hw[1] + Hwm[1] \
            + [-sy, sx, 0.0] + Hw[2] + Hwm[2]
        for mcol in range(n):
            flat += [Hvm[0][mcol], Hvm[1][mcol], Hvm[2][mcol],
                     Hwm[0][mcol], Hwm[1][mcol], Hwm[2][mcol]]
            flat += Hm[mcol]
        H = np.array(flat).reshape(dim, dim)

        # --- chain velocities + Newton-Euler velocity-product bias, one pass ---
        bias = [0.0] * dim
        gx, gy, gz = _cross(w_b, _mv(I_b_in, w_b))
        bias[3] = gx
        bias[4] = gy
        bias[5] = gz

        w_prev = w_b
        alpha = (0.0, 0.0, 0.0)
        aj = _cross(w_b, _cross(w_b, _sub(p[0], r_b)))
        for i in range(n):
            qdi = qd[i]
            ax = axes[i]
            wi = _add(w_prev, _scl(ax, qdi))
            lever = _sub(rcom[i], p[i])
            dv = _cross(wi, lever)
            alpha = _add(alpha, _scl(_cross(w_prev, ax), qdi))
            a_com = _add(aj, _add(_cross(alpha, lever), _cross(wi, dv)))
            m_i = masses[i]
            f = (m_i * a_com[0], m_i * a_com[1], m_i * a_com[2])
            Iw = _mv(I_in[i], wi)
            t = _add(_mv(I_in[i], alpha), _cross(wi, Iw))
            bias[0] += f[0]
            bias[1] += f[1]
            bias[2] += f[2]
            mx, my, mz = _cross(r_ib[i], f)
            bias[3] += mx + t[0]
            bias[4] += my + t[1]
            bias[5] += mz + t[2]
            Jti = Jt[i]
            for m in range(i + 1):
                bias[6 + m] += _dot(Jti[m], f) + _dot(axes[m], t)
            if i + 1 < n:
                step = _sub(p[i + 1], p[i])
                aj = _add(aj, _add(_cross(alpha, step), _cross(wi, _cross(wi, step))))
            w_prev = wi

        # quaternion rate from body-resolved angular velocity
        wb_body = _mtv(R_b, w_b)
        wx, wy, wz = wb_body
        eps_dot = (
            0.5 * (e4 * wx - e3 * wy + e2 * wz),
            0.5 * (e3 * wx + e4 * wy - e1 * wz),
            0.5 * (-e2 * wx + e1 * wy + e4 * wz),
            0.5 * (-e1 * wx - e2 * wy - e3 * wz),
        )
        aux = (r_b, r_cb, r_e, eps_dot)
        return H, np.array(bias), aux

    def _deriv_from_terms(self, y, tau, H, bias, aux) -> np.ndarray:
        n = self.n
        try:
            acc = np.linalg.solve(H, tau - bias)
        except np.linalg.LinAlgError as exc:
            raise SingularConfigurationError(f"inertia matrix singular: {exc}") from exc
        out = np.empty(self.dim)
        out[0:3] = y[7 + n:10 + n]
        out[3:7] = aux[3]
        out[7:7 + n] = y[13 + n:]
        out[7 + n:] = acc
        return out

    def derivative(self, y: np.ndarray, tau: np.ndarray) -> np.ndarray:
        """Full packed state derivative under generalized force tau."""
        H, bias, aux = self.terms(y)
        return self._deriv_from_terms(y, tau, H, bias, aux)

    def step(self, y: np.ndarray, tau: np.ndarray, dt: float) -> np.ndarray:
        """Classical RK4 step with constant tau; quaternion renormalized."""
        k1 = self.derivative(y, tau)
        k2 = self.derivative(y + (0.5 * dt) * k1, tau)
        k3 = self.derivative(y + (0.5 * dt) * k2, tau)
        k4 = self.derivative(y + dt * k3, tau)
        out = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[3:7] /= sqrt(float(out[3] ** 2 + out[4] ** 2 + out[5] ** 2 + out[6] ** 2))
        return out

    def step_logged(self, y: np.ndarray, tau: np.ndarray, dt: float):
        """RK4 step plus (h_l, h_a, r_e) at the *input* state, at no extra cost.

        The momentum comes from the first-stage inertia matrix, so logging it
        every step does not add a dynamics evaluation.
        """
        n = self.n
        H1, b1, aux1 = self.terms(y)
        k1 = self._deriv_from_terms(y, tau, H1, b1, aux1)
        k2 = self.derivative(y + (0.5 * dt) * k1, tau)
        k3 = self.derivative(y + (0.5 * dt) * k2, tau)
        k4 = self.derivative(y + dt * k3, tau)
        out = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[3:7] /= sqrt(float(out[3] ** 2 + out[4] ** 2 + out[5] ** 2 + out[6] ** 2))
        h_l, h_a = self.momentum6(y, H1, aux1[1])
        return out, h_l, h_a, np.array(aux1[2])

    def momentum6(self, y: np.ndarray, H: np.ndarray | None = None,
                  r_cb: Vec | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(h_l, h_a) about the system COM at packed state y."""
        n = self.n
        if H is None:
            H, _, aux = self.terms(y)
            r_cb = aux[1]
        xi = y[7 + n:]
        h6 = H[:6] @ xi
        h_l = h6[:3]
        h_a = h6[3:] - np.array(_cross((r_cb[0], r_cb[1], r_cb[2]),
                                       (h_l[0], h_l[1], h_l[2])))
        return h_l, h_a
