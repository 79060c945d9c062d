"""Compiled per-instance physics loop.

Scalar re-statement of the numpy kinematics/contact code in :mod:`sim`, so
that the hot loop runs without temporaries. The numpy path remains the
reference the tests compare against.
"""

import numba
import numpy as np

# indices into the packed arm parameter vector
L_UPPER, L_FORE, L_FINGER, SX, SY, SZ, RADIUS, GAP0, GAP1, KC, CC, H_MASS, H_DAMP, STOP_K = range(14)
N_ARM_PARAMS = 14


@numba.njit(cache=True)
def _rot(axis, th, out):
    c = np.cos(th)
    s = np.sin(th)
    for i in range(3):
        for j in range(3):
            out[i, j] = 0.0
    out[axis, axis] = 1.0
    if axis == 0:
        i, j = 1, 2
    elif axis == 1:
        i, j = 2, 0
    else:
        i, j = 0, 1
    out[i, i] = c
    out[j, j] = c
    out[i, j] = -s
    out[j, i] = s


@numba.njit(cache=True)
def _mm(a, b, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = a[i, 0] * b[0, j] + a[i, 1] * b[1, j] + a[i, 2] * b[2, j]


@numba.njit(cache=True)
def fk_into(q, arm, lower, upper, joints, tips, axes, origins, hand_y):
    """Fill joint positions (4,3), fingertips (2,3), revolute axes/origins (6,3)."""
    r = np.empty((3, 3))
    ra = np.empty((3, 3))
    rb = np.empty((3, 3))
    ry = np.empty((3, 3))
    for k in range(3):
        joints[0, k] = arm[SX + k]
    _rot(2, q[0], ry)
    _rot(1, q[1], r)
    _mm(ry, r, ra)  # upper arm
    for k in range(3):
        axes[0, k] = 0.0
        axes[1, k] = ry[k, 1]
        axes[2, k] = ra[k, 1]
        joints[1, k] = joints[0, k] + arm[L_UPPER] * ra[k, 0]
    axes[0, 2] = 1.0
    _rot(1, q[2], r)
    _mm(ra, r, rb)  # elbow frame
    for k in range(3):
        axes[3, k] = rb[k, 0]
    _rot(0, q[3], r)
    _mm(rb, r, ra)  # forearm
    for k in range(3):
        axes[4, k] = ra[k, 1]
        joints[2, k] = joints[1, k] + arm[L_FORE] * ra[k, 0]
    _rot(1, q[4], r)
    _mm(ra, r, rb)  # wrist pitched
    for k in range(3):
        axes[5, k] = rb[k, 2]
    _rot(2, q[5], r)
    _mm(rb, r, ra)  # hand
    half = 0.5 * (arm[GAP0] + (arm[GAP1] - arm[GAP0]) * (q[6] - lower[6]) / (upper[6] - lower[6]))
    for k in range(3):
        joints[3, k] = joints[2, k] + arm[L_FINGER] * ra[k, 0]
        hand_y[k] = ra[k, 1]
        tips[0, k] = joints[3, k] + half * ra[k, 1]
        tips[1, k] = joints[3, k] - half * ra[k, 1]
        origins[0, k] = joints[0, k]
        origins[1, k] = joints[0, k]
        origins[2, k] = joints[1, k]
        origins[3, k] = joints[1, k]
        origins[4, k] = joints[2, k]
        origins[5, k] = joints[2, k]


@numba.njit(cache=True)
def jac_into(tips, axes, origins, hand_y, grip_rate, jac):
    """jac[f, :, j] = d tip_f / d q_j."""
    for f in range(2):
        for j in range(6):
            dx = tips[f, 0] - origins[j, 0]
            dy = tips[f, 1] - origins[j, 1]
            dz = tips[f, 2] - origins[j, 2]
            jac[f, 0, j] = axes[j, 1] * dz - axes[j, 2] * dy
            jac[f, 1, j] = axes[j, 2] * dx - axes[j, 0] * dz
            jac[f, 2, j] = axes[j, 0] * dy - axes[j, 1] * dx
        sign = 1.0 if f == 0 else -1.0
        for k in range(3):
            jac[f, k, 6] = sign * grip_rate * hand_y[k]


@numba.njit(cache=True)
def sphere_box(p, radius, center, half, normal):
    """Signed surface distance; writes the outward normal."""
    d2 = 0.0
    for k in range(3):
        loc = p[k] - center[k]
        cl = min(max(loc, -half[k]), half[k])
        normal[k] = loc - cl
        d2 += normal[k] * normal[k]
    if d2 > 0.0:
        d = np.sqrt(d2)
        for k in range(3):
            normal[k] /= d
        return d - radius
    best = 0
    best_depth = np.inf
    for k in range(3):
        depth = half[k] - abs(p[k] - center[k])
        if depth < best_depth:
            best_depth = depth
            best = k
    for k in range(3):
        normal[k] = 0.0
    normal[best] = 1.0 if p[best] - center[best] >= 0.0 else -1.0
    return -best_depth - radius


@numba.njit(cache=True)
def _contacts(arm, qd, tips, jac, center, half, axis, wvel, f_tip, f_handle, dist, pen):
    normal = np.empty(3)
    for k in range(3):
        f_handle[k] = 0.0
    for f in range(2):
        tv = np.zeros(3)
        for j in range(7):
            for k in range(3):
                tv[k] += jac[f, k, j] * qd[j]
        d = sphere_box(tips[f], arm[RADIUS], center, half, normal)
        dist[f] = d
        p = max(-d, 0.0)
        pen[f] = p
        mag = 0.0
        if p > 0.0:
            rel = 0.0
            for k in range(3):
                rel += (tv[k] - wvel * axis[k]) * normal[k]
            mag = max(arm[KC] * p - arm[CC] * rel, 0.0)
        for k in range(3):
            f_tip[f, k] = mag * normal[k]
            f_handle[k] -= mag * normal[k]
        tp = max(arm[RADIUS] - tips[f, 2], 0.0)
        if tp > 0.0:
            f_tip[f, 2] += max(arm[KC] * tp - arm[CC] * tv[2], 0.0)


@numba.njit(cache=True)
def step_batch(q, qd, disp, wvel, trig, forces, dt, substeps, arm, gain, damp, inertia,
               lower, upper, max_force, press, half, rest_center, axis, spring_k, rail, goal,
               out_tips, out_dist, out_force, out_pen):
    """Advance every instance in place by ``dt`` using ``substeps`` substeps."""
    n = q.shape[0]
    h = dt / substeps
    grip_rate = 0.5 * (arm[GAP1] - arm[GAP0]) / (upper[6] - lower[6])
    joints = np.empty((4, 3))
    tips = np.empty((2, 3))
    axes = np.empty((6, 3))
    origins = np.empty((6, 3))
    hand_y = np.empty(3)
    jac = np.empty((2, 3, 7))
    f_tip = np.empty((2, 3))
    f_handle = np.empty(3)
    dist = np.empty(2)
    pen = np.empty(2)
    center = np.empty(3)
    motor = np.empty(7)
    for b in range(n):
        for j in range(7):
            motor[j] = min(max(forces[b, j], -max_force), max_force) * gain[j]
        max_pen = 0.0
        lo = rail[b, 0]
        hi = rail[b, 1]
        for _ in range(substeps + 1):
            fk_into(q[b], arm, lower, upper, joints, tips, axes, origins, hand_y)
            jac_into(tips, axes, origins, hand_y, grip_rate, jac)
            for k in range(3):
                center[k] = rest_center[b, k] + disp[b] * axis[b, k]
            _contacts(arm, qd[b], tips, jac, center, half[b], axis[b], wvel[b],
                      f_tip, f_handle, dist, pen)
            max_pen = max(max_pen, pen[0], pen[1])
            if _ == substeps:
                break
            for j in range(7):
                react = 0.0
                for f in range(2):
                    for k in range(3):
                        react += jac[f, k, j] * f_tip[f, k]
                v = (qd[b, j] + h * (motor[j] + react) / inertia[j]) / (1.0 + h * damp[j] / inertia[j])
                x = q[b, j] + h * v
                if x < lower[j]:
                    x = lower[j]
                    v = 0.0
                elif x > upper[j]:
                    x = upper[j]
                    v = 0.0
                q[b, j] = x
                qd[b, j] = v
            along = f_handle[0] * axis[b, 0] + f_handle[1] * axis[b, 1] + f_handle[2] * axis[b, 2]
            x = disp[b]
            if press[b]:
                restore = -spring_k[b] * x
            elif x > hi:
                restore = arm[STOP_K] * (hi - x)
            elif x < lo:
                restore = arm[STOP_K] * (lo - x)
            else:
                restore = 0.0
            v = (wvel[b] + h * (along + restore) / arm[H_MASS]) / (1.0 + h * arm[H_DAMP] / arm[H_MASS])
            x = x + h * v
            if x < lo:
                x = lo
                v = 0.0
            elif x > hi:
                x = hi
                v = 0.0
            disp[b] = x
            wvel[b] = v
            if x >= goal[b]:
                trig[b] = True
        for f in range(2):
            for k in range(3):
                out_tips[b, f, k] = tips[f, k]
        out_dist[b] = min(dist[0], dist[1])
        for k in range(3):
            out_force[b, k] = f_handle[k]
        out_pen[b] = max_pen
