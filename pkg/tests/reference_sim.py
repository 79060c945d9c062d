"""Vectorised numpy restatement of one physics step.

Kept independent of the compiled kernel so the two can be checked against
each other; slow but easy to read.
"""

import numpy as np

from affordance_rl.sim import (
    N_JOINTS,
    SimStatus,
    _dot,
    fingertip_jacobians,
    forward_kinematics,
    restoring_force,
    sphere_box_contact,
)


def _contacts(config, pose, qd, jac, wb, disp, wvel):
    """Penalty forces on fingertips from handle and table."""
    tips = pose.fingertips
    tip_vel = np.zeros(tips.shape)
    for j in range(N_JOINTS):
        tip_vel += jac[..., j] * qd[:, None, None, j]
    center = wb.handle_center(disp)
    dist, normal = sphere_box_contact(tips, config.fingertip_radius, center[:, None, :], wb.half[:, None, :])
    handle_vel = wvel[:, None, None] * wb.axis[:, None, :]
    rel_n = _dot(tip_vel - handle_vel, normal)
    pen = np.maximum(-dist, 0.0)
    mag = np.where(pen > 0.0, np.maximum(config.contact_stiffness * pen - config.contact_damping * rel_n, 0.0), 0.0)
    f_handle_on_tip = mag[..., None] * normal

    # table plane z = 0
    tpen = np.maximum(config.fingertip_radius - tips[..., 2], 0.0)
    tmag = np.where(tpen > 0.0, np.maximum(config.contact_stiffness * tpen - config.contact_damping * tip_vel[..., 2], 0.0), 0.0)
    f_tip = f_handle_on_tip.copy()
    f_tip[..., 2] += tmag
    return f_tip, -(f_handle_on_tip[:, 0] + f_handle_on_tip[:, 1]), dist, pen


def reference_step(config, physics, wb,
               q, qd, disp, wvel, triggered, forces, dt):
    """Advance B arm/widget pairs by ``dt``. Inputs are not modified.

    Returns (q, qd, disp, wvel, triggered, status).
    """
    forces = np.asarray(forces, dtype=np.float64)
    for name, arr in (("angles", q), ("velocities", qd), ("forces", forces),
                      ("displacement", disp), ("handle velocity", wvel)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite {name}")
    if not (dt > 0 and np.isfinite(dt)):
        raise ValueError("dt must be positive and finite")

    gain = np.array(config.torque_gain)
    damp = np.array(config.joint_damping)
    inertia = np.array(config.joint_inertia)
    lower, upper = config.lower, config.upper
    h = dt / config.substeps
    motor = np.clip(forces, -config.max_force, config.max_force) * gain

    q = np.array(q, dtype=np.float64)
    qd = np.array(qd, dtype=np.float64)
    disp = np.array(disp, dtype=np.float64)
    wvel = np.array(wvel, dtype=np.float64)
    triggered = np.array(triggered, dtype=bool)
    max_pen = np.zeros(len(q))
    lo, hi = wb.rail[:, 0], wb.rail[:, 1]

    for _ in range(config.substeps):
        pose = forward_kinematics(config, q)
        jac = fingertip_jacobians(config, pose, q[:, 6])
        f_tip, f_handle, _, pen = _contacts(config, pose, qd, jac, wb, disp, wvel)
        max_pen = np.maximum(max_pen, np.max(pen, axis=-1))

        reaction = np.zeros(q.shape)
        for j in range(N_JOINTS):
            reaction[:, j] = _dot(jac[:, 0, :, j], f_tip[:, 0]) + _dot(jac[:, 1, :, j], f_tip[:, 1])
        qd = (qd + h * (motor + reaction) / inertia) / (1.0 + h * damp / inertia)
        q = q + h * qd
        at_limit = (q < lower) | (q > upper)
        q = np.clip(q, lower, upper)
        qd = np.where(at_limit, 0.0, qd)

        along = _dot(f_handle, wb.axis)
        restore = restoring_force(wb.press, wb.spring_k, lo, hi, physics.end_stop_k, disp)
        m, c = physics.handle_mass, physics.handle_damping
        wvel = (wvel + h * (along + restore) / m) / (1.0 + h * c / m)
        disp = disp + h * wvel
        stop = (disp < lo) | (disp > hi)
        disp = np.clip(disp, lo, hi)
        wvel = np.where(stop, 0.0, wvel)
        triggered = triggered | (disp >= wb.goal)

    pose = forward_kinematics(config, q)
    jac = fingertip_jacobians(config, pose, q[:, 6])
    _, f_handle, dist, pen = _contacts(config, pose, qd, jac, wb, disp, wvel)
    status = SimStatus(
        fingertips=pose.fingertips,
        min_distance=np.min(dist, axis=-1),
        contact_force=f_handle,
        max_penetration=np.maximum(max_pen, np.max(pen, axis=-1)),
    )
    return q, qd, disp, wvel, triggered, status


