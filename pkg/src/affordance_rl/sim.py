"""Reduced-fidelity arm and widget physics.

The arm is a torque-driven chain of seven independent revolute joints with
viscous damping. Two fingertip spheres touch the widget handle (a box) and
the table through penalty springs. Handles move along a single axis: a
spring-loaded vertical axis for press mechanisms, a horizontal rail with end
stops for slide mechanisms.

Axis conventions (zero pose = arm fully extended along world +x):

    joint 0  shoulder yaw    about world z
    joint 1  shoulder pitch  about the yawed y axis (positive tilts down)
    joint 2  elbow pitch     about upper-arm y
    joint 3  forearm roll    about forearm x
    joint 4  wrist pitch     about forearm y
    joint 5  wrist yaw       about the pitched z axis
    joint 6  grip            finger separation along hand y

Widget frame: handle/base length runs along world x, width along world y.
A slide rail therefore runs along world +y.

All kernels operate on a leading batch axis and use only elementwise
arithmetic, so a batch of one reproduces any member of a larger batch
bit-for-bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

N_JOINTS = 7
JOINT_NAMES = (
    "shoulder_yaw",
    "shoulder_pitch",
    "elbow",
    "forearm_roll",
    "wrist_pitch",
    "wrist_yaw",
    "grip",
)


class WidgetKind(str, enum.Enum):
    BUTTON = "button"
    SLIDER = "slider"
    DECEPTIVE = "deceptive"


class Mechanism(str, enum.Enum):
    PRESS = "press"
    SLIDE = "slide"


def _vec(values, n=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if n is not None and arr.shape != (n,):
        raise ValueError(f"expected shape ({n},), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class ArmConfig:
    """Arm geometry, actuation and contact parameters.

    ``torque_gain`` converts motor force units into joint torque (N m per
    unit). Inertia, damping and gains are per joint.
    """

    upper_arm_len: float = 0.24
    forearm_len: float = 0.27
    finger_len: float = 0.06
    shoulder_pos: tuple = (0.0, 0.0, 0.30)
    joint_limits: tuple = (
        (-1.0, 1.0),
        (-0.6, 1.6),
        (0.0, 2.6),
        (-1.5, 1.5),
        (-1.0, 1.6),
        (-0.8, 0.8),
        (0.0, 1.0),
    )
    max_force: float = 200.0
    torque_gain: tuple = (0.02, 0.02, 0.015, 0.005, 0.005, 0.005, 0.005)
    joint_damping: tuple = (2.0, 2.0, 1.5, 0.5, 0.5, 0.5, 0.5)
    joint_inertia: tuple = (0.1, 0.1, 0.075, 0.025, 0.025, 0.025, 0.025)
    fingertip_radius: float = 0.008
    # centre-to-centre finger separation at the grip lower/upper limit
    finger_gap: tuple = (0.02, 0.06)
    contact_stiffness: float = 100000.0
    contact_damping: float = 100.0
    substeps: int = 10

    def __post_init__(self):
        for name in ("upper_arm_len", "forearm_len", "finger_len", "fingertip_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not self.max_force > 0:
            raise ValueError("max_force must be > 0")
        if len(self.joint_limits) != N_JOINTS:
            raise ValueError(f"exactly {N_JOINTS} joint limits required")
        for lo, hi in self.joint_limits:
            if not lo < hi:
                raise ValueError(f"joint limit lower {lo} must be < upper {hi}")
        for name in ("torque_gain", "joint_damping", "joint_inertia"):
            vals = getattr(self, name)
            if len(vals) != N_JOINTS:
                raise ValueError(f"{name} needs {N_JOINTS} entries")
        if min(self.joint_inertia) <= 0:
            raise ValueError("joint inertia must be positive")
        if min(self.joint_damping) < 0:
            raise ValueError("joint damping must be non-negative")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        # tuples keep the dataclass hashable; normalise nested lists from config files
        object.__setattr__(self, "shoulder_pos", tuple(float(v) for v in self.shoulder_pos))
        object.__setattr__(
            self, "joint_limits", tuple((float(a), float(b)) for a, b in self.joint_limits)
        )
        for name in ("torque_gain", "joint_damping", "joint_inertia", "finger_gap"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.joint_limits])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.joint_limits])

    @property
    def reach(self) -> float:
        return self.upper_arm_len + self.forearm_len + self.finger_len


# Fingertip roughly 7 cm above the centre of the placement area, fingers down.
REST_ANGLES = (0.0, -0.238167, 1.234231, 0.0, 0.574732, 0.0, 0.25)


@dataclass
class ArmState:
    angles: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        self.angles = _vec(self.angles, N_JOINTS)
        self.velocities = _vec(self.velocities, N_JOINTS)

    @classmethod
    def rest(cls) -> "ArmState":
        return cls(np.array(REST_ANGLES), np.zeros(N_JOINTS))

    def kinetic_energy(self, config: ArmConfig) -> float:
        return float(0.5 * np.sum(np.array(config.joint_inertia) * self.velocities**2))


@dataclass(frozen=True)
class WidgetSpec:
    """Static description of one widget.

    ``handle_dims`` is (width, length, height) and ``base_dims`` is
    (width, length). ``origin`` is the base centre on the table. The
    mechanism axis is ``travel_axis``; displacement is measured along it,
    so a press axis points down.
    """

    kind: WidgetKind
    handle_dims: tuple
    base_dims: tuple
    origin: tuple
    travel_axis: tuple
    spring_k: float
    rail_limits: tuple
    goal_displacement: float
    mechanism: Mechanism

    def __post_init__(self):
        object.__setattr__(self, "kind", WidgetKind(self.kind))
        object.__setattr__(self, "mechanism", Mechanism(self.mechanism))
        for name in ("handle_dims", "base_dims", "origin", "travel_axis", "rail_limits"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.handle_dims) != 3 or len(self.base_dims) != 2 or len(self.origin) != 3:
            raise ValueError("bad widget dimensions")
        if not np.isclose(np.linalg.norm(self.travel_axis), 1.0):
            raise ValueError("travel_axis must be a unit vector")
        lo, hi = self.rail_limits
        if not lo < hi:
            raise ValueError("rail_limits must be increasing")

    @property
    def handle_rest_center(self) -> np.ndarray:
        return np.array(self.origin) + np.array([0.0, 0.0, self.handle_dims[2] / 2])

    @property
    def base_center(self) -> np.ndarray:
        return np.array(self.origin, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "handle_dims": list(self.handle_dims),
            "base_dims": list(self.base_dims),
            "origin": list(self.origin),
            "travel_axis": list(self.travel_axis),
            "spring_k": self.spring_k,
            "rail_limits": list(self.rail_limits),
            "goal_displacement": self.goal_displacement,
            "mechanism": self.mechanism.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WidgetSpec":
        return cls(**d)


BUTTON_TRAVEL = 0.025
PRESS_AXIS = (0.0, 0.0, -1.0)
SLIDE_AXIS = (0.0, 1.0, 0.0)


@dataclass(frozen=True)
class WidgetPhysics:
    """Handle dynamics shared by all widgets."""

    handle_mass: float = 0.2
    handle_damping: float = 5.0
    spring_k: float = 50.0
    # the deceptive widget's stiffer return spring is its only mechanical difference from a button
    deceptive_spring_k: float = 700.0
    end_stop_k: float = 1.0e4
    button_travel: float = BUTTON_TRAVEL


def make_widget(
    kind: WidgetKind | str,
    handle_dims,
    origin,
    physics: WidgetPhysics = WidgetPhysics(),
) -> WidgetSpec:
    """Build a widget from handle dimensions, deriving base and mechanism."""
    kind = WidgetKind(kind)
    w, l, h = (float(v) for v in handle_dims)
    if kind is WidgetKind.BUTTON:
        base = (w + 0.01, l + 0.01)
    else:
        base = (w + 0.10, l + 0.01)
    if kind is WidgetKind.SLIDER:
        half = (base[0] - w) / 2
        return WidgetSpec(
            kind, (w, l, h), base, origin, SLIDE_AXIS, 0.0, (-half, half), 0.04, Mechanism.SLIDE
        )
    return WidgetSpec(
        kind,
        (w, l, h),
        base,
        origin,
        PRESS_AXIS,
        physics.deceptive_spring_k if kind is WidgetKind.DECEPTIVE else physics.spring_k,
        (0.0, physics.button_travel),
        0.02,
        Mechanism.PRESS,
    )


@dataclass
class WidgetState:
    displacement: float = 0.0
    velocity: float = 0.0
    triggered: bool = False


@dataclass
class ContactReport:
    fingertip_pos: np.ndarray  # (2, 3)
    min_distance: float  # sphere surface to handle surface, negative when penetrating
    contact_force: np.ndarray  # total force applied to the handle by the fingers


@dataclass
class ArmPose:
    """Forward-kinematics result. Leading batch axes follow the input angles."""

    joint_pos: np.ndarray  # (..., 4, 3): shoulder, elbow, wrist, fingertip midpoint
    frames: np.ndarray  # (..., 3, 3, 3): upper arm, forearm, hand rotations
    fingertips: np.ndarray  # (..., 2, 3)
    axes: np.ndarray = field(repr=False)  # (..., 6, 3) revolute joint axes, world frame
    origins: np.ndarray = field(repr=False)  # (..., 6, 3)

    @property
    def fingertip_mid(self) -> np.ndarray:
        return self.joint_pos[..., 3, :]


# ---------------------------------------------------------------------------
# batched kinematics


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 matrix product over leading axes, written out term by term."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            out[..., i, j] = a[..., i, 0] * b[..., 0, j] + a[..., i, 1] * b[..., 1, j] + a[..., i, 2] * b[..., 2, j]
    return out


def _rot(axis: int, theta: np.ndarray) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    r = np.zeros(theta.shape + (3, 3))
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    r[..., axis, axis] = 1.0
    r[..., i, i] = c
    r[..., j, j] = c
    r[..., i, j] = -s
    r[..., j, i] = s
    return r


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def finger_separation(config: ArmConfig, grip) -> np.ndarray:
    lo, hi = config.joint_limits[6]
    g0, g1 = config.finger_gap
    return g0 + (g1 - g0) * (np.asarray(grip) - lo) / (hi - lo)


def forward_kinematics(config: ArmConfig, angles) -> ArmPose:
    """Link poses and fingertip positions for joint angles of shape (..., 7)."""
    q = np.asarray(angles, dtype=np.float64)
    if q.shape[-1:] != (N_JOINTS,):
        raise ValueError(f"angles must have trailing dimension {N_JOINTS}")
    if not np.all(np.isfinite(q)):
        raise ValueError("angles must be finite")
    shoulder = np.broadcast_to(np.array(config.shoulder_pos), q.shape[:-1] + (3,))

    r_yaw = _rot(2, q[..., 0])
    r_upper = _mm(r_yaw, _rot(1, q[..., 1]))
    elbow = shoulder + config.upper_arm_len * r_upper[..., :, 0]
    r_elbow = _mm(r_upper, _rot(1, q[..., 2]))
    r_fore = _mm(r_elbow, _rot(0, q[..., 3]))
    wrist = elbow + config.forearm_len * r_fore[..., :, 0]
    r_wp = _mm(r_fore, _rot(1, q[..., 4]))
    r_hand = _mm(r_wp, _rot(2, q[..., 5]))
    mid = wrist + config.finger_len * r_hand[..., :, 0]

    half = 0.5 * finger_separation(config, q[..., 6])[..., None]
    tips = np.stack([mid + half * r_hand[..., :, 1], mid - half * r_hand[..., :, 1]], axis=-2)

    axes = np.stack(
        [
            np.broadcast_to(np.array([0.0, 0.0, 1.0]), shoulder.shape),
            r_yaw[..., :, 1],
            r_upper[..., :, 1],
            r_elbow[..., :, 0],
            r_fore[..., :, 1],
            r_wp[..., :, 2],
        ],
        axis=-2,
    )
    origins = np.stack([shoulder, shoulder, elbow, elbow, wrist, wrist], axis=-2)
    return ArmPose(
        joint_pos=np.stack([shoulder, elbow, wrist, mid], axis=-2),
        frames=np.stack([r_upper, r_fore, r_hand], axis=-3),
        fingertips=tips,
        axes=axes,
        origins=origins,
    )


def fingertip_jacobians(config: ArmConfig, pose: ArmPose, grip) -> np.ndarray:
    """d(fingertip)/d(angles), shape (..., 2, 3, 7)."""
    tips = pose.fingertips
    lead = tips.shape[:-2]
    jac = np.zeros(lead + (2, 3, N_JOINTS))
    for i in range(6):
        jac[..., :, :, i] = _cross(pose.axes[..., None, i, :], tips - pose.origins[..., None, i, :])
    lo, hi = config.joint_limits[6]
    g0, g1 = config.finger_gap
    rate = 0.5 * (g1 - g0) / (hi - lo)
    hand_y = pose.frames[..., 2, :, 1]
    jac[..., 0, :, 6] = rate * hand_y
    jac[..., 1, :, 6] = -rate * hand_y
    return jac


# ---------------------------------------------------------------------------
# batched contact and widget mechanics


def sphere_box_contact(centers, radius, box_center, half_extents):
    """Signed surface distance and outward unit normal from box to sphere.

    Shapes: centers (..., 3), box_center / half_extents broadcastable.
    Returns (distance (...), normal (..., 3)). Distance is negative when the
    sphere penetrates the box.
    """
    local = centers - box_center
    clamped = np.clip(local, -half_extents, half_extents)
    diff = local - clamped
    d_out = np.sqrt(_dot(diff, diff))
    outside = d_out > 0.0

    # inside: push out through the nearest face
    depth = half_extents - np.abs(local)
    face = np.argmin(depth, axis=-1)
    inner = -np.take_along_axis(depth, face[..., None], axis=-1)[..., 0]
    face_n = np.zeros(local.shape)
    sign = np.where(np.take_along_axis(local, face[..., None], axis=-1) >= 0.0, 1.0, -1.0)
    np.put_along_axis(face_n, face[..., None], sign, axis=-1)

    safe = np.where(outside, d_out, 1.0)
    normal = np.where(outside[..., None], diff / safe[..., None], face_n)
    dist = np.where(outside, d_out, inner) - radius
    return dist, normal


def restoring_force(press, spring_k, rail_lo, rail_hi, end_stop_k, displacement):
    """Mechanism force along the travel axis (batched)."""
    spring = -spring_k * displacement
    over = np.where(
        displacement > rail_hi,
        rail_hi - displacement,
        np.where(displacement < rail_lo, rail_lo - displacement, 0.0),
    )
    return np.where(press, spring, end_stop_k * over)


def widget_restoring_force(
    spec: WidgetSpec, state: WidgetState, physics: WidgetPhysics = WidgetPhysics()
) -> float:
    """Force the mechanism exerts on the handle along its travel axis.

    Press mechanisms pull back with Hooke's law; rails are free between their
    end stops and push back stiffly outside them.
    """
    lo, hi = spec.rail_limits
    return float(
        restoring_force(
            spec.mechanism is Mechanism.PRESS,
            spec.spring_k,
            lo,
            hi,
            physics.end_stop_k,
            np.float64(state.displacement),
        )
    )


class WidgetBatch:
    """Widget parameters stacked along a batch axis."""

    def __init__(self, specs: list[WidgetSpec]):
        self.specs = list(specs)
        self.press = np.array([s.mechanism is Mechanism.PRESS for s in specs])
        dims = np.array([s.handle_dims for s in specs], dtype=np.float64).reshape(-1, 3)
        # box half extents in world axes: x = length, y = width, z = height
        self.half = 0.5 * dims[:, [1, 0, 2]]
        self.handle_dims = dims
        self.base_dims = np.array([s.base_dims for s in specs], dtype=np.float64).reshape(-1, 2)
        self.origin = np.array([s.origin for s in specs], dtype=np.float64).reshape(-1, 3)
        self.axis = np.array([s.travel_axis for s in specs], dtype=np.float64).reshape(-1, 3)
        self.spring_k = np.array([s.spring_k for s in specs], dtype=np.float64)
        self.rail = np.array([s.rail_limits for s in specs], dtype=np.float64).reshape(-1, 2)
        self.goal = np.array([s.goal_displacement for s in specs], dtype=np.float64)
        self.rest_center = self.origin.copy()
        self.rest_center[:, 2] += self.half[:, 2]

    def set(self, i: int, spec: WidgetSpec) -> None:
        self.specs[i] = spec
        single = WidgetBatch([spec])
        for name in ("press", "half", "handle_dims", "base_dims", "origin", "axis",
                     "spring_k", "rail", "goal", "rest_center"):
            getattr(self, name)[i] = getattr(single, name)[0]

    def handle_center(self, displacement: np.ndarray) -> np.ndarray:
        return self.rest_center + displacement[:, None] * self.axis


@dataclass
class SimStatus:
    """Per-step diagnostics returned by :func:`batch_step`."""

    fingertips: np.ndarray  # (B, 2, 3)
    min_distance: np.ndarray  # (B,)
    contact_force: np.ndarray  # (B, 3) force on the handle
    max_penetration: np.ndarray  # (B,) deepest fingertip penetration over substeps


def pack_arm_params(config: ArmConfig, physics: WidgetPhysics) -> np.ndarray:
    return np.array(
        [
            config.upper_arm_len,
            config.forearm_len,
            config.finger_len,
            *config.shoulder_pos,
            config.fingertip_radius,
            *config.finger_gap,
            config.contact_stiffness,
            config.contact_damping,
            physics.handle_mass,
            physics.handle_damping,
            physics.end_stop_k,
        ],
        dtype=np.float64,
    )


def batch_step(config: ArmConfig, physics: WidgetPhysics, wb: WidgetBatch,
               q, qd, disp, wvel, triggered, forces, dt):
    """Advance B arm/widget pairs by ``dt``. Inputs are not modified.

    Each substep integrates joint velocity with implicit damping,
    ``v' = (v + h (tau_motor + J^T f_contact) / I) / (1 + h c / I)``, then
    position, then clamps to joint limits (zeroing velocity there). The
    handle follows the same scheme along its travel axis.

    Returns (q, qd, disp, wvel, triggered, status).
    """
    forces = np.asarray(forces, dtype=np.float64)
    for name, arr in (("angles", q), ("velocities", qd), ("forces", forces),
                      ("displacement", disp), ("handle velocity", wvel)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite {name}")
    if not (dt > 0 and np.isfinite(dt)):
        raise ValueError("dt must be positive and finite")

    q = np.array(q, dtype=np.float64, order="C")
    qd = np.array(qd, dtype=np.float64, order="C")
    disp = np.array(disp, dtype=np.float64)
    wvel = np.array(wvel, dtype=np.float64)
    triggered = np.array(triggered, dtype=bool)
    n = len(q)
    tips = np.empty((n, 2, 3))
    dist = np.empty(n)
    force = np.empty((n, 3))
    pen = np.empty(n)
    _kernels.step_batch(
        q, qd, disp, wvel, triggered, np.ascontiguousarray(forces), float(dt), int(config.substeps),
        pack_arm_params(config, physics),
        np.array(config.torque_gain), np.array(config.joint_damping), np.array(config.joint_inertia),
        config.lower, config.upper, float(config.max_force),
        wb.press, wb.half, wb.rest_center, wb.axis, wb.spring_k, wb.rail, wb.goal,
        tips, dist, force, pen,
    )
    return q, qd, disp, wvel, triggered, SimStatus(tips, dist, force, pen)


def free_motion(config: ArmConfig, angles, velocities, forces, dt: float) -> np.ndarray:
    """Joint angles the arm would pass through under ``forces`` with nothing to touch.

    Same substep scheme as :func:`batch_step` minus every contact term.
    ``forces`` has shape (T, 7); returns (T + 1, 7) starting at ``angles``.
    """
    forces = np.clip(np.asarray(forces, dtype=np.float64).reshape(-1, N_JOINTS), -config.max_force, config.max_force)
    q = np.array(angles, dtype=np.float64)
    v = np.array(velocities, dtype=np.float64)
    gain, damp, inertia = (np.array(getattr(config, k)) for k in ("torque_gain", "joint_damping", "joint_inertia"))
    lower, upper = config.lower, config.upper
    h = dt / config.substeps
    out = np.empty((len(forces) + 1, N_JOINTS))
    out[0] = q
    for t, f in enumerate(forces):
        accel = h * f * gain / inertia
        for _ in range(config.substeps):
            v = (v + accel) / (1.0 + h * damp / inertia)
            q = q + h * v
            hit = (q < lower) | (q > upper)
            q = np.clip(q, lower, upper)
            v[hit] = 0.0
        out[t + 1] = q
    return out


def step_dynamics(
    config: ArmConfig,
    arm: ArmState,
    widget: WidgetSpec,
    widget_state: WidgetState,
    forces,
    dt: float,
    physics: WidgetPhysics = WidgetPhysics(),
) -> tuple[ArmState, WidgetState, ContactReport]:
    """Single-instance wrapper around :func:`batch_step`."""
    forces = np.asarray(forces, dtype=np.float64)
    if forces.shape != (N_JOINTS,):
        raise ValueError(f"forces must have shape ({N_JOINTS},)")
    if np.any(np.abs(forces) > config.max_force):
        raise ValueError(f"force components must lie in [-{config.max_force}, {config.max_force}]")
    wb = WidgetBatch([widget])
    q, qd, disp, wvel, trig, status = batch_step(
        config,
        physics,
        wb,
        arm.angles[None],
        arm.velocities[None],
        np.array([widget_state.displacement]),
        np.array([widget_state.velocity]),
        np.array([widget_state.triggered]),
        forces[None],
        dt,
    )
    report = ContactReport(
        fingertip_pos=status.fingertips[0],
        min_distance=float(status.min_distance[0]),
        contact_force=status.contact_force[0],
    )
    return (
        ArmState(q[0], qd[0]),
        WidgetState(float(disp[0]), float(wvel[0]), bool(trig[0])),
        report,
    )


__all__ = [
    "ArmConfig",
    "ArmPose",
    "ArmState",
    "ContactReport",
    "Mechanism",
    "N_JOINTS",
    "REST_ANGLES",
    "WidgetBatch",
    "WidgetKind",
    "WidgetPhysics",
    "WidgetSpec",
    "WidgetState",
    "batch_step",
    "fingertip_jacobians",
    "forward_kinematics",
    "make_widget",
    "step_dynamics",
    "widget_restoring_force",
]
