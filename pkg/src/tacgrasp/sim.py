"""Deterministic fixed-timestep simulation of a two-finger parallel gripper.

The model is physics-lite and runs at a fixed 160 Hz tick rate:

  aperture_mm = 80 * (1 - theta/90)          actuation, theta in [0, 90] deg
  F_n  = min(40, k_obj * max(0, w - a))      linear-spring contact, N
  C    = 2 * mu * F_n                        Coulomb friction capacity, N
  W    = (m + fill) * g / 1000 + pull + vib  tangential load, N
  slip += 0.5 * (W - C)   per tick, mm       only while W > C and in contact

The commanded angle slews at up to 30 deg/s toward the target.  The object
drops when accumulated slip exceeds the usable finger length, or when
contact is lost while the load is positive (the object must have been
touched at least once; before first contact it rests supported).

All state types are immutable values; `step` and friends are pure functions
returning new states, so trajectories are exactly reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import EpisodeOverError, ValidationError

TICK_HZ = 160
DT_S = 1.0 / TICK_HZ
THETA_MIN_DEG = 0.0
THETA_MAX_DEG = 90.0
APERTURE_OPEN_MM = 80.0
SLEW_DEG_PER_S = 30.0
SLEW_DEG_PER_TICK = SLEW_DEG_PER_S * DT_S  # 0.1875, exact in binary
FORCE_CAP_N = 40.0
K_SLIP_MM_PER_N = 0.5
GRAVITY_M_PER_S2 = 9.81
VIBRATION_HZ = 8.0
FINGER_LEN_MM = 40.0

# Fixed top-grasp end-effector pose: xyz position in meters plus a unit
# quaternion (w, x, y, z).
TOP_GRASP_POSE = (0.0, 0.0, 0.3, 1.0, 0.0, 0.0, 0.0)

DISTURBANCE_KINDS = ("pull", "vibration", "water")


@dataclass(frozen=True)
class ObjectSpec:
    """Static physical description of one graspable object."""

    name: str
    mass_g: float
    width_mm: float
    stiffness_n_per_mm: float
    mu: float
    max_fill_g: float

    def __post_init__(self):
        if not self.name:
            raise ValidationError("ObjectSpec.name must be non-empty")
        if not self.mass_g > 0:
            raise ValidationError(f"ObjectSpec.mass_g must be > 0, got {self.mass_g}")
        if not self.width_mm > 0:
            raise ValidationError(f"ObjectSpec.width_mm must be > 0, got {self.width_mm}")
        if not self.stiffness_n_per_mm > 0:
            raise ValidationError(
                f"ObjectSpec.stiffness_n_per_mm must be > 0, got {self.stiffness_n_per_mm}"
            )
        if not 0 < self.mu <= 2:
            raise ValidationError(f"ObjectSpec.mu must be in (0, 2], got {self.mu}")
        if self.max_fill_g < 0:
            raise ValidationError(f"ObjectSpec.max_fill_g must be >= 0, got {self.max_fill_g}")


@dataclass(frozen=True)
class GripperState:
    """Actuation state of the gripper at one tick."""

    theta_deg: float
    aperture_mm: float
    normal_force_n: float
    finger_len_mm: float = FINGER_LEN_MM


@dataclass(frozen=True)
class DisturbanceEvent:
    """One externally injected disturbance.

    kind 'pull': magnitude is a constant extra tangential force in N.
    kind 'vibration': magnitude is the peak of a zero-mean 8 Hz sinusoidal
        tangential force in N.
    kind 'water': magnitude is a fill rate in g/s added to the object's
        fill mass, saturating at the object's max_fill_g.
    """

    kind: str
    magnitude: float
    duration_s: float

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ValidationError(
                f"DisturbanceEvent.kind must be one of {DISTURBANCE_KINDS}, got {self.kind!r}"
            )
        if not self.magnitude >= 0:
            raise ValidationError(
                f"DisturbanceEvent.magnitude must be >= 0, got {self.magnitude}"
            )
        if not self.duration_s > 0:
            raise ValidationError(
                f"DisturbanceEvent.duration_s must be > 0, got {self.duration_s}"
            )


@dataclass(frozen=True)
class _ActiveEvent:
    kind: str
    magnitude: float
    start_tick: int  # first tick whose physics the event affects
    end_tick: int  # exclusive


@dataclass(frozen=True)
class SimState:
    """Complete simulation state at one tick. Value-semantic."""

    t_tick: int
    gripper: GripperState
    object: ObjectSpec
    fill_g: float
    slip_mm: float
    dropped: bool
    pose: tuple  # xyz position (m) + unit quaternion (w, x, y, z)
    rng_seed: int
    theta_target_deg: float
    events: tuple = field(default_factory=tuple)
    ever_contacted: bool = False

    def __post_init__(self):
        qw, qx, qy, qz = self.pose[3:]
        norm = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        if abs(norm - 1.0) > 1e-9:
            raise ValidationError(f"SimState.pose quaternion norm {norm} != 1")

    @property
    def t_s(self) -> float:
        return self.t_tick * DT_S


@dataclass(frozen=True)
class ContactState:
    in_contact: bool
    normal_force_n: float
    capacity_n: float
    contact_center: float  # normalized position along the finger, 0..1


def _aperture_mm(theta_deg: float) -> float:
    return APERTURE_OPEN_MM * (1.0 - theta_deg / THETA_MAX_DEG)


def _normal_force_n(obj: ObjectSpec, aperture_mm: float) -> float:
    return min(FORCE_CAP_N, obj.stiffness_n_per_mm * max(0.0, obj.width_mm - aperture_mm))


def reset(obj: ObjectSpec, seed: int) -> SimState:
    """Fresh episode state: gripper fully open, object untouched and empty."""
    theta = THETA_MIN_DEG
    gripper = GripperState(
        theta_deg=theta,
        aperture_mm=_aperture_mm(theta),
        normal_force_n=_normal_force_n(obj, _aperture_mm(theta)),
    )
    return SimState(
        t_tick=0,
        gripper=gripper,
        object=obj,
        fill_g=0.0,
        slip_mm=0.0,
        dropped=False,
        pose=TOP_GRASP_POSE,
        rng_seed=int(seed),
        theta_target_deg=theta,
        events=(),
        ever_contacted=gripper.normal_force_n > 0.0,
    )


def set_target_angle(state: SimState, theta_deg: float) -> SimState:
    """Command a new target angle. Actuation slews toward it on later steps."""
    target = min(THETA_MAX_DEG, max(THETA_MIN_DEG, float(theta_deg)))
    return replace(state, theta_target_deg=target)


def inject_disturbance(state: SimState, event: DisturbanceEvent) -> SimState:
    """Queue a disturbance starting at the next tick. Events may overlap."""
    if state.dropped:
        raise EpisodeOverError("cannot disturb a dropped object; reset the episode")
    n_ticks = math.ceil(event.duration_s * TICK_HZ)
    active = _ActiveEvent(
        kind=event.kind,
        magnitude=event.magnitude,
        start_tick=state.t_tick + 1,
        end_tick=state.t_tick + 1 + n_ticks,
    )
    return replace(state, events=state.events + (active,))


def load_n(state: SimState, t_tick: int | None = None) -> float:
    """Tangential load W on the grasp at a tick (defaults to the state's)."""
    t = state.t_tick if t_tick is None else t_tick
    w = (state.object.mass_g + state.fill_g) * GRAVITY_M_PER_S2 / 1000.0
    for ev in state.events:
        if not ev.start_tick <= t < ev.end_tick:
            continue
        if ev.kind == "pull":
            w += ev.magnitude
        elif ev.kind == "vibration":
            elapsed_s = (t - ev.start_tick) * DT_S
            w += ev.magnitude * math.sin(2.0 * math.pi * VIBRATION_HZ * elapsed_s)
    return w


def contact_state(state: SimState) -> ContactState:
    """Derived contact view of a state."""
    f_n = state.gripper.normal_force_n
    center = 0.5 - (state.slip_mm / state.gripper.finger_len_mm) * 0.5
    center = min(1.0, max(0.0, center))
    return ContactState(
        in_contact=f_n > 0.0,
        normal_force_n=f_n,
        capacity_n=2.0 * state.object.mu * f_n,
        contact_center=center,
    )


def step(state: SimState) -> SimState:
    """Advance one tick: slew actuation, apply disturbances, update slip."""
    t_new = state.t_tick + 1
    if state.dropped:
        # Episode is over; keep the record advancing but freeze physics.
        return replace(state, t_tick=t_new)

    # Actuation slews toward the commanded target.
    theta = state.gripper.theta_deg
    diff = state.theta_target_deg - theta
    if abs(diff) <= SLEW_DEG_PER_TICK:
        theta = state.theta_target_deg
    else:
        theta += math.copysign(SLEW_DEG_PER_TICK, diff)

    aperture = _aperture_mm(theta)
    f_n = _normal_force_n(state.object, aperture)
    in_contact = f_n > 0.0

    # Water fill accumulates before the load is evaluated this tick.
    fill = state.fill_g
    for ev in state.events:
        if ev.kind == "water" and ev.start_tick <= t_new < ev.end_tick:
            fill = min(state.object.max_fill_g, fill + ev.magnitude * DT_S)

    w = (state.object.mass_g + fill) * GRAVITY_M_PER_S2 / 1000.0
    for ev in state.events:
        if not ev.start_tick <= t_new < ev.end_tick:
            continue
        if ev.kind == "pull":
            w += ev.magnitude
        elif ev.kind == "vibration":
            elapsed_s = (t_new - ev.start_tick) * DT_S
            w += ev.magnitude * math.sin(2.0 * math.pi * VIBRATION_HZ * elapsed_s)

    capacity = 2.0 * state.object.mu * f_n
    slip = state.slip_mm
    if in_contact and w > capacity:
        slip += K_SLIP_MM_PER_N * (w - capacity)

    ever_contacted = state.ever_contacted or in_contact
    dropped = (state.ever_contacted and not in_contact and w > 0.0) or (
        slip > state.gripper.finger_len_mm
    )

    events = tuple(ev for ev in state.events if ev.end_tick > t_new)
    gripper = replace(
        state.gripper, theta_deg=theta, aperture_mm=aperture, normal_force_n=f_n
    )
    return replace(
        state,
        t_tick=t_new,
        gripper=gripper,
        fill_g=fill,
        slip_mm=slip,
        dropped=dropped,
        events=events,
        ever_contacted=ever_contacted,
    )
