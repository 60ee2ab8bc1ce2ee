"""Episode datasets: recording format, scripted-expert generation, splitting.

Episodes are stored as tab-separated text, one header line followed by one
line per 160 Hz frame. Numeric fields carry 9 significant digits, which
round-trips with error far below every tolerance used in training or
evaluation, and keeps the files diffable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sim, tactile
from .errors import (
    DataError,
    DimensionError,
    GenerationError,
    ParseError,
    ValidationError,
)
from .sim import (
    APERTURE_OPEN_MM,
    DISTURBANCE_KINDS,
    GRAVITY_M_PER_S2,
    SLEW_DEG_PER_TICK,
    THETA_MAX_DEG,
    TICK_HZ,
    DisturbanceEvent,
    ObjectSpec,
    SimState,
)

KINDS = ("gp", "stab", "ga")
SCENARIOS = ("gp", "stab_pos", "stab_neg", "ga")
LABELS = ("stable", "unstable", "n/a")
SCENARIO_KIND = {"gp": "gp", "stab_pos": "stab", "stab_neg": "stab", "ga": "ga"}

N_TAXELS = tactile.N_TAXELS
POSE_DIM = 7
# t_tick, S[32], theta_deg, P[7], dS[32], dtheta_deg, label
FIELDS_PER_ROW = 1 + N_TAXELS + 1 + POSE_DIM + N_TAXELS + 1 + 1

_HEADER_KEYS = ("version", "rate_hz", "taxels_per_finger", "kind", "object", "seed")

# Scripted-expert tuning. Margins are capacity-to-load ratios.
GP_MARGIN = 1.5
GP_SETTLE_S = 0.5
STAB_POS_MARGIN_RANGE = (1.35, 1.85)
STAB_POS_HOLD_S = 1.2
STAB_NEG_DEFICIT_N = 0.13  # guaranteed shortfall, forces a drop within ~4 s
STAB_NEG_TIMEOUT_S = 6.0
GA_SETTLE_S = 0.5
GA_WINDOW_RANGE_S = (1.6, 2.0)
GA_EVENT_DURATION_RANGE_S = (0.4, 0.8)
# Event loads must clear the 1.5x hold margin or no slip ever happens and the
# teacher has nothing to demonstrate.
GA_EXTRA_LOAD_RANGE = (0.55, 1.0)  # fraction of the object's resting weight
GA_RECOVERY_S = 0.5
EXPERT_SLIP_GAIN_DEG_PER_MM = 0.5
EXPERT_DELTA_MAX_DEG = 5.0
EXPERT_PERIOD_TICKS = 8  # corrections issued at 20 Hz

# Ten episodes per object, split so recorded volume lands close to the
# 1 : 0.6 : 1.4 gp/stab/ga task mix.
DEFAULT_EPISODES_PER_SCENARIO = {"gp": 3, "stab_pos": 1, "stab_neg": 1, "ga": 5}


@dataclass(frozen=True)
class DatasetHeader:
    """Identity line of one recorded episode."""

    kind: str
    object_name: str
    seed: int
    version: int = 1
    rate_hz: int = TICK_HZ
    taxels_per_finger: int = tactile.TAXELS_PER_FINGER

    def __post_init__(self):
        if self.version != 1:
            raise ValidationError(f"unsupported dataset version {self.version}")
        if self.rate_hz != TICK_HZ:
            raise ValidationError(f"rate_hz must be {TICK_HZ}, got {self.rate_hz}")
        if self.taxels_per_finger != tactile.TAXELS_PER_FINGER:
            raise ValidationError(
                f"taxels_per_finger must be {tactile.TAXELS_PER_FINGER}, "
                f"got {self.taxels_per_finger}"
            )
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.object_name:
            raise ValidationError("object_name must be non-empty")
        if isinstance(self.seed, bool) or not isinstance(self.seed, (int, np.integer)):
            raise ValidationError(f"seed must be an integer, got {self.seed!r}")
        if self.seed < 0:
            raise ValidationError(f"seed must be >= 0, got {self.seed}")


@dataclass(frozen=True)
class FrameRecord:
    """One 160 Hz frame of an episode."""

    t_tick: int
    s: np.ndarray
    theta_deg: float
    pose: np.ndarray
    ds: np.ndarray
    dtheta_deg: float
    label: str

    def __post_init__(self):
        if self.t_tick < 0:
            raise ValidationError(f"t_tick must be >= 0, got {self.t_tick}")
        if self.label not in LABELS:
            raise ValidationError(f"label must be one of {LABELS}, got {self.label!r}")
        shapes = {"s": (N_TAXELS,), "pose": (POSE_DIM,), "ds": (N_TAXELS,)}
        for name, want in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != want:
                raise DimensionError(f"{name} must have shape {want}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        for name in ("theta_deg", "dtheta_deg"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")


@dataclass(frozen=True)
class EpisodeRecord:
    """Header plus the full frame sequence of one episode."""

    header: DatasetHeader
    frames: tuple[FrameRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))


def _fmt(x: float) -> str:
    return "%.9g" % (x,)


def _header_line(header: DatasetHeader) -> str:
    values = {
        "version": header.version,
        "rate_hz": header.rate_hz,
        "taxels_per_finger": header.taxels_per_finger,
        "kind": header.kind,
        "object": header.object_name,
        "seed": header.seed,
    }
    return "\t".join(f"{key}={values[key]}" for key in _HEADER_KEYS)


def _frame_line(frame: FrameRecord) -> str:
    parts = [str(int(frame.t_tick))]
    parts.extend(_fmt(v) for v in frame.s)
    parts.append(_fmt(frame.theta_deg))
    parts.extend(_fmt(v) for v in frame.pose)
    parts.extend(_fmt(v) for v in frame.ds)
    parts.append(_fmt(frame.dtheta_deg))
    parts.append(frame.label)
    return "\t".join(parts)


def write_dataset(path, header: DatasetHeader, frames) -> Path:
    """Write one episode file; parent directories are created as needed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [_header_line(header)]
    lines.extend(_frame_line(f) for f in frames)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def _parse_header(line: str) -> DatasetHeader:
    fields = {}
    for item in line.split("\t"):
        key, sep, value = item.partition("=")
        if not sep:
            raise ParseError(f"header item {item!r} is not key=value", line=1)
        if key in fields:
            raise ParseError(f"duplicate header key {key!r}", line=1)
        fields[key] = value
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise ParseError(f"header missing keys {missing}", line=1)
    extra = [k for k in fields if k not in _HEADER_KEYS]
    if extra:
        raise ParseError(f"header has unknown keys {extra}", line=1)
    try:
        version = int(fields["version"])
        rate_hz = int(fields["rate_hz"])
        taxels = int(fields["taxels_per_finger"])
        seed = int(fields["seed"])
    except ValueError as exc:
        raise ParseError(f"non-integer header value ({exc})", line=1) from None
    if version != 1:
        raise ParseError(f"unsupported dataset version {version}", line=1)
    try:
        return DatasetHeader(
            kind=fields["kind"],
            object_name=fields["object"],
            seed=seed,
            version=version,
            rate_hz=rate_hz,
            taxels_per_finger=taxels,
        )
    except ValidationError as exc:
        raise ParseError(str(exc), line=1) from None


def _parse_frame(line: str, lineno: int, prev_tick: int | None) -> FrameRecord:
    fields = line.split("\t")
    if len(fields) != FIELDS_PER_ROW:
        raise ParseError(
            f"expected {FIELDS_PER_ROW} fields, got {len(fields)}", line=lineno
        )
    try:
        t_tick = int(fields[0])
    except ValueError:
        raise ParseError(f"bad tick value {fields[0]!r}", line=lineno) from None
    if prev_tick is not None and t_tick != prev_tick + 1:
        raise ParseError(
            f"tick {t_tick} does not follow tick {prev_tick}", line=lineno
        )
    try:
        values = np.array([float(f) for f in fields[1:-1]], dtype=float)
    except ValueError as exc:
        raise ParseError(f"bad numeric field ({exc})", line=lineno) from None
    label = fields[-1]
    if label not in LABELS:
        raise ParseError(f"unknown label {label!r}", line=lineno)
    s = values[0:N_TAXELS]
    theta = float(values[N_TAXELS])
    pose = values[N_TAXELS + 1 : N_TAXELS + 1 + POSE_DIM]
    ds = values[N_TAXELS + 1 + POSE_DIM : 2 * N_TAXELS + 1 + POSE_DIM]
    dtheta = float(values[2 * N_TAXELS + 1 + POSE_DIM])
    try:
        return FrameRecord(
            t_tick=t_tick,
            s=s,
            theta_deg=theta,
            pose=pose,
            ds=ds,
            dtheta_deg=dtheta,
            label=label,
        )
    except (ValidationError, DimensionError) as exc:
        raise ParseError(str(exc), line=lineno) from None


def read_dataset(path) -> tuple[DatasetHeader, list[FrameRecord]]:
    """Parse one episode file. Line numbers in errors count the header as 1."""
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"dataset file not found: {path}")
    text = path.read_text(encoding="ascii")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty dataset file", line=1)
    header = _parse_header(lines[0])
    frames: list[FrameRecord] = []
    prev_tick: int | None = None
    for lineno, line in enumerate(lines[1:], start=2):
        frame = _parse_frame(line, lineno, prev_tick)
        frames.append(frame)
        prev_tick = frame.t_tick
    return header, frames


def validate_dataset(header: DatasetHeader, frames, atol: float = 1e-5) -> None:
    """Semantic checks beyond parsing: tick chain, dS consistency, ranges."""
    for idx, frame in enumerate(frames):
        lineno = idx + 2
        if idx > 0 and frame.t_tick != frames[idx - 1].t_tick + 1:
            raise ValidationError(
                f"line {lineno}: tick {frame.t_tick} does not follow "
                f"tick {frames[idx - 1].t_tick}"
            )
        if not 0.0 <= frame.theta_deg <= THETA_MAX_DEG:
            raise ValidationError(
                f"line {lineno}: theta_deg {frame.theta_deg} outside [0, 90]"
            )
        if np.any(frame.s < -atol):
            raise ValidationError(f"line {lineno}: negative taxel value")
        if idx == 0:
            if np.any(np.abs(frame.ds) > atol):
                raise ValidationError(
                    f"line {lineno}: first frame must carry zero dS"
                )
        else:
            err = float(np.max(np.abs(frame.ds - (frame.s - frames[idx - 1].s))))
            if not err <= atol:
                raise ValidationError(
                    f"line {lineno}: dS inconsistent with S (max error {err:.3g})"
                )


def split_dataset(records, seed: int, train_frac: float = 0.8):
    """Seeded shuffle, then split at floor(train_frac * N). Disjoint, exhaustive."""
    records = list(records)
    n = len(records)
    if n < 5:
        raise DataError(f"need at least 5 records to split, got {n}")
    if not 0.0 < train_frac < 1.0:
        raise DataError(f"train_frac must be in (0, 1), got {train_frac}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(train_frac * n))
    train = [records[i] for i in order[:n_train]]
    val = [records[i] for i in order[n_train:]]
    return train, val


def _expert_delta_deg(slip_now_mm: float, slip_prev_mm: float) -> float:
    """Proportional tighten command from recently observed slip.

    The teacher reacts to slip it can actually observe, the way a human
    demonstrator tightens when an object visibly starts sliding, so the
    label stays a function of the tactile evidence the policy network sees.
    """
    delta = EXPERT_SLIP_GAIN_DEG_PER_MM * max(0.0, slip_now_mm - slip_prev_mm)
    return min(EXPERT_DELTA_MAX_DEG, delta)


def _frame_label(
    state: SimState,
    w_n: float,
    capacity_n: float,
    in_contact: bool,
    hold_from_tick: int | None,
) -> str:
    if state.dropped:
        return "unstable"
    if in_contact and w_n > capacity_n:
        return "unstable"
    if (
        hold_from_tick is not None
        and state.t_tick >= hold_from_tick
        and in_contact
        and w_n <= capacity_n
    ):
        return "stable"
    return "n/a"


def _close_to_margin(state: SimState, margin: float, states: list) -> SimState:
    """Keep closing until capacity >= margin * load; record every tick."""
    while sim.contact_state(state).capacity_n < margin * sim.load_n(state):
        if state.dropped:
            raise GenerationError(
                f"{state.object.name}: dropped before reaching capacity margin "
                f"{margin:.3g}; scenario impossible"
            )
        if state.gripper.theta_deg >= THETA_MAX_DEG - 1e-9:
            raise GenerationError(
                f"{state.object.name}: capacity margin {margin:.3g} unreachable "
                f"at full closure"
            )
        state = sim.step(state)
        states.append(state)
    return state


def scripted_expert_episode(
    obj: ObjectSpec, scenario: str, seed: int, noise: bool = True
) -> EpisodeRecord:
    """Run one scripted demonstration and return its recorded episode.

    gp and stab_pos close to a capacity margin and hold; stab_neg closes
    short of the load and records through the drop; ga holds at margin while
    randomized disturbances hit and a proportional expert issues tighten
    commands at 20 Hz whose instantaneous value labels every frame.
    """
    if scenario not in SCENARIOS:
        raise ValidationError(f"unknown scenario {scenario!r}")
    rng = np.random.default_rng((int(seed), SCENARIOS.index(scenario)))
    w0 = obj.mass_g * GRAVITY_M_PER_S2 / 1000.0

    # All random draws happen before simulation so the stream never depends
    # on trajectory outcomes.
    if scenario == "gp":
        margin = GP_MARGIN
    elif scenario == "stab_pos":
        margin = float(rng.uniform(*STAB_POS_MARGIN_RANGE))
    elif scenario == "stab_neg":
        # Capacity gained per closing tick bounds the margin overshoot; keep
        # the realized capacity at least STAB_NEG_DEFICIT_N short of the load.
        dcap_tick = (
            2.0
            * obj.mu
            * obj.stiffness_n_per_mm
            * SLEW_DEG_PER_TICK
            * (APERTURE_OPEN_MM / THETA_MAX_DEG)
        )
        hi = min(0.97, max(0.25, 1.0 - (STAB_NEG_DEFICIT_N + dcap_tick) / w0))
        lo = max(0.2, hi - 0.35)
        margin = float(rng.uniform(lo, hi))
    else:
        margin = GP_MARGIN
        window_s = float(rng.uniform(*GA_WINDOW_RANGE_S))
        n_events = int(rng.integers(1, 3))
        event_draws = []
        for _ in range(n_events):
            kind = str(rng.choice(DISTURBANCE_KINDS))
            duration_s = float(rng.uniform(*GA_EVENT_DURATION_RANGE_S))
            extra_w_n = float(rng.uniform(*GA_EXTRA_LOAD_RANGE)) * w0
            start_frac = float(rng.uniform(0.0, 1.0))
            event_draws.append((kind, duration_s, extra_w_n, start_frac))

    state = sim.reset(obj, int(seed))
    state = sim.set_target_angle(state, THETA_MAX_DEG)

    # Approach: recording starts at the first contact frame.
    for _ in range(int(THETA_MAX_DEG / SLEW_DEG_PER_TICK) + 16):
        state = sim.step(state)
        if sim.contact_state(state).in_contact:
            break
    else:
        raise GenerationError(f"{obj.name}: no contact before full closure")

    states = [state]
    state = _close_to_margin(state, margin, states)
    state = sim.set_target_angle(state, state.gripper.theta_deg)
    hold_from_tick: int | None = None if scenario == "stab_neg" else state.t_tick

    if scenario == "gp":
        for _ in range(int(GP_SETTLE_S * TICK_HZ)):
            state = sim.step(state)
            states.append(state)
    elif scenario == "stab_pos":
        for _ in range(int(STAB_POS_HOLD_S * TICK_HZ)):
            state = sim.step(state)
            states.append(state)
    elif scenario == "stab_neg":
        for _ in range(int(STAB_NEG_TIMEOUT_S * TICK_HZ)):
            state = sim.step(state)
            states.append(state)
            if state.dropped:
                break
        else:
            raise GenerationError(
                f"{obj.name}: weak grasp failed to drop within "
                f"{STAB_NEG_TIMEOUT_S:.0f} s"
            )
    else:
        for _ in range(int(GA_SETTLE_S * TICK_HZ)):
            state = sim.step(state)
            states.append(state)
        window_ticks = int(round(window_s * TICK_HZ))
        schedule = []
        for kind, duration_s, extra_w_n, start_frac in event_draws:
            duration_ticks = int(math.ceil(duration_s * TICK_HZ))
            latest = max(0, window_ticks - duration_ticks)
            start_tick = state.t_tick + int(round(start_frac * latest))
            if kind == "water":
                magnitude = extra_w_n * 1000.0 / (GRAVITY_M_PER_S2 * duration_s)
            else:
                magnitude = extra_w_n
            schedule.append(
                (start_tick, DisturbanceEvent(kind, magnitude, duration_s))
            )
        schedule.sort(key=lambda item: item[0])
        pending = list(schedule)
        for _ in range(window_ticks + int(GA_RECOVERY_S * TICK_HZ)):
            if state.dropped:
                break
            while pending and pending[0][0] <= state.t_tick:
                state = sim.inject_disturbance(state, pending.pop(0)[1])
            if state.t_tick % EXPERT_PERIOD_TICKS == 0:
                prev = (
                    states[-(EXPERT_PERIOD_TICKS + 1)]
                    if len(states) > EXPERT_PERIOD_TICKS
                    else states[0]
                )
                delta = _expert_delta_deg(state.slip_mm, prev.slip_mm)
                if delta > 0.0:
                    target = min(
                        THETA_MAX_DEG,
                        max(state.theta_target_deg, state.gripper.theta_deg + delta),
                    )
                    state = sim.set_target_angle(state, target)
            state = sim.step(state)
            states.append(state)

    frames: list[FrameRecord] = []
    prev_s: np.ndarray | None = None
    for i, st in enumerate(states):
        taxels = tactile.render_taxels(st, noise=noise).values
        cs = sim.contact_state(st)
        w_n = sim.load_n(st)
        dtheta = (
            _expert_delta_deg(st.slip_mm, states[max(0, i - EXPERT_PERIOD_TICKS)].slip_mm)
            if scenario == "ga"
            else 0.0
        )
        label = _frame_label(st, w_n, cs.capacity_n, cs.in_contact, hold_from_tick)
        ds = np.zeros(N_TAXELS) if prev_s is None else taxels - prev_s
        frames.append(
            FrameRecord(
                t_tick=st.t_tick,
                s=taxels,
                theta_deg=st.gripper.theta_deg,
                pose=np.asarray(st.pose, dtype=float),
                ds=ds,
                dtheta_deg=dtheta,
                label=label,
            )
        )
        prev_s = taxels
    header = DatasetHeader(
        kind=SCENARIO_KIND[scenario], object_name=obj.name, seed=int(seed)
    )
    return EpisodeRecord(header=header, frames=tuple(frames))


@dataclass(frozen=True)
class EpisodeJob:
    """One (object, scenario, seed) generation work item."""

    object_name: str
    scenario: str
    seed: int

    @property
    def kind(self) -> str:
        return SCENARIO_KIND[self.scenario]


def _object_list(catalog) -> list[ObjectSpec]:
    if isinstance(catalog, dict):
        return list(catalog.values())
    return list(catalog)


def default_collection_plan(catalog, base_seed: int, episodes_per_scenario=None):
    """Deterministic corpus plan: per-episode seeds derived from the base seed."""
    counts = dict(
        DEFAULT_EPISODES_PER_SCENARIO
        if episodes_per_scenario is None
        else episodes_per_scenario
    )
    jobs = []
    for obj_idx, obj in enumerate(_object_list(catalog)):
        for scen_idx, scenario in enumerate(SCENARIOS):
            for k in range(counts.get(scenario, 0)):
                seq = np.random.SeedSequence((int(base_seed), obj_idx, scen_idx, k))
                seed = int(seq.generate_state(1)[0])
                jobs.append(EpisodeJob(obj.name, scenario, seed))
    keys = {(job.kind, job.object_name, job.seed) for job in jobs}
    if len(keys) != len(jobs):
        raise GenerationError("derived episode seeds collide; pick another base seed")
    return tuple(jobs)


def episode_path(root, kind: str, object_name: str, seed: int) -> Path:
    return Path(root) / kind / f"{object_name}_{seed}.tsv"


def generate_corpus(
    catalog, base_seed: int, out_root, noise: bool = True, episodes_per_scenario=None
) -> dict:
    """Run the collection plan, write one file per episode, return counts."""
    by_name = {obj.name: obj for obj in _object_list(catalog)}
    jobs = default_collection_plan(catalog, base_seed, episodes_per_scenario)
    episodes = {kind: 0 for kind in KINDS}
    frame_counts = {kind: 0 for kind in KINDS}
    paths = []
    for job in jobs:
        episode = scripted_expert_episode(
            by_name[job.object_name], job.scenario, job.seed, noise=noise
        )
        path = episode_path(out_root, job.kind, job.object_name, job.seed)
        write_dataset(path, episode.header, episode.frames)
        episodes[job.kind] += 1
        frame_counts[job.kind] += len(episode.frames)
        paths.append(str(path))
    return {"episodes": episodes, "frames": frame_counts, "paths": tuple(paths)}


def read_kind(root, kind: str) -> list[tuple[DatasetHeader, list[FrameRecord]]]:
    """Read every episode of one kind, sorted by file name for determinism."""
    directory = Path(root) / kind
    if not directory.is_dir():
        raise DataError(
            f"missing dataset directory {directory}; run the collect command first"
        )
    files = sorted(directory.glob("*.tsv"))
    if not files:
        raise DataError(
            f"no .tsv episodes under {directory}; run the collect command first"
        )
    return [read_dataset(path) for path in files]
