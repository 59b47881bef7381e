"""Seeded false-data injection: four morphologies at graded severities.

An injection walk scans each record step by step; a Bernoulli trial decides
whether an event starts, and an event corrupts exactly one channel for its
duration. All magnitudes are expressed in multiples of the channel's clean
standard deviation, so severity is comparable across channels with very
different physical scales.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .streams import ChannelStats, SensorRecord

__all__ = [
    "AttackType",
    "SeverityConfig",
    "InjectionEvent",
    "InjectionResult",
    "InjectionPlan",
    "standard_severity",
    "standard_grid",
    "inject",
    "apply_instant",
    "apply_constant",
    "apply_drift",
    "apply_bias",
    "load_injection_plan",
    "save_injection_plan",
    "write_events_jsonl",
    "read_events_jsonl",
    "DEFAULT_PROBABILITY",
]

DEFAULT_PROBABILITY = 0.05
LEVELS = (1, 2, 3, 4)


class AttackType(Enum):
    INSTANT = "instant"
    CONSTANT = "constant"
    DRIFT = "drift"
    BIAS = "bias"

    @classmethod
    def parse(cls, name: str) -> "AttackType":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(t.value for t in cls)
            raise ConfigError(f"unknown attack type {name!r} (one of: {valid})") from None


@dataclass(frozen=True)
class SeverityConfig:
    """One cell of the severity grid.

    magnitude_lo/hi are in clean-SD units; their meaning depends on the type:
    instant treats lo == hi as the noise variance multiplier, drift treats
    lo == hi as the full ramp height, constant and bias draw uniformly from
    [lo, hi].
    """

    attack_type: AttackType
    level: int
    duration: int
    magnitude_lo: float
    magnitude_hi: float

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ConfigError(f"severity level must be 1..4, got {self.level}")
        if self.duration < 1:
            raise ConfigError("severity duration must be >= 1")
        if self.attack_type is AttackType.INSTANT and self.duration != 1:
            raise ConfigError("instant severity must have duration 1")
        if self.attack_type is AttackType.DRIFT and self.duration < 2:
            raise ConfigError("drift severity needs duration >= 2")
        if not (0.0 <= self.magnitude_lo <= self.magnitude_hi):
            raise ConfigError("severity magnitudes need 0 <= lo <= hi")


# severity grid: level -> (duration, magnitude_lo, magnitude_hi)
_GRID: dict[AttackType, dict[int, tuple[int, float, float]]] = {
    AttackType.INSTANT: {
        1: (1, 0.25, 0.25),
        2: (1, 1.0, 1.0),
        3: (1, 4.0, 4.0),
        4: (1, 16.0, 16.0),
    },
    AttackType.CONSTANT: {
        1: (3, 0.0, 1.0),
        2: (5, 0.0, 3.0),
        3: (10, 0.0, 5.0),
        4: (10, 0.0, 10.0),
    },
    AttackType.DRIFT: {
        1: (10, 1.0, 1.0),
        2: (10, 2.0, 2.0),
        3: (20, 2.0, 2.0),
        4: (20, 4.0, 4.0),
    },
    AttackType.BIAS: {
        1: (10, 0.5, 1.0),
        2: (20, 1.0, 2.0),
        3: (20, 2.0, 4.0),
        4: (20, 4.0, 8.0),
    },
}


def standard_severity(attack_type: AttackType, level: int) -> SeverityConfig:
    if level not in LEVELS:
        raise ConfigError(f"severity level must be 1..4, got {level}")
    duration, lo, hi = _GRID[attack_type][level]
    return SeverityConfig(attack_type, level, duration, lo, hi)


def standard_grid(
    types: list[AttackType] | None = None,
    levels: list[int] | None = None,
) -> list[SeverityConfig]:
    """Cross product of the enabled types and levels of the severity grid."""
    types = list(AttackType) if types is None else list(types)
    levels = list(LEVELS) if levels is None else list(levels)
    if not types or not levels:
        raise ConfigError("standard_grid: types and levels must be non-empty")
    return [standard_severity(t, lv) for t in types for lv in levels]


@dataclass(frozen=True)
class InjectionEvent:
    """One applied injection on one channel.

    duration is the effective (possibly record-end truncated) span;
    drawn_duration is the configured one, which still defines a drift ramp's
    slope when truncation cuts the segment short.
    """

    attack_type: AttackType
    channel: int
    channel_name: str
    start: int
    duration: int
    drawn_duration: int
    level: int
    param: float

    def span(self) -> range:
        return range(self.start, self.start + self.duration)

    def to_json(self) -> dict:
        return {
            "type": self.attack_type.value,
            "channel": self.channel,
            "channel_name": self.channel_name,
            "start": self.start,
            "duration": self.duration,
            "drawn_duration": self.drawn_duration,
            "level": self.level,
            "param": self.param,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "InjectionEvent":
        return cls(
            attack_type=AttackType.parse(obj["type"]),
            channel=int(obj["channel"]),
            channel_name=str(obj["channel_name"]),
            start=int(obj["start"]),
            duration=int(obj["duration"]),
            drawn_duration=int(obj["drawn_duration"]),
            level=int(obj["level"]),
            param=float(obj["param"]),
        )


@dataclass(frozen=True, eq=False)
class InjectionResult:
    corrupted: SensorRecord
    labels: np.ndarray
    events: list[InjectionEvent]


def apply_instant(
    segment: np.ndarray, sd: float, config: SeverityConfig, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    """Add one Gaussian spike: x + eta, eta ~ N(0, multiplier * sd^2)."""
    eta = float(rng.normal(0.0, np.sqrt(config.magnitude_lo) * sd))
    return segment + eta, eta


def apply_constant(
    segment: np.ndarray,
    mean: float,
    sd: float,
    config: SeverityConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Stuck-at replacement: every step reads mean + v, v ~ U(lo, hi) * sd.

    The magnitude is an offset above the channel's clean mean rather than an
    absolute reading, so the same severity is meaningful for channels whose
    typical values dwarf their variability (e.g. systolic pressure).
    """
    v = float(rng.uniform(config.magnitude_lo, config.magnitude_hi) * sd)
    return np.full_like(segment, mean + v), v


def apply_drift(
    segment: np.ndarray, sd: float, config: SeverityConfig
) -> tuple[np.ndarray, float]:
    """Linear ramp: step k gains (k/(d-1)) * delta_max, reaching delta_max."""
    delta_max = config.magnitude_lo * sd
    k = np.arange(len(segment))
    return segment + (k / (config.duration - 1)) * delta_max, delta_max


def apply_bias(
    segment: np.ndarray, sd: float, config: SeverityConfig, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    """Constant additive shift: x + beta, beta ~ U(lo, hi) * sd."""
    beta = float(rng.uniform(config.magnitude_lo, config.magnitude_hi) * sd)
    return segment + beta, beta


def inject(
    clean: SensorRecord,
    stats: list[ChannelStats],
    probability: float,
    severities: list[SeverityConfig],
    seed: int | np.random.SeedSequence,
) -> InjectionResult:
    """Run the injection walk over one record.

    At each step a Bernoulli(probability) trial decides whether an event
    starts; on success the channel is drawn uniformly, then the type
    uniformly over enabled types, then the level uniformly over that type's
    enabled levels. The walk skips past an active event, so events never
    overlap. Events that would run past the record end are truncated, and
    labels are truncated identically.

    Draws for each morphology's magnitude come from per-type child streams,
    so disabling one type does not shift any other type's draws.
    """
    if not (0.0 <= probability < 1.0):
        raise ConfigError(f"injection probability must be in [0, 1), got {probability}")
    if not severities:
        raise ConfigError("inject: empty severity set")
    if tuple(s.name for s in stats) != clean.channel_names:
        raise ConfigError("inject: stats do not match record channels")
    if clean.missing.any():
        raise ConfigError(f"inject: record {clean.record_id!r} is not preprocessed")

    by_type: dict[AttackType, list[SeverityConfig]] = {}
    for sev in severities:
        by_type.setdefault(sev.attack_type, []).append(sev)
    enabled_types = sorted(by_type, key=lambda t: t.value)
    for t in enabled_types:
        by_type[t].sort(key=lambda s: s.level)

    if isinstance(seed, np.random.SeedSequence):
        seq = seed
    else:
        seq = np.random.SeedSequence([int(seed)])
    children = seq.spawn(5)
    flow = np.random.default_rng(children[0])
    type_rng = {
        AttackType.INSTANT: np.random.default_rng(children[1]),
        AttackType.CONSTANT: np.random.default_rng(children[2]),
        AttackType.DRIFT: np.random.default_rng(children[3]),
        AttackType.BIAS: np.random.default_rng(children[4]),
    }

    values = clean.values.copy()
    t_len = clean.n_steps
    labels = np.zeros(t_len, dtype=np.int64)
    events: list[InjectionEvent] = []

    t = 0
    while t < t_len:
        if flow.random() >= probability:
            t += 1
            continue
        channel = int(flow.integers(clean.n_channels))
        atk = enabled_types[int(flow.integers(len(enabled_types)))]
        options = by_type[atk]
        sev = options[int(flow.integers(len(options)))]
        stat = stats[channel]
        effective = min(sev.duration, t_len - t)
        segment = values[channel, t:t + effective]
        rng = type_rng[atk]
        if atk is AttackType.INSTANT:
            corrupted, param = apply_instant(segment, stat.sd, sev, rng)
        elif atk is AttackType.CONSTANT:
            corrupted, param = apply_constant(segment, stat.mean, stat.sd, sev, rng)
        elif atk is AttackType.DRIFT:
            corrupted, param = apply_drift(segment, stat.sd, sev)
        else:
            corrupted, param = apply_bias(segment, stat.sd, sev, rng)
        values[channel, t:t + effective] = corrupted
        labels[t:t + effective] = 1
        events.append(
            InjectionEvent(
                attack_type=atk,
                channel=channel,
                channel_name=stat.name,
                start=t,
                duration=effective,
                drawn_duration=sev.duration,
                level=sev.level,
                param=param,
            )
        )
        t += sev.duration

    corrupted_rec = SensorRecord(
        record_id=clean.record_id,
        channels=list(clean.channels),
        values=values,
        missing=np.zeros_like(clean.missing),
        step_rate_hz=clean.step_rate_hz,
    )
    return InjectionResult(corrupted_rec.freeze(), labels, events)


@dataclass(frozen=True)
class InjectionPlan:
    """Parsed injection config: which cells of the grid are live, and p."""

    probability: float
    types: tuple[AttackType, ...]
    levels: tuple[int, ...]
    seed: int | None = None

    def severities(self) -> list[SeverityConfig]:
        return standard_grid(list(self.types), list(self.levels))


def load_injection_plan(path: str | Path) -> InjectionPlan:
    with Path(path).open() as fh:
        obj = json.load(fh)
    try:
        probability = float(obj.get("probability", DEFAULT_PROBABILITY))
        types = tuple(AttackType.parse(t) for t in obj["types"])
        levels = tuple(int(lv) for lv in obj["levels"])
    except KeyError as exc:
        raise ConfigError(f"{path}: injection config missing key {exc}") from exc
    if len(set(types)) != len(types):
        raise ConfigError(f"{path}: duplicate attack types")
    if len(set(levels)) != len(levels):
        raise ConfigError(f"{path}: duplicate severity levels")
    seed = obj.get("seed")
    return InjectionPlan(
        probability=probability,
        types=types,
        levels=levels,
        seed=None if seed is None else int(seed),
    )


def save_injection_plan(plan: InjectionPlan, path: str | Path) -> None:
    obj = {
        "probability": plan.probability,
        "types": [t.value for t in plan.types],
        "levels": list(plan.levels),
        "seed": plan.seed,
    }
    with Path(path).open("w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def write_events_jsonl(
    path: str | Path, events: list[tuple[str, InjectionEvent]]
) -> None:
    """One line per event, tagged with its record id."""
    with Path(path).open("w") as fh:
        for record_id, event in events:
            line = {"record": record_id}
            line.update(event.to_json())
            fh.write(json.dumps(line) + "\n")


def read_events_jsonl(path: str | Path) -> list[tuple[str, InjectionEvent]]:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append((str(obj["record"]), InjectionEvent.from_json(obj)))
    return out
