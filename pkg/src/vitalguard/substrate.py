"""Synthetic physiological substrate: mean-reverting vitals streams.

Each channel is an AR(1) process pulled toward a channel-typical baseline,
with optional cross-channel coupling (heart rate and respiration move
together). Per-step changes and absolute values are clamped inside limits
chosen strictly tighter than the clinical plausibility bounds, so clean
records never trip the plausibility filter by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .streams import ChannelSpec, SensorRecord

__all__ = [
    "SubstrateChannel",
    "SubstrateConfig",
    "default_substrate_config",
    "load_substrate_config",
    "save_substrate_config",
    "synthesize_substrate",
]


@dataclass(frozen=True)
class SubstrateChannel:
    name: str
    unit: str
    baseline: float
    ar: float
    noise_sd: float
    clamp_lo: float
    clamp_hi: float
    max_step: float

    def __post_init__(self):
        if not (0.0 < self.ar < 1.0):
            raise ConfigError(f"channel {self.name!r}: ar must be in (0, 1)")
        if self.noise_sd <= 0.0:
            raise ConfigError(f"channel {self.name!r}: noise_sd must be positive")
        if not (self.clamp_lo < self.baseline < self.clamp_hi):
            raise ConfigError(
                f"channel {self.name!r}: baseline outside clamp range"
            )
        if self.max_step <= 0.0:
            raise ConfigError(f"channel {self.name!r}: max_step must be positive")


@dataclass(frozen=True)
class SubstrateConfig:
    channels: tuple[SubstrateChannel, ...]
    couplings: tuple[tuple[str, str, float], ...] = ()
    step_rate_hz: float | None = None

    def __post_init__(self):
        names = [ch.name for ch in self.channels]
        if len(set(names)) != len(names):
            raise ConfigError("substrate channels must have unique names")
        for src, dst, _w in self.couplings:
            for n in (src, dst):
                if n not in names:
                    raise ConfigError(f"coupling names unknown channel {n!r}")

    def coupling_matrix(self) -> np.ndarray:
        """Dense C x C matrix; entry [dst, src] feeds src deviation into dst."""
        idx = {ch.name: i for i, ch in enumerate(self.channels)}
        m = np.zeros((len(self.channels), len(self.channels)))
        for src, dst, w in self.couplings:
            m[idx[dst], idx[src]] = w
        return m


def default_substrate_config() -> SubstrateConfig:
    """Six-channel ICU vitals surrogate (HR, SpO2, SysBP, DiaBP, RR, Temp).

    Clamp ranges and per-step caps sit well inside the shipped plausibility
    bounds for this channel set.
    """
    return SubstrateConfig(
        channels=(
            SubstrateChannel("HR", "bpm", 80.0, 0.95, 1.2, 40.0, 180.0, 4.0),
            SubstrateChannel("SpO2", "%", 97.0, 0.95, 0.3, 85.0, 100.0, 0.8),
            SubstrateChannel("SysBP", "mmHg", 120.0, 0.95, 1.8, 70.0, 200.0, 6.0),
            SubstrateChannel("DiaBP", "mmHg", 70.0, 0.95, 1.2, 40.0, 120.0, 4.0),
            SubstrateChannel("RR", "breaths/min", 16.0, 0.95, 0.6, 8.0, 40.0, 2.0),
            SubstrateChannel("Temp", "degC", 37.0, 0.95, 0.02, 35.5, 39.0, 0.08),
        ),
        couplings=(("HR", "RR", 0.03), ("RR", "HR", 0.03)),
    )


def load_substrate_config(path: str | Path) -> SubstrateConfig:
    with Path(path).open() as fh:
        obj = json.load(fh)
    try:
        channels = tuple(
            SubstrateChannel(
                name=ch["name"],
                unit=ch.get("unit", ""),
                baseline=float(ch["baseline"]),
                ar=float(ch["ar"]),
                noise_sd=float(ch["noise_sd"]),
                clamp_lo=float(ch["clamp_lo"]),
                clamp_hi=float(ch["clamp_hi"]),
                max_step=float(ch["max_step"]),
            )
            for ch in obj["channels"]
        )
        couplings = tuple(
            (c["from"], c["to"], float(c["weight"]))
            for c in obj.get("couplings", [])
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed substrate config: {exc}") from exc
    rate = obj.get("step_rate_hz")
    return SubstrateConfig(
        channels=channels,
        couplings=couplings,
        step_rate_hz=None if rate is None else float(rate),
    )


def save_substrate_config(config: SubstrateConfig, path: str | Path) -> None:
    obj = {
        "step_rate_hz": config.step_rate_hz,
        "channels": [
            {
                "name": ch.name,
                "unit": ch.unit,
                "baseline": ch.baseline,
                "ar": ch.ar,
                "noise_sd": ch.noise_sd,
                "clamp_lo": ch.clamp_lo,
                "clamp_hi": ch.clamp_hi,
                "max_step": ch.max_step,
            }
            for ch in config.channels
        ],
        "couplings": [
            {"from": src, "to": dst, "weight": w}
            for src, dst, w in config.couplings
        ],
    }
    with Path(path).open("w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def synthesize_substrate(
    config: SubstrateConfig,
    seed: int,
    n_records: int,
    n_steps: int,
) -> list[SensorRecord]:
    """Generate n_records clean records of length n_steps, deterministically.

    Every record draws from its own child stream of the seed, so generation
    order (or parallelism) cannot change any record's contents.
    """
    if n_records < 0 or n_steps < 1:
        raise ConfigError("synthesize_substrate: need n_records >= 0, n_steps >= 1")
    channels = config.channels
    c_len = len(channels)
    baseline = np.array([ch.baseline for ch in channels])
    ar = np.array([ch.ar for ch in channels])
    noise = np.array([ch.noise_sd for ch in channels])
    lo = np.array([ch.clamp_lo for ch in channels])
    hi = np.array([ch.clamp_hi for ch in channels])
    cap = np.array([ch.max_step for ch in channels])
    coupling = config.coupling_matrix()
    specs = [ChannelSpec(name=ch.name, unit=ch.unit) for ch in channels]

    records = []
    for idx in range(n_records):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        eps = rng.standard_normal((c_len, n_steps))
        values = np.empty((c_len, n_steps))
        values[:, 0] = np.clip(baseline + noise * eps[:, 0], lo, hi)
        for t in range(1, n_steps):
            dev = values[:, t - 1] - baseline
            step = (ar - 1.0) * dev + coupling @ dev + noise * eps[:, t]
            step = np.clip(step, -cap, cap)
            values[:, t] = np.clip(values[:, t - 1] + step, lo, hi)
        rec = SensorRecord(
            record_id=f"r{idx:04d}",
            channels=list(specs),
            values=values,
            missing=np.zeros((c_len, n_steps), dtype=bool),
            step_rate_hz=config.step_rate_hz,
        )
        records.append(rec.freeze())
    return records
