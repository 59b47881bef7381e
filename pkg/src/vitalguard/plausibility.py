"""Physiological plausibility filter: a zero-parameter alarm suppressor.

A positive detection whose raw readings all sit inside clinical range
limits and per-step rate-of-change limits is suppressed. The filter never
creates positives and never learns anything; it is a pure function of the
window, the prediction, and the bounds table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .streams import LabeledWindow

__all__ = [
    "ChannelBounds",
    "PlausibilityBounds",
    "is_plausible",
    "filter_prediction",
    "filter_predictions",
    "load_bounds",
    "save_bounds",
    "builtin_bounds",
    "BUILTIN_BOUNDS",
]


@dataclass(frozen=True)
class ChannelBounds:
    """Clinical limits for one channel, in physical units."""

    name: str
    unit: str
    lower: float
    upper: float
    max_step_delta: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ConfigError(f"channel {self.name!r}: lower must be < upper")
        if not isinstance(self.max_step_delta, (int, float)) or not self.max_step_delta > 0:
            raise ConfigError(f"channel {self.name!r}: max_step_delta must be > 0")


@dataclass(frozen=True)
class PlausibilityBounds:
    """Bounds table for one dataset; step_rate_hz is the rate the per-step
    deltas were specified at (None means per stored step, unscaled)."""

    dataset: str
    channels: tuple[ChannelBounds, ...]
    step_rate_hz: float | None = None

    def __post_init__(self):
        names = [ch.name for ch in self.channels]
        if len(set(names)) != len(names):
            raise ConfigError(f"bounds {self.dataset!r}: duplicate channel names")

    def for_channel(self, name: str) -> ChannelBounds:
        for ch in self.channels:
            if ch.name == name:
                return ch
        raise ConfigError(
            f"no plausibility bounds configured for channel {name!r} "
            f"in dataset {self.dataset!r}"
        )

    def step_delta(self, name: str, record_rate_hz: float | None) -> float:
        """Per-step delta limit, rescaled when the record's step rate differs
        from the rate the bounds were specified at.

        A slower stream (fewer steps per second) is allowed a proportionally
        larger change per stored step.
        """
        ch = self.for_channel(name)
        if record_rate_hz is None or self.step_rate_hz is None:
            return ch.max_step_delta
        if record_rate_hz <= 0:
            raise ConfigError("record step rate must be positive")
        return ch.max_step_delta * (self.step_rate_hz / record_rate_hz)


def is_plausible(
    window_raw: np.ndarray,
    channel_names: Sequence[str],
    bounds: PlausibilityBounds,
    record_rate_hz: float | None = None,
) -> bool:
    """True iff every sample of every channel is in range and every
    consecutive within-window change is inside the rate limit.

    Operates on raw physical-unit values, never standardized ones.
    """
    window_raw = np.asarray(window_raw)
    if window_raw.ndim != 2 or window_raw.shape[0] != len(channel_names):
        raise ConfigError(
            f"window shape {window_raw.shape} does not match "
            f"{len(channel_names)} channels"
        )
    for c, name in enumerate(channel_names):
        ch = bounds.for_channel(name)
        row = window_raw[c]
        if row.min() < ch.lower or row.max() > ch.upper:
            return False
        if len(row) > 1:
            delta = bounds.step_delta(name, record_rate_hz)
            if np.abs(np.diff(row)).max() > delta:
                return False
    return True


def filter_prediction(
    prediction: int,
    window_raw: np.ndarray,
    channel_names: Sequence[str],
    bounds: PlausibilityBounds,
    record_rate_hz: float | None = None,
) -> int:
    """Suppress a positive whose window is fully plausible; never touch a
    negative."""
    if prediction == 0:
        return 0
    if is_plausible(window_raw, channel_names, bounds, record_rate_hz):
        return 0
    return prediction


def filter_predictions(
    predictions: np.ndarray,
    windows: Iterable[LabeledWindow],
    bounds: PlausibilityBounds,
    record_rate_hz: float | None = None,
) -> np.ndarray:
    """Vector form over labeled windows (uses each window's raw values)."""
    predictions = np.asarray(predictions)
    out = predictions.copy()
    for i, w in enumerate(windows):
        out[i] = filter_prediction(
            int(predictions[i]), w.raw, w.channel_names, bounds, record_rate_hz
        )
    return out


def _bounds_from_json(obj: dict, source: str) -> PlausibilityBounds:
    try:
        channels = tuple(
            ChannelBounds(
                name=ch["name"],
                unit=ch.get("unit", ""),
                lower=float(ch["lower"]),
                upper=float(ch["upper"]),
                max_step_delta=float(ch["max_step_delta"]),
            )
            for ch in obj["channels"]
        )
        dataset = str(obj.get("dataset", source))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{source}: malformed bounds config: {exc}") from exc
    rate = obj.get("step_rate_hz")
    return PlausibilityBounds(
        dataset=dataset,
        channels=channels,
        step_rate_hz=None if rate is None else float(rate),
    )


def load_bounds(path: str | Path) -> PlausibilityBounds:
    path = Path(path)
    with path.open() as fh:
        obj = json.load(fh)
    return _bounds_from_json(obj, str(path))


def save_bounds(bounds: PlausibilityBounds, path: str | Path) -> None:
    obj = {
        "dataset": bounds.dataset,
        "step_rate_hz": bounds.step_rate_hz,
        "channels": [
            {
                "name": ch.name,
                "unit": ch.unit,
                "lower": ch.lower,
                "upper": ch.upper,
                "max_step_delta": ch.max_step_delta,
            }
            for ch in bounds.channels
        ],
    }
    with Path(path).open("w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


BUILTIN_BOUNDS = ("physionet2012", "mimic3_waveform", "wesad")


def builtin_bounds(name: str) -> PlausibilityBounds:
    """Load one of the shipped bounds tables by short name."""
    if name not in BUILTIN_BOUNDS:
        raise ConfigError(
            f"unknown bounds set {name!r} (one of: {', '.join(BUILTIN_BOUNDS)})"
        )
    ref = resources.files("vitalguard") / "configs" / f"bounds_{name}.json"
    with ref.open() as fh:
        obj = json.load(fh)
    return _bounds_from_json(obj, f"builtin:{name}")
