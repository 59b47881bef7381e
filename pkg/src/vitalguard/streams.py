"""Sensor-record data model: preprocessing, calibration, windowing, splits,
and CSV ingestion/export.

Records are immutable once preprocessed (their arrays are marked read-only);
windowing and calibration are pure functions, so everything here is safe to
run in parallel per record.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CalibrationError, ConfigError, ParseError, ShapeError

__all__ = [
    "ChannelSpec",
    "ChannelStats",
    "SensorRecord",
    "ExcludedRecord",
    "LabeledWindow",
    "SplitAssignment",
    "preprocess",
    "calibrate",
    "extract_windows",
    "split_records",
    "ingest_csv",
    "write_record_csv",
    "write_labels_csv",
    "read_labels_csv",
]

MISSING_EXCLUSION_FRACTION = 0.30


@dataclass(frozen=True)
class ChannelSpec:
    """Static channel metadata; clean_sd is filled in by calibration."""

    name: str
    unit: str = ""
    clean_sd: float | None = None


@dataclass(frozen=True)
class ChannelStats:
    """Clean-data calibration for one channel (training split only).

    sd is the pooled population standard deviation; severity magnitudes and
    window standardization are both expressed in these units.
    """

    name: str
    mean: float
    sd: float

    def __post_init__(self):
        if not self.sd > 0.0:
            raise CalibrationError(f"channel {self.name!r}: sd must be positive")


@dataclass(eq=False)
class SensorRecord:
    """A C x T multivariate stream with a per-sample missingness mask."""

    record_id: str
    channels: list[ChannelSpec]
    values: np.ndarray
    missing: np.ndarray
    step_rate_hz: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.missing = np.asarray(self.missing, dtype=bool)
        c = len(self.channels)
        if c < 1:
            raise ShapeError("SensorRecord needs at least one channel")
        if self.values.ndim != 2 or self.values.shape[0] != c:
            raise ShapeError(
                f"values must be {c}xT, got {self.values.shape} "
                f"for record {self.record_id!r}"
            )
        if self.missing.shape != self.values.shape:
            raise ShapeError("missing mask must match values shape")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    @property
    def channel_names(self) -> tuple[str, ...]:
        return tuple(ch.name for ch in self.channels)

    def freeze(self) -> "SensorRecord":
        self.values.flags.writeable = False
        self.missing.flags.writeable = False
        return self


@dataclass(frozen=True)
class ExcludedRecord:
    """Typed rejection from preprocessing, not an exception."""

    record_id: str
    reason: str
    worst_channel: str
    missing_fraction: float


@dataclass(frozen=True, eq=False)
class LabeledWindow:
    """One standardized C x L window with its attack label.

    values are in calibration units ((x - mean)/sd); raw keeps the original
    physical-unit slice so the plausibility filter can run on real readings.
    """

    values: np.ndarray
    label: int
    record_id: str
    end_time: int
    raw: np.ndarray
    channel_names: tuple[str, ...]

    @property
    def origin(self) -> tuple[str, int]:
        return (self.record_id, self.end_time)


@dataclass(frozen=True)
class SplitAssignment:
    """Record-level partition; tuples keep a deterministic iteration order."""

    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        groups = (set(self.train), set(self.val), set(self.test))
        total = sum(len(g) for g in groups)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise ConfigError("split groups overlap")


def preprocess(raw: SensorRecord) -> SensorRecord | ExcludedRecord:
    """Impute gaps, or reject the record when any channel is mostly missing.

    A channel with more than 30% missing samples rejects the whole record.
    Otherwise gaps are forward-filled from the last observation; a leading
    gap (nothing before it to carry forward) is back-filled from the first
    observed value.
    """
    frac = raw.missing.mean(axis=1)
    worst = int(np.argmax(frac))
    if frac[worst] > MISSING_EXCLUSION_FRACTION:
        return ExcludedRecord(
            record_id=raw.record_id,
            reason="missing fraction above threshold",
            worst_channel=raw.channels[worst].name,
            missing_fraction=float(frac[worst]),
        )
    values = raw.values.copy()
    t_len = raw.n_steps
    idx = np.arange(t_len)
    for c in range(raw.n_channels):
        miss = raw.missing[c]
        if not miss.any():
            continue
        obs = ~miss
        # forward fill: index of the most recent observed step
        last_obs = np.where(obs, idx, -1)
        last_obs = np.maximum.accumulate(last_obs)
        filled = np.where(last_obs >= 0, values[c, np.maximum(last_obs, 0)], np.nan)
        # leading gap: back-fill from the first observation
        first = int(np.argmax(obs))
        filled[: first] = values[c, first]
        values[c] = filled
    out = SensorRecord(
        record_id=raw.record_id,
        channels=list(raw.channels),
        values=values,
        missing=np.zeros_like(raw.missing),
        step_rate_hz=raw.step_rate_hz,
    )
    return out.freeze()


def calibrate(records: list[SensorRecord]) -> list[ChannelStats]:
    """Pooled per-channel mean and population SD over clean records.

    Call on the training split only; the resulting units parameterize both
    injection severities and window standardization.
    """
    if not records:
        raise CalibrationError("calibrate: no records")
    names = records[0].channel_names
    for rec in records:
        if rec.channel_names != names:
            raise ConfigError(
                f"calibrate: record {rec.record_id!r} channel set differs"
            )
        if rec.missing.any():
            raise ConfigError(
                f"calibrate: record {rec.record_id!r} is not preprocessed"
            )
    stats = []
    for c, name in enumerate(names):
        pooled = np.concatenate([rec.values[c] for rec in records])
        sd = float(pooled.std(ddof=0))
        if sd < 1e-12:
            raise CalibrationError(f"channel {name!r} is constant (sd = 0)")
        stats.append(ChannelStats(name=name, mean=float(pooled.mean()), sd=sd))
    return stats


def extract_windows(
    rec: SensorRecord,
    labels: np.ndarray,
    window_len: int,
    stride: int = 1,
    stats: list[ChannelStats] | None = None,
) -> list[LabeledWindow]:
    """Slide a length-L window over the record; label = max of step labels.

    Values are standardized per channel with the supplied training-split
    stats. Returns an empty list when the record is shorter than L.
    """
    if window_len < 1 or stride < 1:
        raise ConfigError("extract_windows: window_len and stride must be >= 1")
    labels = np.asarray(labels)
    if labels.shape != (rec.n_steps,):
        raise ShapeError(
            f"labels shape {labels.shape} != ({rec.n_steps},) "
            f"for record {rec.record_id!r}"
        )
    if stats is None:
        raise ConfigError("extract_windows: calibration stats required")
    if tuple(s.name for s in stats) != rec.channel_names:
        raise ConfigError("extract_windows: stats do not match record channels")
    if rec.n_steps < window_len:
        return []
    mean = np.array([s.mean for s in stats])[:, None]
    sd = np.array([s.sd for s in stats])[:, None]
    names = rec.channel_names
    out = []
    for end in range(window_len - 1, rec.n_steps, stride):
        start = end - window_len + 1
        raw = rec.values[:, start:end + 1]
        out.append(
            LabeledWindow(
                values=(raw - mean) / sd,
                label=int(labels[start:end + 1].max()),
                record_id=rec.record_id,
                end_time=end,
                raw=raw,
                channel_names=names,
            )
        )
    return out


def split_records(
    record_ids: list[str],
    seed: int,
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
) -> SplitAssignment:
    """Shuffle ids and partition at the record level (never per window)."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    ids = sorted(record_ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("split_records: duplicate record ids")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_train = int(fractions[0] * n)
    n_val = int((fractions[0] + fractions[1]) * n) - n_train
    return SplitAssignment(
        train=tuple(shuffled[:n_train]),
        val=tuple(shuffled[n_train:n_train + n_val]),
        test=tuple(shuffled[n_train + n_val:]),
    )


def ingest_csv(
    path: str | Path,
    record_id: str | None = None,
    expected_channels: list[str] | None = None,
) -> SensorRecord:
    """Read one record: header names the channels, one row per time step,
    empty cells mark missing samples.

    Errors carry 1-based file line numbers (the header is line 1).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if any(not h for h in header):
            raise ParseError(f"{path}: line 1: blank channel name in header")
        if len(set(header)) != len(header):
            raise ParseError(f"{path}: line 1: duplicate channel name")
        if expected_channels is not None and header != list(expected_channels):
            raise ParseError(
                f"{path}: line 1: channel set {header} does not match "
                f"expected {list(expected_channels)}"
            )
        n_cols = len(header)
        values_rows: list[list[float]] = []
        missing_rows: list[list[bool]] = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != n_cols:
                raise ParseError(
                    f"{path}: line {line_no}: expected {n_cols} cells, "
                    f"got {len(row)}"
                )
            vals = []
            miss = []
            for col, cell in enumerate(row):
                cell = cell.strip()
                if cell == "":
                    vals.append(0.0)
                    miss.append(True)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: line {line_no}: column {header[col]!r}: "
                        f"non-numeric cell {cell!r}"
                    ) from None
                miss.append(False)
            values_rows.append(vals)
            missing_rows.append(miss)
    if not values_rows:
        raise ParseError(f"{path}: no data rows")
    # file rows are time steps; the record stores channels x time
    return SensorRecord(
        record_id=record_id if record_id is not None else path.stem,
        channels=[ChannelSpec(name=h) for h in header],
        values=np.array(values_rows).T,
        missing=np.array(missing_rows, dtype=bool).T,
    )


def write_record_csv(rec: SensorRecord, path: str | Path) -> None:
    """Inverse of ingest_csv; missing samples become empty cells."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(rec.channel_names)
        for t in range(rec.n_steps):
            writer.writerow(
                ""
                if rec.missing[c, t]
                else repr(float(rec.values[c, t]))
                for c in range(rec.n_channels)
            )


def write_labels_csv(labels: np.ndarray, path: str | Path) -> None:
    """One 'label' column, one row per time step (aligns with the record)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"])
        for v in np.asarray(labels).astype(int):
            writer.writerow([int(v)])


def read_labels_csv(path: str | Path) -> np.ndarray:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["label"]:
            raise ParseError(f"{path}: line 1: expected a single 'label' column")
        out = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 1 or row[0] not in ("0", "1"):
                raise ParseError(f"{path}: line {line_no}: labels must be 0 or 1")
            out.append(int(row[0]))
    return np.array(out, dtype=np.int64)
