"""Plausibility filter: bounds conformance, suppression semantics,
idempotence, monotonicity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitalguard.errors import ConfigError
from vitalguard.plausibility import (
    BUILTIN_BOUNDS,
    ChannelBounds,
    PlausibilityBounds,
    builtin_bounds,
    filter_prediction,
    filter_predictions,
    is_plausible,
    load_bounds,
    save_bounds,
)
from vitalguard.streams import LabeledWindow

# the full shipped table for the bedside-ICU channel set:
# name -> (unit, lower, upper, max step delta)
PHYSIONET_TABLE = {
    "HR": ("bpm", 20.0, 300.0, 5.0),
    "SpO2": ("%", 50.0, 100.0, 1.0),
    "SysBP": ("mmHg", 50.0, 260.0, 7.5),
    "DiaBP": ("mmHg", 20.0, 180.0, 5.0),
    "RR": ("br/min", 4.0, 70.0, 2.5),
    "Temp": ("degC", 32.0, 42.5, 0.1),
}
MIMIC_TABLE = {
    "ECG": ("mV", -5.0, 5.0, 0.5),
    "ABP": ("mmHg", 20.0, 280.0, 8.0),
    "PPG": ("a.u.", 0.0, 1.0, 0.05),
    "HR": ("bpm", 20.0, 300.0, 5.0),
    "RR": ("br/min", 4.0, 70.0, 2.5),
    "Temp": ("degC", 32.0, 42.5, 0.1),
}
WESAD_TABLE = {
    "ECG": ("mV", -2.0, 2.0, 0.2),
    "EDA": ("uS", 0.01, 100.0, 1.5),
    "BVP": ("a.u.", -1.0, 1.0, 0.05),
    "RESP": ("a.u.", -1.0, 1.0, 0.04),
    "ST": ("degC", 26.0, 40.0, 0.05),
    "ACC": ("g", 0.0, 8.0, 0.5),
}


def simple_bounds():
    return PlausibilityBounds(
        dataset="test",
        channels=(
            ChannelBounds("HR", "bpm", 20.0, 300.0, 5.0),
            ChannelBounds("SpO2", "%", 50.0, 100.0, 1.0),
        ),
    )


def window(hr, spo2):
    return np.array([hr, spo2], dtype=float)


class TestShippedTables:
    @pytest.mark.parametrize(
        "name,table",
        [
            ("physionet2012", PHYSIONET_TABLE),
            ("mimic3_waveform", MIMIC_TABLE),
            ("wesad", WESAD_TABLE),
        ],
    )
    def test_builtin_matches_reference(self, name, table):
        bounds = builtin_bounds(name)
        assert len(bounds.channels) == len(table)
        for ch in bounds.channels:
            unit, lo, hi, delta = table[ch.name]
            assert ch.unit == unit
            assert ch.lower == lo
            assert ch.upper == hi
            assert ch.max_step_delta == delta
        assert bounds.step_rate_hz == 25.0

    def test_all_builtins_load(self):
        for name in BUILTIN_BOUNDS:
            builtin_bounds(name)

    def test_unknown_builtin(self):
        with pytest.raises(ConfigError):
            builtin_bounds("nope")


class TestIsPlausible:
    def test_in_range_constant_true(self):
        w = window([80.0] * 5, [97.0] * 5)
        assert is_plausible(w, ["HR", "SpO2"], simple_bounds())

    def test_hr_over_upper_false(self):
        w = window([80, 80, 310, 80, 80], [97] * 5)
        assert not is_plausible(w, ["HR", "SpO2"], simple_bounds())

    def test_spo2_jump_false(self):
        # 92 -> 94 in one step exceeds the 1.0 per-step limit
        w = window([80] * 5, [92, 92, 94, 94, 94])
        assert not is_plausible(w, ["HR", "SpO2"], simple_bounds())

    def test_step_at_exact_limit_true(self):
        w = window([80, 85, 80, 85, 80], [97] * 5)
        assert is_plausible(w, ["HR", "SpO2"], simple_bounds())

    def test_below_lower_false(self):
        w = window([80] * 5, [49] + [97] * 4)
        assert not is_plausible(w, ["HR", "SpO2"], simple_bounds())

    def test_unconfigured_channel_errors(self):
        w = np.ones((1, 5)) * 80
        with pytest.raises(ConfigError):
            is_plausible(w, ["Mystery"], simple_bounds())

    def test_single_step_window(self):
        assert is_plausible(window([80.0], [97.0]), ["HR", "SpO2"], simple_bounds())

    def test_rate_scaling(self):
        bounds = simple_bounds()  # deltas specified per step at no rate
        rated = PlausibilityBounds("test", bounds.channels, step_rate_hz=25.0)
        # 12.5 Hz record: steps are twice as long, twice the change allowed
        w = window([80, 88, 80, 88, 80], [97] * 5)
        assert not is_plausible(w, ["HR", "SpO2"], rated, record_rate_hz=25.0)
        assert is_plausible(w, ["HR", "SpO2"], rated, record_rate_hz=12.5)
        # no declared record rate: deltas apply unscaled
        assert not is_plausible(w, ["HR", "SpO2"], rated)


class TestFilter:
    def test_negative_never_flipped(self):
        w = window([310] * 5, [97] * 5)  # implausible window
        assert filter_prediction(0, w, ["HR", "SpO2"], simple_bounds()) == 0

    def test_positive_on_implausible_kept(self):
        w = window([310] * 5, [97] * 5)
        assert filter_prediction(1, w, ["HR", "SpO2"], simple_bounds()) == 1

    def test_positive_on_plausible_suppressed(self):
        w = window([80] * 5, [97] * 5)
        assert filter_prediction(1, w, ["HR", "SpO2"], simple_bounds()) == 0

    def _windows(self, seed=0, n=30):
        rng = np.random.default_rng(seed)
        out = []
        for i in range(n):
            if i % 3 == 0:
                raw = window([80 + rng.normal()] * 5, [97] * 5)  # plausible
            else:
                raw = window([80, 80, 320, 80, 80], [97] * 5)  # range breach
            out.append(
                LabeledWindow(
                    values=raw.copy(),
                    label=int(i % 2),
                    record_id="r",
                    end_time=i,
                    raw=raw,
                    channel_names=("HR", "SpO2"),
                )
            )
        return out

    def test_vector_suppression_only(self):
        wins = self._windows()
        preds = np.ones(len(wins), dtype=int)
        filtered = filter_predictions(preds, wins, simple_bounds())
        assert (filtered <= preds).all()
        # plausible windows (every third) suppressed, others kept
        expected = np.array([0 if i % 3 == 0 else 1 for i in range(len(wins))])
        np.testing.assert_array_equal(filtered, expected)

    def test_idempotent(self):
        wins = self._windows(1)
        preds = np.array([i % 2 for i in range(len(wins))])
        once = filter_predictions(preds, wins, simple_bounds())
        twice = filter_predictions(once, wins, simple_bounds())
        np.testing.assert_array_equal(once, twice)

    def test_widening_bounds_grows_suppressed_set(self):
        wins = self._windows(2)
        preds = np.ones(len(wins), dtype=int)
        narrow = simple_bounds()
        wide = PlausibilityBounds(
            dataset="wide",
            channels=(
                ChannelBounds("HR", "bpm", 0.0, 500.0, 50.0),
                ChannelBounds("SpO2", "%", 0.0, 200.0, 10.0),
            ),
        )
        f_narrow = filter_predictions(preds, wins, narrow)
        f_wide = filter_predictions(preds, wins, wide)
        assert (f_wide <= f_narrow).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_filter_suppression_only_property(seed):
    rng = np.random.default_rng(seed)
    bounds = simple_bounds()
    wins = []
    for i in range(20):
        hr = rng.uniform(10, 350, size=5)
        spo2 = rng.uniform(40, 110, size=5)
        raw = np.vstack([hr, spo2])
        wins.append(
            LabeledWindow(
                values=raw.copy(),
                label=0,
                record_id="r",
                end_time=i,
                raw=raw,
                channel_names=("HR", "SpO2"),
            )
        )
    preds = rng.integers(0, 2, size=20)
    filtered = filter_predictions(preds, wins, bounds)
    assert (filtered <= preds).all()
    again = filter_predictions(filtered, wins, bounds)
    np.testing.assert_array_equal(filtered, again)


class TestBoundsIO:
    def test_roundtrip(self, tmp_path):
        bounds = builtin_bounds("wesad")
        p = tmp_path / "bounds.json"
        save_bounds(bounds, p)
        assert load_bounds(p) == bounds

    def test_validation(self):
        with pytest.raises(ConfigError):
            ChannelBounds("HR", "bpm", 100.0, 50.0, 5.0)
        with pytest.raises(ConfigError):
            ChannelBounds("HR", "bpm", 20.0, 300.0, 0.0)
        with pytest.raises(ConfigError):
            PlausibilityBounds(
                "dup",
                (
                    ChannelBounds("HR", "bpm", 20.0, 300.0, 5.0),
                    ChannelBounds("HR", "bpm", 20.0, 300.0, 5.0),
                ),
            )
