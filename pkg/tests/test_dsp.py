import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src_python')))

from dsp import (
    Preprocessing,
    decimate2,
    make_windows,
    moving_average,
    normalize_unit_variance,
    preprocess,
    stack_windows,
    window_count,
)
from errors import RecordingTooShort, TooFewWindows, ZeroVarianceChannel
from gait_data import N_CHANNELS, Label, Recording, SubjectId


def _recording(n, seed=0, group="Pt"):
    rng = np.random.default_rng(seed)
    subject = SubjectId("Ga", group, 1)
    return Recording(subject, 1, subject.label, 100.0, rng.normal(5.0, 2.0, (N_CHANNELS, n)), np.arange(n) / 100.0)


class TestMovingAverage:
    def test_order_one_is_identity(self):
        x = np.random.default_rng(1).normal(size=50)
        np.testing.assert_array_equal(moving_average(x, 1), x)

    def test_order_two(self):
        np.testing.assert_allclose(moving_average(np.array([1.0, 3.0, 5.0]), 2), [0.5, 2.0, 4.0])

    def test_constant_settles(self):
        y = moving_average(np.full(1000, 3.0), 2)
        assert y[0] == pytest.approx(1.5)
        np.testing.assert_allclose(y[1:], 3.0)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x, z = rng.normal(size=200), rng.normal(size=200)
        np.testing.assert_allclose(moving_average(2.5 * x - 0.7 * z, 2),
                                   2.5 * moving_average(x, 2) - 0.7 * moving_average(z, 2), atol=1e-12)

    def test_applies_per_channel(self):
        x = np.random.default_rng(3).normal(size=(N_CHANNELS, 40))
        y = moving_average(x, 2)
        assert y.shape == x.shape
        np.testing.assert_allclose(y[4], moving_average(x[4], 2))

    def test_rejects_zero_order(self):
        with pytest.raises(ValueError):
            moving_average(np.ones(3), 0)


class TestDecimate:
    def test_even_indices(self):
        np.testing.assert_array_equal(decimate2(np.array([1, 2, 3, 4, 5])), [1, 3, 5])

    def test_halves_length(self):
        assert decimate2(np.zeros((N_CHANNELS, 12000))).shape == (N_CHANNELS, 6000)
        assert decimate2(np.zeros(7)).shape == (4,)

    def test_smoothing_attenuates_near_nyquist(self):
        t = np.arange(2000) / 100.0
        tone = np.sin(2 * np.pi * 49.0 * t)
        naive = decimate2(tone)
        smoothed = decimate2(moving_average(tone, 2))
        assert np.sum(smoothed ** 2) < np.sum(naive ** 2)


class TestNormalize:
    def test_unit_std_sequence_unchanged(self):
        x = np.array([[0.0, 2.0, 0.0, 2.0]])
        np.testing.assert_allclose(normalize_unit_variance(x), x)

    def test_output_has_unit_variance(self):
        x = np.random.default_rng(4).normal(3.0, 7.0, (N_CHANNELS, 500))
        y = normalize_unit_variance(x)
        np.testing.assert_allclose(y.var(axis=1), 1.0)
        # mean is scaled, not removed
        assert np.all(y.mean(axis=1) > 0)

    def test_idempotent(self):
        y = normalize_unit_variance(np.random.default_rng(5).normal(size=(3, 300)))
        np.testing.assert_allclose(normalize_unit_variance(y), y, atol=1e-12)

    def test_scale_invariant(self):
        x = np.random.default_rng(6).normal(size=(3, 300))
        np.testing.assert_allclose(normalize_unit_variance(42.0 * x), normalize_unit_variance(x), atol=1e-12)

    def test_zero_mean_variant(self):
        x = np.random.default_rng(7).normal(4.0, 2.0, (2, 400))
        y = normalize_unit_variance(x, zero_mean=True)
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=1), 1.0)

    def test_constant_channel_reported(self):
        x = np.random.default_rng(8).normal(size=(N_CHANNELS, 100))
        x[3] = 7.0
        with pytest.raises(ZeroVarianceChannel) as exc:
            normalize_unit_variance(x)
        assert exc.value.channel == 3


class TestPreprocess:
    def test_filtered_variant_halves_rate_and_length(self):
        rec = preprocess(_recording(12000), Preprocessing.FILTERED_50HZ)
        assert rec.length == 6000
        assert rec.sample_rate_hz == 50.0
        np.testing.assert_allclose(rec.channels.std(axis=1), 1.0)

    def test_normalized_variant_keeps_grid(self):
        src = _recording(1000)
        rec = preprocess(src, Preprocessing.NORMALIZED_100HZ)
        assert rec.length == 1000
        assert rec.sample_rate_hz == 100.0
        assert rec.key == src.key and rec.label is src.label


class TestWindows:
    def test_count_for_full_recording(self):
        assert window_count(12000, 100, 50) == 239
        assert len(make_windows(_recording(12000), 100, 50)) == 239

    def test_exact_length_gives_one_window(self):
        windows = make_windows(_recording(100), 100, 50)
        assert len(windows) == 1
        assert windows[0].offset == 0

    def test_too_short(self):
        with pytest.raises(RecordingTooShort):
            make_windows(_recording(99), 100, 50)

    def test_windows_are_slices_of_the_source(self):
        rec = _recording(1234, seed=9)
        windows = make_windows(rec, 100, 30)
        rng = np.random.default_rng(0)
        for i in rng.choice(len(windows), size=10, replace=False):
            w = windows[i]
            assert w.offset == i * 30
            assert w.label is rec.label
            assert w.source == rec.key
            np.testing.assert_array_equal(w.data, rec.channels[:, w.offset:w.offset + 100])

    def test_non_overlapping_windows_cover_truncated_recording(self):
        rec = _recording(1050)
        windows = make_windows(rec, 100, 100)
        np.testing.assert_array_equal(np.concatenate([w.data for w in windows], axis=1), rec.channels[:, :1000])

    def test_stack(self):
        pd_windows = make_windows(_recording(300, group="Pt"), 100, 50)
        co_windows = make_windows(_recording(300, group="Co"), 100, 50)
        x, y = stack_windows(pd_windows + co_windows)
        assert x.shape == (10, N_CHANNELS, 100)
        assert x.dtype == np.float32
        assert list(y) == [1.0] * 5 + [0.0] * 5
        assert pd_windows[0].label is Label.PD

    def test_stack_empty(self):
        with pytest.raises(TooFewWindows):
            stack_windows([])
