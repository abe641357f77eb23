from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weathersr.errors import (
    ConfigurationError,
    ContractError,
    DataError,
    DegenerateDataError,
    EmptyDatasetError,
    ShapeError,
)
from weathersr.grid import (
    HR_SHAPE,
    KELVIN,
    LR_SHAPE,
    STANDARDIZED,
    GridField,
    PairedDataset,
    PairedSample,
    StandardizationStats,
    destandardize,
    downsample,
    fit_stats,
    hourly_timestamps,
    load_pairs,
    standardize,
    synth_dataset,
    synth_pair,
)

from conftest import write_archive

UTC = timezone.utc


def kelvin_pair(ts, rng, offset=280.0):
    hr = GridField(offset + 10 * rng.standard_normal(HR_SHAPE), KELVIN, 1.40525, ts)
    lr = GridField(offset + 3 + 8 * rng.standard_normal(LR_SHAPE), KELVIN, 5.625, ts)
    return PairedSample(lr, hr, ts)


def kelvin_dataset(n, rng, split="train"):
    t0 = datetime(2000, 1, 1, tzinfo=UTC)
    return PairedDataset(tuple(kelvin_pair(t0 + timedelta(hours=i), rng) for i in range(n)), split=split)


class TestGridField:
    def test_values_read_only(self):
        f = GridField(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            f.values[0, 0] = 1.0

    @pytest.mark.parametrize("shape", [(3, 8), (8, 3), (8,), (2, 4, 4)])
    def test_rejects_bad_shapes(self, shape):
        with pytest.raises(ShapeError):
            GridField(np.zeros(shape))

    def test_rejects_non_finite(self):
        v = np.zeros((4, 4))
        v[1, 2] = np.nan
        with pytest.raises(DataError):
            GridField(v)

    def test_rejects_bad_units_and_spacing(self):
        with pytest.raises(ContractError):
            GridField(np.zeros((4, 4)), units="celsius")
        with pytest.raises(ContractError):
            GridField(np.zeros((4, 4)), grid_spacing_deg=0.0)

    def test_naive_timestamp_becomes_utc(self):
        f = GridField(np.zeros((4, 4)), timestamp=datetime(2016, 1, 1))
        assert f.timestamp.tzinfo is not None


class TestPairs:
    def test_shape_relation(self):
        with pytest.raises(ShapeError):
            PairedSample(GridField(np.zeros((8, 8))), GridField(np.zeros((16, 32))), datetime(2000, 1, 1))

    def test_units_must_match(self):
        with pytest.raises(ContractError):
            PairedSample(GridField(np.zeros((4, 4)), KELVIN), GridField(np.zeros((16, 16))),
                         datetime(2000, 1, 1))

    def test_dataset_needs_increasing_timestamps(self):
        a, b = synth_pair(2, 2.0), synth_pair(1, 2.0)
        with pytest.raises(ContractError):
            PairedDataset((a, b))


class TestHourlySlots:
    def test_training_range_january_count(self):
        slots = hourly_timestamps(datetime(1979, 1, 1), datetime(2015, 2, 1), 1)
        assert len(slots) == 37 * 31 * 24 == 27528

    def test_validation_range_count(self):
        slots = hourly_timestamps(datetime(2016, 1, 1), datetime(2016, 2, 1), 1)
        assert len(slots) == 744

    def test_half_open(self):
        slots = hourly_timestamps(datetime(2016, 1, 1), datetime(2016, 1, 2))
        assert slots[0] == datetime(2016, 1, 1, tzinfo=UTC)
        assert slots[-1] == datetime(2016, 1, 1, 23, tzinfo=UTC)


@pytest.fixture(scope="module")
def january_archives(tmp_path_factory):
    """Hourly LR/HR records spanning 2015-12-31 18:00 .. 2016-02-01 06:00."""
    d = tmp_path_factory.mktemp("nc")
    start = np.datetime64("2015-12-31T18:00")
    times = start + np.arange(6 + 744 + 7) * np.timedelta64(1, "h")
    lr = write_archive(d / "lr.nc", times, LR_SHAPE, lambda i: np.full(LR_SHAPE, 250.0 + 0.01 * i))
    hr = write_archive(d / "hr.nc", times, HR_SHAPE, lambda i: np.full(HR_SHAPE, 251.0 + 0.01 * i))
    gap = d / "gap"
    gap.mkdir()
    day = times[(times >= np.datetime64("2016-01-10")) & (times < np.datetime64("2016-01-11"))]
    write_archive(gap / "hr_gap.nc", np.delete(day, [3, 17]), HR_SHAPE, lambda i: np.full(HR_SHAPE, 1.0 * i))
    return d, lr, hr


class TestLoadPairs:
    def test_january_2016_pairs(self, january_archives):
        _, lr, hr = january_archives
        ds = load_pairs(lr, hr, "t2m", datetime(2016, 1, 1), datetime(2016, 2, 1), 1, split="validation")
        assert len(ds) == 744
        assert ds.dropped == 0
        s = ds[0]
        assert s.lr.shape == (32, 64) and s.hr.shape == (128, 256)
        assert s.lr.units == KELVIN
        assert s.lr.grid_spacing_deg == 5.625 and s.hr.grid_spacing_deg == 1.40525
        assert s.timestamp == datetime(2016, 1, 1, tzinfo=UTC)
        assert ds[-1].timestamp == datetime(2016, 1, 31, 23, tzinfo=UTC)
        # LR record i carries 250 + 0.01 i with i counted from 2015-12-31 18:00
        assert ds[0].lr.values[0, 0] == np.float32(250.0 + 0.06)
        assert ds[0].hr.values[0, 0] == np.float32(251.0 + 0.06)

    def test_missing_hours_are_dropped_and_counted(self, january_archives):
        d, lr, _ = january_archives
        start, end = datetime(2016, 1, 10), datetime(2016, 1, 11)
        ds = load_pairs(lr, d / "gap", "t2m", start, end)
        assert len(ds) == 22 and ds.dropped == 2
        assert len(ds) + ds.dropped == len(hourly_timestamps(start, end))
        hours = [s.timestamp.hour for s in ds]
        assert 3 not in hours and 17 not in hours

    def test_directory_and_glob_inputs(self, january_archives):
        d, lr, hr = january_archives
        ds = load_pairs(str(lr), str(d / "hr*.nc"), "t2m", datetime(2016, 1, 10), datetime(2016, 1, 11))
        assert len(ds) == 24

    def test_missing_variable(self, january_archives):
        _, lr, hr = january_archives
        with pytest.raises(ConfigurationError):
            load_pairs(lr, hr, "z500", datetime(2016, 1, 1), datetime(2016, 2, 1))

    def test_empty(self, january_archives):
        _, lr, hr = january_archives
        with pytest.raises(EmptyDatasetError):
            load_pairs(lr, hr, "t2m", datetime(2017, 1, 1), datetime(2017, 2, 1))

    def test_shape_mismatch_names_file(self, january_archives):
        _, lr, hr = january_archives
        with pytest.raises(DataError, match=r"hr\.nc: grid shape"):
            load_pairs(hr, lr, "t2m", datetime(2016, 1, 1), datetime(2016, 2, 1))

    def test_bad_interval(self, january_archives):
        _, lr, hr = january_archives
        with pytest.raises(ConfigurationError):
            load_pairs(lr, hr, "t2m", datetime(2016, 2, 1), datetime(2016, 1, 1))


class TestStandardize:
    def test_fit_gives_zero_mean_unit_std(self, rng):
        ds = standardize(kelvin_dataset(6, rng))
        lr, hr = ds.lr_array(np.float64), ds.hr_array(np.float64)
        for arr in (lr, hr):
            assert abs(arr.mean()) < 1e-6
            assert abs(arr.std() - 1) < 1e-6
        assert ds.units == STANDARDIZED
        assert ds.stats.mean_lr != ds.stats.mean_hr

    def test_validation_reuses_train_stats(self, rng):
        train = standardize(kelvin_dataset(4, rng))
        val = kelvin_dataset(2, rng, split="validation")
        with pytest.raises(ContractError):
            standardize(val)
        out = standardize(val, train.stats)
        assert out.stats == train.stats
        expect = (val[0].hr.values - train.stats.mean_hr) / train.stats.std_hr
        np.testing.assert_allclose(out[0].hr.values, expect, rtol=1e-6, atol=1e-6)

    def test_constant_dataset_is_degenerate(self):
        t0 = datetime(2000, 1, 1, tzinfo=UTC)
        s = PairedSample(GridField(np.full(LR_SHAPE, 5.0), KELVIN), GridField(np.full(HR_SHAPE, 5.0), KELVIN), t0)
        with pytest.raises(DegenerateDataError):
            fit_stats(PairedDataset((s,)))

    def test_round_trip(self, rng):
        raw = kelvin_dataset(3, rng)
        ds = standardize(raw)
        for r, s in zip(raw, ds):
            back = destandardize(s.hr, ds.stats, "hr")
            np.testing.assert_allclose(back.values, r.hr.values, rtol=1e-6)
            assert back.units == KELVIN

    def test_destandardize_examples(self):
        stats = StandardizationStats(0.0, 1.0, 280.0, 15.0)
        out = destandardize(GridField(np.zeros((4, 4))), stats, "hr")
        assert np.all(out.values == 280.0)
        ident = StandardizationStats(0.0, 1.0, 0.0, 1.0)
        v = np.arange(16.0).reshape(4, 4)
        assert np.array_equal(destandardize(GridField(v), ident, "hr").values, v)

    def test_destandardize_units_contract(self):
        stats = StandardizationStats(0.0, 1.0, 0.0, 1.0)
        with pytest.raises(ContractError):
            destandardize(GridField(np.zeros((4, 4)), KELVIN), stats, "hr")
        with pytest.raises(ContractError):
            destandardize(GridField(np.zeros((4, 4))), stats, "mid")

    def test_stats_file_round_trip(self, tmp_path):
        stats = StandardizationStats(277.123456789, 21.5, 278.0, 22.25)
        stats.save(tmp_path / "stats.txt")
        assert StandardizationStats.load(tmp_path / "stats.txt") == stats
        assert len((tmp_path / "stats.txt").read_text().splitlines()) == 4

    def test_stats_validate_std(self):
        with pytest.raises(DegenerateDataError):
            StandardizationStats(0.0, 0.0, 0.0, 1.0)


class TestDownsample:
    def test_constant(self):
        out = downsample(GridField(np.full(HR_SHAPE, 3.25)), 4)
        assert out.shape == LR_SHAPE
        assert np.all(out.values == 3.25)
        assert out.grid_spacing_deg == pytest.approx(1.40525 * 4)

    def test_mean_preserved(self, rng):
        v = rng.standard_normal(HR_SHAPE)
        assert abs(downsample(GridField(v), 4).values.mean() - v.mean()) < 1e-9

    def test_block_mean_oracle(self, rng):
        v = rng.standard_normal((16, 20))
        out = downsample(GridField(v), 4).values
        for i in range(4):
            for j in range(5):
                assert out[i, j] == pytest.approx(v[4 * i:4 * i + 4, 4 * j:4 * j + 4].mean(), abs=1e-14)

    def test_non_divisible(self):
        with pytest.raises(ShapeError):
            downsample(GridField(np.zeros((10, 12))), 4)

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 2**31))
    def test_linear(self, a, b, seed):
        r = np.random.default_rng(seed)
        f, g = r.standard_normal((16, 24)), r.standard_normal((16, 24))
        lhs = downsample(GridField(a * f + b * g), 4).values
        rhs = a * downsample(GridField(f), 4).values + b * downsample(GridField(g), 4).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestSynthetic:
    def test_deterministic(self):
        a, b = synth_pair(7, 3.0), synth_pair(7, 3.0)
        assert np.array_equal(a.hr.values, b.hr.values)
        assert np.array_equal(a.lr.values, b.lr.values)
        assert a.timestamp == b.timestamp

    def test_seeds_differ(self):
        assert not np.array_equal(synth_pair(1, 4.0).hr.values, synth_pair(2, 4.0).hr.values)

    def test_lr_is_downsampled_hr(self):
        p = synth_pair(3, 4.0)
        assert np.array_equal(p.lr.values, downsample(p.hr, 4).values)
        assert p.hr.shape == HR_SHAPE and p.hr.units == STANDARDIZED

    def test_roughly_unit_variance(self):
        v = np.concatenate([synth_pair(s, 4.0).hr.values.ravel() for s in range(4)])
        assert 0.7 < v.std() < 1.3

    def test_smoothness_precondition(self):
        with pytest.raises(ConfigurationError):
            synth_pair(0, 0.0)

    def test_dataset_order(self):
        ds = synth_dataset([5, 3, 4], 2.0)
        assert [s.timestamp.hour for s in ds] == [3, 4, 5]
