#!/usr/bin/env python3
"""
Default-rate series, histogram, synthetic series and writer tests
"""

import io
import math
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

sys.path.insert(0, str(Path(__file__).parent))

from core import JungleParams, LossPmf, PortfolioSpec
from dataio import (
    PRESETS,
    DefaultRateRecord,
    DefaultRateSeries,
    histogram,
    load_series,
    read_pmf_csv,
    read_state_dump,
    synthetic_series,
    write_pmf_csv,
    write_samples_csv,
    write_series,
    write_state_dump,
)
from errors import DomainError, SeriesParseError
from exact_models import binomial_pmf
from sampler import McmcConfig, gibbs_sample, losses_from_states


def write_text(tmp, name, text):
    path = Path(tmp) / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_series_accepts_good_rows():
    with tempfile.TemporaryDirectory() as tmp:
        path = write_text(tmp, "rates.csv", "year,cohort,rate,count\n1970,SpecGrade,0.012,800\n1971,SpecGrade,0.031,\n")
        [series] = load_series(path)
        assert series.cohort == "SpecGrade"
        assert list(series.years()) == [1970, 1971]
        assert series.records[0].count == 800 and series.records[1].count is None
        assert abs(series.mean_rate() - 0.0215) < 1e-15


def test_load_series_reports_bad_rate_with_line():
    with tempfile.TemporaryDirectory() as tmp:
        path = write_text(tmp, "rates.csv", "year,cohort,rate\n1970,SpecGrade,1.5\n")
        try:
            load_series(path)
        except SeriesParseError as e:
            assert e.problems[0][0] == 2
            assert "out of range" in e.problems[0][1]
            return
    raise AssertionError("rate 1.5 should be rejected")


def test_load_series_reports_invalid_utf8_line():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "rates.csv"
        path.write_bytes(b"year,cohort,rate\n1970,SpecGrade,0.01\n1971,Spec\xffGrade,0.02\n")
        try:
            load_series(path)
        except SeriesParseError as e:
            assert e.problems == [(3, "not valid UTF-8 at byte 9")]
            return
    raise AssertionError("invalid UTF-8 should be reported as a parse problem")


def test_load_series_missing_columns():
    with tempfile.TemporaryDirectory() as tmp:
        path = write_text(tmp, "rates.csv", "year,rate\n1970,0.1\n")
        try:
            load_series(path)
        except SeriesParseError as e:
            assert "cohort" in e.problems[0][1]
            return
    raise AssertionError("missing cohort column should be rejected")


def test_load_series_years_must_increase():
    with tempfile.TemporaryDirectory() as tmp:
        text = "year,cohort,rate\n1970,A,0.1\n1971,B,0.2\n1970,A,0.3\n"
        try:
            load_series(write_text(tmp, "rates.csv", text))
        except SeriesParseError as e:
            assert e.problems == [(4, "year 1970 does not increase within cohort 'A'")]
            return
    raise AssertionError("non-increasing years should be rejected")


def test_series_round_trip():
    original = synthetic_series(cohort="SpecGrade", start_year=1990, end_year=1999, seed=3)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "series.csv"
        write_series(original, path)
        [loaded] = load_series(path)
    assert loaded.records == original.records


def test_synthetic_speculative_series():
    series = synthetic_series(seed=11)
    assert len(series) == 91
    assert series.years()[0] == 1920 and series.years()[-1] == 2010
    assert abs(series.mean_rate() - 0.028) < 1e-6
    assert np.all((series.rates() >= 0) & (series.rates() <= 1))
    assert synthetic_series(seed=11).records == series.records


def test_caa_c_preset_has_no_mean_target():
    preset = dict(PRESETS["caa-c"])
    series = synthetic_series(start_year=2000, end_year=2009, seed=5, **preset)
    assert series.cohort == "Caa-C"
    assert len(series) == 10 and all(r.count == 80 for r in series.records)


def test_histogram_single_record():
    series = DefaultRateSeries(cohort="A", records=[DefaultRateRecord(year=2000, cohort="A", rate=0.05)])
    hist = histogram(series, 5)
    assert hist.total == 1
    assert hist.counts[-1] == 1


def test_histogram_includes_total_default_year():
    records = [DefaultRateRecord(year=2000 + k, cohort="Caa-C", rate=r)
               for k, r in enumerate([0.1, 0.2, 0.35, 1.0])]
    hist = histogram(DefaultRateSeries(cohort="Caa-C", records=records), 10)
    assert hist.edges[-1] == 1.0
    assert hist.counts[-1] == 1
    assert hist.total == 4


def test_histogram_of_evenly_spread_rates_is_flat():
    records = [DefaultRateRecord(year=1900 + k, cohort="A", rate=float(r))
               for k, r in enumerate(np.linspace(0.0, 0.3, 100))]
    hist = histogram(records, 10)
    assert hist.total == 100
    assert hist.counts.max() - hist.counts.min() <= 2
    assert list(hist.to_frame().columns) == ["bin_lo", "bin_hi", "count"]


def test_histogram_rejects_bad_input():
    for args in (([DefaultRateRecord(year=2000, cohort="A", rate=0.1)], 1), ([], 5)):
        try:
            histogram(*args)
        except DomainError:
            continue
        raise AssertionError(f"histogram{args} should be rejected")


def test_pmf_csv_format_and_round_trip():
    text = write_pmf_csv(binomial_pmf(2, 0.5))
    assert text.splitlines() == [
        "loss_count,loss_fraction,probability",
        "0,0,0.25",
        "1,0.5,0.5",
        "2,1,0.25",
    ]
    pmf = binomial_pmf(40, 0.13)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "pmf.csv"
        write_pmf_csv(pmf, path)
        back = read_pmf_csv(path)
    assert back.n == 40
    assert np.max(np.abs(back.mass - pmf.mass)) < 1e-9


def test_read_pmf_csv_needs_contiguous_counts():
    with tempfile.TemporaryDirectory() as tmp:
        path = write_text(tmp, "pmf.csv", "loss_count,probability\n0,0.5\n2,0.5\n")
        try:
            read_pmf_csv(path)
        except DomainError:
            return
    raise AssertionError("gaps in loss_count should be rejected")


def test_state_dump_layout():
    n = 11
    params = JungleParams(alpha=[-0.5] * n, beta={(0, 10): 0.6})
    samples = gibbs_sample(params, McmcConfig(chains=2, walkers=3, draws=7, burn_in=5, thin=1, seed=21))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "states.bin"
        record = write_state_dump(samples, path)
        assert record == math.ceil(n / 8) == 2
        assert path.stat().st_size == samples.size * record
        states = read_state_dump(path, n)
    assert np.array_equal(states, samples.states)


def test_samples_csv_losses_follow_the_portfolio():
    params = JungleParams(alpha=[-0.5] * 3, beta={(0, 1): 0.4})
    samples = gibbs_sample(params, McmcConfig(chains=2, walkers=4, draws=10, burn_in=5, thin=1, seed=5))

    unit = pd.read_csv(io.StringIO(write_samples_csv(samples)))
    assert list(unit.columns) == ["draw", "chain", "loss_count", "monetary_loss"]
    assert np.array_equal(unit["monetary_loss"].to_numpy(), unit["loss_count"].to_numpy(dtype=float))

    spec = PortfolioSpec(n=3, p=[0.3] * 3, exposure=[2.0, 1.0, 5.0])
    losses = losses_from_states(samples, spec)
    weighted = pd.read_csv(io.StringIO(write_samples_csv(samples, losses.losses)))
    assert np.allclose(weighted["monetary_loss"].to_numpy(), samples.states @ np.array([2.0, 1.0, 5.0]))


def test_state_dump_bit_order():
    class OneDraw:
        states = np.array([[1, 0, 0, 0, 0, 0, 0, 0, 0, 1]], dtype=np.uint8)

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "one.bin"
        write_state_dump(OneDraw(), path)
        assert path.read_bytes() == bytes([0b00000001, 0b00000010])


def test_loss_pmf_from_file_normalises():
    with tempfile.TemporaryDirectory() as tmp:
        path = write_text(tmp, "pmf.csv", "loss_count,loss_fraction,probability\n0,0,1\n1,1,3\n")
        pmf = read_pmf_csv(path)
    assert isinstance(pmf, LossPmf)
    assert np.allclose(pmf.mass, [0.25, 0.75], atol=1e-15)


def main():
    """Run all tests"""
    print("🧪 Data I/O tests")
    print("=" * 40)
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    failed = 0
    for name, fn in tests:
        try:
            fn()
            print(f"✅ {name}")
        except Exception as e:
            failed += 1
            print(f"❌ {name}: {e}")
    print(f"\n{len(tests) - failed}/{len(tests)} passed")
    return failed == 0


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
