import datetime

import pytest

from kyoto_shift_bench.errors import UnknownLabelCode
from kyoto_shift_bench.schema import (
    FEATURE_NAMES,
    FeatureKind,
    LabelClass,
    YearMonth,
    default_treatments,
    label_from_code,
)


@pytest.mark.parametrize("code, cls", [(1, LabelClass.NORMAL), (-1, LabelClass.ANOMALY),
                                       (-2, LabelClass.ANOMALY), ("-2", LabelClass.ANOMALY)])
def test_label_mapping(code, cls):
    label = label_from_code(code)
    assert label.cls is cls
    assert label.raw_code == int(code)
    assert label.is_anomaly == (cls is LabelClass.ANOMALY)


@pytest.mark.parametrize("code", [7, 0, 2, "x", 1.5, None])
def test_unknown_label_codes_rejected(code):
    with pytest.raises(UnknownLabelCode):
        label_from_code(code)


def test_unknown_label_code_is_a_value_error():
    with pytest.raises(ValueError):
        label_from_code(7)


def test_year_month_order_and_text():
    months = [YearMonth(2008, 1), YearMonth(2007, 12), YearMonth(2007, 2)]
    assert sorted(months) == [YearMonth(2007, 2), YearMonth(2007, 12), YearMonth(2008, 1)]
    assert str(YearMonth(2006, 11)) == "2006-11"
    assert YearMonth.of(datetime.datetime(2010, 4, 30, 23, 59)) == YearMonth(2010, 4)
    with pytest.raises(ValueError):
        YearMonth(2010, 13)


def test_feature_taxonomy():
    assert len(FEATURE_NAMES) == 14
    table = default_treatments()
    kinds = [t.kind for t in table.values()]
    assert kinds.count(FeatureKind.CATEGORICAL) == 2
    assert kinds.count(FeatureKind.BINNED) == 3
    assert kinds.count(FeatureKind.PERCENTAGE) == 9
    assert {n for n, t in table.items() if t.kind is FeatureKind.BINNED} == {
        "duration", "src_bytes", "dst_bytes"
    }
    assert table["dst_host_count"].divisor == 100.0


def test_record_invariants(record_factory):
    record = record_factory()
    assert record.year == 2007
    assert record.year_month == YearMonth(2007, 3)
    assert record.features()[1] == "http"
    with pytest.raises(ValueError):
        record_factory(src_bytes=-1)
    with pytest.raises(ValueError):
        record_factory(same_srv_rate=1.2)
    with pytest.raises(ValueError):
        record_factory(duration=float("inf"))
    with pytest.raises(ValueError):
        record_factory(service="")


@pytest.mark.parametrize("year, ok", [(2005, False), (2006, True), (2015, True), (2016, False)])
def test_record_year_is_inside_the_calendar(record_factory, year, ok):
    timestamp = datetime.datetime(year, 6, 1)
    if ok:
        assert record_factory(timestamp=timestamp).year == year
    else:
        with pytest.raises(ValueError, match="2006..2015"):
            record_factory(timestamp=timestamp)
