import collections
import logging
import math

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from kyoto_shift_bench import ingest
from kyoto_shift_bench.config import SchemaDescriptor, SyntheticConfig
from kyoto_shift_bench.errors import MalformedDataset
from kyoto_shift_bench.ingest import (
    format_rows,
    generate_synthetic,
    read_dataset,
    relabel,
    write_dataset,
)
from kyoto_shift_bench.schema import (
    ANOMALY,
    CATEGORICAL_FEATURES,
    FEATURE_NAMES,
    FIRST_YEAR,
    LAST_YEAR,
    RATE_FEATURES,
)


def _write(tmp_path, records, schema, bad_lines=()):
    text = format_rows(records, schema)
    lines = text.splitlines()
    for i in bad_lines:
        lines[i] = lines[i].split(schema.delimiter, 3)[0] + schema.delimiter + "truncated"
    path = tmp_path / "data.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_read_two_rows(tmp_path, schema, record_factory):
    records = [record_factory(), record_factory(service="dns", label=ANOMALY)]
    path = _write(tmp_path, records, schema)
    result = read_dataset(path, schema)
    assert result.records == records
    assert result.malformed == []
    assert result.n_rows == 2


def test_one_bad_row_in_ten_is_skipped(tmp_path, schema, record_factory, caplog):
    records = [record_factory(src_bytes=i) for i in range(10)]
    path = _write(tmp_path, records, schema, bad_lines=[4])
    with caplog.at_level(logging.WARNING, logger="kyoto_shift_bench"):
        result = read_dataset(path, schema)
    assert len(result) == 9
    assert [m.line_no for m in result.malformed] == [5]
    assert "skipped 1 malformed row" in caplog.text


def test_five_bad_rows_in_ten_fail(tmp_path, schema, record_factory):
    records = [record_factory(src_bytes=i) for i in range(10)]
    path = _write(tmp_path, records, schema, bad_lines=[0, 2, 4, 6, 8])
    with pytest.raises(MalformedDataset, match="5 of 10 rows"):
        read_dataset(path, schema)


def test_tolerance_scales_with_file_size(tmp_path, schema, record_factory):
    records = [record_factory(src_bytes=i) for i in range(300)]
    path = _write(tmp_path, records, schema, bad_lines=[1, 2, 3])
    assert len(read_dataset(path, schema)) == 297
    path = _write(tmp_path, records, schema, bad_lines=[1, 2, 3, 4])
    with pytest.raises(MalformedDataset):
        read_dataset(path, schema)


def test_bad_label_code_counts_as_malformed(tmp_path, schema, record_factory):
    lines = format_rows([record_factory(src_bytes=i) for i in range(5)], schema).splitlines()
    cells = lines[2].split("\t")
    cells[schema.column_of("label")] = "7"
    lines[2] = "\t".join(cells)
    path = tmp_path / "codes.txt"
    path.write_text("\n".join(lines) + "\n")
    result = read_dataset(path, schema)
    assert len(result) == 4
    assert "7" in result.malformed[0].reason


def test_custom_layout_with_header(tmp_path, record_factory):
    roles = ["label", "timestamp", *reversed(FEATURE_NAMES)]
    schema = SchemaDescriptor(column_roles=roles, delimiter=",", has_header=True)
    records = [record_factory(), record_factory(flag="REJ")]
    path = write_dataset(records, tmp_path / "custom.csv", schema)
    assert path.read_text().splitlines()[0].startswith("label,timestamp,flag")
    assert read_dataset(path, schema).records == records


def test_synthetic_counts():
    config = SyntheticConfig(
        n_years=2, months_per_year=1, normals_per_month=100,
        anomaly_ratio_per_year=[0.5, 0.5], swap_year=1,
    )
    records = generate_synthetic(config)
    labels = collections.Counter((r.year, r.label.is_anomaly) for r in records)
    assert labels == {(2006, False): 100, (2006, True): 100,
                      (2007, False): 100, (2007, True): 100}
    assert {r.year_month.month for r in records} == {1}


def test_synthetic_anomaly_ratio_within_one_record(corpus, synth_config):
    for year, ratio in zip(synth_config.years, synth_config.anomaly_ratio_per_year):
        rows = [r for r in corpus if r.year == year]
        anomalies = sum(r.label.is_anomaly for r in rows)
        assert abs(anomalies - ratio * len(rows)) <= 1


def test_synthetic_is_deterministic_and_round_trips(tmp_path, schema, synth_config, corpus):
    again = generate_synthetic(synth_config)
    assert format_rows(again, schema) == format_rows(corpus, schema)
    path = write_dataset(corpus, tmp_path / "synth.txt", schema)
    reread = read_dataset(path, schema)
    assert reread.records == corpus
    assert write_dataset(reread.records, tmp_path / "again.txt", schema).read_bytes() == \
        path.read_bytes()


def test_synthetic_is_chronological_within_months(corpus):
    stamps = [r.timestamp for r in corpus]
    assert stamps == sorted(stamps)


def test_no_drift_keeps_normals_identically_distributed():
    config = SyntheticConfig(
        n_years=2, months_per_year=1, normals_per_month=10_000,
        anomaly_ratio_per_year=[0.1, 0.1], drift_rate=0.0, swap_year=2, seed=11,
    )
    records = [r for r in generate_synthetic(config) if not r.label.is_anomaly]
    for feature in ("service", "flag"):
        table = collections.Counter((r.year, getattr(r, feature)) for r in records)
        values = sorted({v for _, v in table})
        observed = np.array([[table[(y, v)] for v in values] for y in (2006, 2007)])
        _, p, _, _ = chi2_contingency(observed)
        assert p > 0.01


def test_drift_moves_the_service_mix():
    config = SyntheticConfig(
        n_years=3, months_per_year=1, normals_per_month=2000,
        anomaly_ratio_per_year=[0.1, 0.1, 0.1], drift_rate=0.5, swap_year=3,
    )
    records = [r for r in generate_synthetic(config) if not r.label.is_anomaly]
    share = [np.mean([r.service == "http" for r in records if r.year == y])
             for y in config.years]
    assert share[0] > share[1] > share[2]


def test_relabel_keeps_features(record_factory):
    anomaly = record_factory(label=ANOMALY)
    normal = relabel(anomaly, 1)
    assert not normal.label.is_anomaly
    assert normal.features() == anomaly.features()
    assert normal.timestamp == anomaly.timestamp


_FUZZ_CELLS = ["", "-1", "-0.5", "0", "0.5", "1", "1.0", "1.5", "7", "2", "-2", "1e3",
               "nan", "inf", "-inf", "abc", " dns ", "2007-03-04T05:06:07", "2019-01-01",
               "2007-13-01", "2010-06-30 12:00:00"]


def _check_record(record):
    for name in ("duration", "src_bytes", "dst_bytes", "count", "dst_host_count",
                 "dst_host_srv_count"):
        value = getattr(record, name)
        assert math.isfinite(value) and value >= 0, name
    for name in ("src_bytes", "dst_bytes", "count", "dst_host_count", "dst_host_srv_count"):
        assert isinstance(getattr(record, name), int), name
    for name in RATE_FEATURES:
        assert 0.0 <= getattr(record, name) <= 1.0, name
    for name in CATEGORICAL_FEATURES:
        value = getattr(record, name)
        assert value and value == value.strip() and "\t" not in value, name
    assert FIRST_YEAR <= record.year <= LAST_YEAR
    assert record.label.raw_code in (1, -1, -2)
    assert record.label.is_anomaly == (record.label.raw_code != 1)


def test_fuzzed_rows_yield_only_valid_records(tmp_path, record_factory):
    schema = SchemaDescriptor(max_malformed_fraction=0.99)
    rng = np.random.default_rng(2024)
    lines = format_rows(
        [record_factory(src_bytes=i, same_srv_rate=i / 500) for i in range(500)], schema
    ).splitlines()
    fuzzed = []
    for line in lines:
        cells = line.split("\t")
        for _ in range(int(rng.integers(1, 4))):
            action = rng.random()
            if action < 0.05:
                cells.append("extra")
            elif action < 0.1:
                cells.pop(int(rng.integers(len(cells))))
            else:
                column = int(rng.integers(len(cells)))
                cells[column] = _FUZZ_CELLS[int(rng.integers(len(_FUZZ_CELLS)))]
        fuzzed.append("\t".join(cells))
    path = tmp_path / "fuzzed.txt"
    path.write_text("\n".join(fuzzed) + "\n")

    result = read_dataset(path, schema)
    assert len(result.records) + len(result.malformed) == result.n_rows
    assert result.records and result.malformed
    line_nos = [m.line_no for m in result.malformed]
    assert len(set(line_nos)) == len(line_nos)
    for record in result.records:
        _check_record(record)
    assert all(m.reason for m in result.malformed)


def test_parser_bugs_are_not_swallowed(tmp_path, schema, record_factory, monkeypatch):
    path = _write(tmp_path, [record_factory()], schema)

    def broken(cells, schema):
        raise KeyError("bug")

    monkeypatch.setattr(ingest, "_parse_row", broken)
    with pytest.raises(KeyError):
        read_dataset(path, schema)
