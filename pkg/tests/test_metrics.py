import csv
import json

import pytest

from phenoauth.metrics import (PRIMITIVES, SESSION_COST, OpCounter, TimingRow, timing_report,
                               write_json, write_rows_csv, write_timing_csv)


def test_counter_tracks_counts_and_time():
    c = OpCounter()
    for _ in range(3):
        with c.track("H"):
            sum(range(1000))
    assert c.counts["H"] == 3 and c.seconds["H"] > 0
    assert c.snapshot() == {**dict.fromkeys(PRIMITIVES, 0), "H": 3}
    with pytest.raises(KeyError):
        with c.track("RSA"):
            pass


def test_counter_counts_on_exception():
    c = OpCounter()
    with pytest.raises(RuntimeError):
        with c.track("KDF"):
            raise RuntimeError
    assert c.counts["KDF"] == 1


def test_session_cost_match():
    c = OpCounter()
    for name, n in SESSION_COST.items():
        for _ in range(n):
            with c.track(name):
                pass
    assert c.matches_session_cost()
    with c.track("DPAN"):
        pass
    assert not c.matches_session_cost()


def test_timing_report_aggregates():
    a, b = OpCounter(), OpCounter()
    a.counts["H"], a.seconds["H"] = 2, 0.5
    b.counts["H"], b.seconds["H"] = 2, 1.5
    rows = {r.primitive: r for r in timing_report([a, b])}
    assert rows["H"].count == 4 and rows["H"].mean_s == pytest.approx(0.5)
    assert rows["DPUF"].mean_s == 0.0


def test_writers(tmp_path):
    write_timing_csv([TimingRow("H", 2, 1.0)], tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert rows == [{"primitive": "H", "count": "2", "mean_s": "0.500000000", "total_s": "1.000000000"}]
    write_rows_csv([{"a": 1, "b": True}], tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines() == ["a,b", "1,True"]
    write_rows_csv([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == ""
    write_json({"b": 1, "a": [1.5]}, tmp_path / "x.json")
    assert json.loads((tmp_path / "x.json").read_text()) == {"a": [1.5], "b": 1}
