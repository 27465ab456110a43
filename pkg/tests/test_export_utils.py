import json
import math

import numpy as np
import pandas as pd
import pytest

from src.export_utils import ExportManager, read_trace
from src.orbits import generate_orbit


def test_csv_dialect(tmp_path):
    manager = ExportManager(tmp_path)
    path = manager.export_columns("plot.csv", {"n": [1, 2], "value": [0.1, 1.0 / 3.0]})
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw.decode().splitlines() == ["n,value", "1,0.10000000000000001", "2,0.33333333333333331"]
    assert manager.written == [path]


def test_json_is_deterministic_and_strict(tmp_path):
    manager = ExportManager(tmp_path)
    data = {"b": np.float64(math.nan), "a": np.arange(3), "flag": np.bool_(True), "keys": {1: 2.5}}
    path = manager.export_to_json("summary.json", data)
    text = path.read_text()
    assert json.loads(text) == {"a": [0, 1, 2], "b": None, "flag": True, "keys": {"1": 2.5}}
    assert text.index('"a"') < text.index('"b"')
    assert manager.export_to_json("summary.json", data).read_text() == text


def test_text_table(tmp_path):
    path = ExportManager(tmp_path).export_to_text("table.txt", pd.DataFrame({"k": [1, 10]}), "title")
    assert path.read_text().startswith("title\n\n")


def test_writes_leave_no_temporary_files(tmp_path):
    manager = ExportManager(tmp_path / "nested" / "dir")
    manager.export_columns("a.csv", {"x": [1.0]})
    assert sorted(p.name for p in (tmp_path / "nested" / "dir").iterdir()) == ["a.csv"]


def test_trace_round_trip(tmp_path, intermittent):
    trace = generate_orbit(intermittent, 0.3, 200, delta=0.1)
    path = ExportManager(tmp_path).export_trace("trace.csv", trace)
    assert pd.read_csv(path).columns.tolist() == ["j", "x_j", "a_j", "r_j"]
    loaded = read_trace(path, delta=0.1)
    assert np.array_equal(loaded.a, trace.a)
    assert np.array_equal(loaded.r, trace.r)
    assert np.array_equal(loaded.x[:-1], trace.x[:-1])


def test_read_trace_rejects_malformed_files(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("j,x_j,a_j\n0,0.1,0.2\n")
    with pytest.raises(ValueError, match="missing trace columns"):
        read_trace(path, delta=0.1)
