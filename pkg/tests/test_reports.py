import json
import os

import numpy as np
import pytest
import runez

from prealign import __version__, MissingMetricsError
from prealign.reports import (
    load_metrics,
    MetricsLog,
    read_table,
    represented_value,
    similarity_svg,
    SoftLock,
    SoftLockException,
    TabularReport,
    write_json,
    write_table,
)


def test_values():
    assert represented_value(None) == ""
    assert represented_value(True) == "true"
    assert represented_value(0.1) == "0.1"
    assert represented_value(1 / 3) == "0.3333333333333333"
    assert represented_value(5) == "5"
    assert represented_value("dpa") == "dpa"


def test_tabular():
    report = TabularReport("variant,value")
    report.add_row(variant="dpa", value=0.5)
    report.add_row(variant="baseline_vit", value=None, ignored=1)
    assert str(report) == "report with 2 rows"
    assert report.represented("csv") == "variant,value\ndpa,0.5\nbaseline_vit,\n"
    assert report.represented("tsv") == "variant\tvalue\ndpa\t0.5\nbaseline_vit\t\n"
    assert json.loads(report.represented("json")) == [dict(variant="dpa", value=0.5), dict(variant="baseline_vit", value=None)]

    table = report.represented()
    assert "baseline_vit" in table
    assert "variant" in table


def test_files(temp_folder):
    write_table("a/gap.csv", "layer,gap", [dict(layer=0, gap=0.25), dict(layer=1, gap=0.125)], "0123")
    assert list(runez.readlines("a/gap.csv")) == [
        "layer,gap,config_hash,tool_version",
        f"0,0.25,0123,{__version__}",
        f"1,0.125,0123,{__version__}",
    ]
    assert read_table("a/gap.csv")[1] == dict(layer="1", gap="0.125", config_hash="0123", tool_version=__version__)

    # Cells with delimiters are quoted, and read back intact
    write_table("a/notes.csv", "name,note", [dict(name="dpa", note='a, "b"')], "0123")
    assert list(runez.readlines("a/notes.csv"))[1] == f'dpa,"a, ""b""",0123,{__version__}'
    assert read_table("a/notes.csv") == [dict(name="dpa", note='a, "b"', config_hash="0123", tool_version=__version__)]

    write_json("a/gap.json", dict(mean=0.5), "0123")
    assert runez.read_json("a/gap.json") == dict(mean=0.5, provenance=dict(config_hash="0123", tool_version=__version__))
    first = list(runez.readlines("a/gap.json"))
    write_json("a/gap.json", dict(mean=0.5), "0123")
    assert list(runez.readlines("a/gap.json")) == first


def test_metrics_log(temp_folder):
    with pytest.raises(MissingMetricsError):
        load_metrics("run")

    log = MetricsLog("run")
    assert log.rows() == []
    log.record("dpa", 0, "stage1", dict(initial_loss=4.0, final_loss=3.5), "0123", checkpoint_hash="abcd")
    log.record("dpa", 0, "stage2", dict(acc_text=0.5), "0123")
    rows = load_metrics("run")
    assert [(r["stage"], r["metric"], r["value"]) for r in rows] == [
        ("stage1", "final_loss", "3.5"),
        ("stage1", "initial_loss", "4.0"),
        ("stage2", "acc_text", "0.5"),
    ]
    assert rows[0]["checkpoint_hash"] == "abcd"
    assert rows[2]["checkpoint_hash"] == ""
    assert rows[0]["tool_version"] == __version__
    first = list(runez.readlines(log.path))

    # Recording the same stage again replaces its rows
    log.record("dpa", 0, "stage1", dict(initial_loss=4.0, final_loss=3.0), "0123", checkpoint_hash="abcd")
    rows = load_metrics("run")
    assert len(rows) == 3
    assert [r["value"] for r in rows if r["stage"] == "stage1"] == ["3.0", "4.0"]
    assert not os.path.exists("run/.metrics.lock")

    log.record("dpa", 0, "stage1", dict(initial_loss=4.0, final_loss=3.5), "0123", checkpoint_hash="abcd")
    assert sorted(runez.readlines(log.path)) == sorted(first)

    runez.write("empty/metrics.csv", "", logger=False)
    with pytest.raises(MissingMetricsError):
        load_metrics("empty")


def test_lock(temp_folder):
    lock_path = "run/.metrics.lock"
    with SoftLock(lock_path, give_up=600) as lock:
        assert str(lock) == "lock run/.metrics.lock"
        assert os.path.exists(lock_path)
        with pytest.raises(SoftLockException) as e:
            # Try to grab same lock a seconds time, give up after 1 second
            with SoftLock(lock_path, give_up=1, invalid=600):
                pass

        assert "giving up" in str(e)

    assert not os.path.exists(lock_path)  # Check that lock was released

    # Check that lock detects bogus (or dead) PID
    runez.write(lock_path, "0\nbar\n")
    with SoftLock(lock_path, give_up=600):
        lines = list(runez.readlines(lock_path))
        assert lines[0] == str(os.getpid())  # Lock file replaced with correct stuff

    assert not os.path.exists(lock_path)  # Lock released


def test_svg():
    m = np.array([[1.0, 0.5], [0.5, 0.0]])
    svg = similarity_svg(m, "dpa target_lm visual", "0123", cell=10)
    lines = svg.splitlines()
    assert lines[0].startswith('<svg xmlns="http://www.w3.org/2000/svg" width="20" height="30"')
    assert lines[1] == f"<!-- prealign {__version__} config 0123 -->"
    assert ">dpa target_lm visual</text>" in lines[2]
    assert 'x="0" y="10" width="10" height="10" fill="rgb(255,255,255)"' in lines[3]
    assert 'fill="rgb(128,128,128)"' in lines[4]
    assert 'fill="rgb(0,0,0)"' in lines[6]
    assert lines[-1] == "</svg>"
    assert similarity_svg(m, "dpa target_lm visual", "0123", cell=10) == svg
