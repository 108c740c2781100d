import os

import pytest

from consent_audit.audit import Marked, Percent, Table
from consent_audit.render import ReportWriteError, fmt_number, from_jsonl, render_report, to_csv, to_jsonl, to_markdown
from consent_audit.stats import Marker


def sample():
    t = Table("bids_gdpr", "Ad bidding under GDPR", ["Persona", "Avg", "Std", "Pct"])
    t.rows = [
        ["Adult", Marked(0.25, Marker.UpBeyondStd), 0.6, Percent(93.75, 2)],
        ["Games", Marked(1.6e-5, Marker.Down), 0.0, Percent(None)],
        ["Health", None, None, None],
        ["Control", Marked(0.04), 0.11, Percent(50.0)],
    ]
    return t


def test_number_format():
    assert [fmt_number(x) for x in (None, 0, 0.0, 0.254, 1.6e-5, 12)] == ["--", "0", "0.00", "0.25", "1.6E-05", "12"]


def test_csv_glyphs():
    lines = to_csv(sample()).splitlines()
    assert lines[1] == "Adult,0.25^!,0.60,93.75%"
    assert lines[2] == "Games,1.6E-05v,0.00,--"
    assert lines[3] == "Health,--,--,--"
    assert lines[4] == "Control,0.04,0.11,50.0%"


def test_markdown_arrows():
    md = to_markdown(sample())
    assert "| Adult | 0.25 ⇑ | 0.60 | 93.75% |" in md


def test_jsonl_round_trip():
    table = sample()
    back = from_jsonl(to_jsonl(table))
    assert back.rows == table.rows and back.columns == table.columns
    assert to_jsonl(back) == to_jsonl(table)


def test_render_is_byte_deterministic(tmp_path):
    a = render_report([sample()], "csv", tmp_path / "a")
    b = render_report([sample()], "csv", tmp_path / "b")
    assert a[0].read_bytes() == b[0].read_bytes()
    assert a[0].name == "bids_gdpr.csv"


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        render_report([sample()], "xlsx", tmp_path)


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_destination(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    with pytest.raises(ReportWriteError, match="locked"):
        render_report([sample()], "csv", locked)


def test_destination_is_a_file(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportWriteError, match="file"):
        render_report([sample()], "csv", blocker)
