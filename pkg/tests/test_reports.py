import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

import csv
from decimal import Decimal

from src.core import DEFAULT_PRICE_SHEET, Regime
from src.pareto import frontier, read_config_points
from src.reports import MARKDOWN_NAME, Table, build_report, write_report
from tests.factories import make_trace


def _traces():
    traces = []
    for i in range(4):
        traces.append(make_trace("A" if i else "B", label="A", regime=Regime.BASELINE, task_id=f"q{i}"))
        traces.append(make_trace("B", "A", "A", label="ABC", task_id=f"q{i}"))
        traces.append(make_trace("B", "B", "B", label="ABC", regime=Regime.SIMPLE, task_id=f"q{i}"))
    return traces


def test_table_csv_and_markdown():
    table = Table("t", "A table", ["name", "rate", "cost", "ratio"])
    table.rows.append(["AAA", Decimal("91.63"), None, 3.0])
    assert table.to_csv() == "name,rate,cost,ratio\nAAA,91.63,,3.000\n"
    markdown = table.to_markdown()
    assert markdown.startswith("## A table")
    assert "| AAA | 91.63 | n/a | 3.000 |" in markdown


def test_empty_table_markdown():
    assert "_no data_" in Table("t", "Empty", ["x"]).to_markdown()


def test_build_report_tables():
    tables = {t.name: t for t in build_report(_traces(), DEFAULT_PRICE_SHEET, {"toy": 4})}
    assert set(tables) == {
        "baseline", "configs", "regime_delta", "planner_errors", "repair_harm",
        "origins", "cost_by_model", "cost_by_run", "overhead", "casting",
    }
    assert tables["baseline"].rows == [["toy", "A", Decimal("75.00"), 4]]
    assert tables["regime_delta"].rows == [["toy", "ABC", Decimal("0.00"), Decimal("100.00"), Decimal("100.00")]]
    (planner,) = tables["planner_errors"].rows
    assert planner[0] == "A" and planner[2:] == [8, 8, Decimal("100.00")]
    overhead = tables["overhead"].rows
    assert {(row[1], row[2], row[3]) for row in overhead} == {("ABC", "accountable", "A"), ("ABC", "simple", "A")}


def test_write_report_feeds_pareto(tmp_path):
    path = write_report(tmp_path / "report", build_report(_traces(), DEFAULT_PRICE_SHEET, {"toy": 4}))
    assert path.name == MARKDOWN_NAME
    assert "# Pipeline report" in path.read_text(encoding="utf-8")

    with open(tmp_path / "report" / "baseline.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["accuracy"] == "75.00"

    points = read_config_points(tmp_path / "report" / "configs.csv")
    assert {(p.label, p.regime) for p in points} == {("A", "baseline"), ("ABC", "accountable"), ("ABC", "simple")}
    # the accountable pipeline is the most accurate and is never dominated
    assert ("ABC", "accountable") in {(p.label, p.regime) for p in frontier(points)}
