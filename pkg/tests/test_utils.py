import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

import json

import pytest
import structlog

from src.errors import DatasetError
from src.utils import configure_logging, load_dataset_file


def test_load_dataset_file(tmp_path):
    path = tmp_path / "logic_small.jsonl"
    rows = [
        {"id": "a", "question": "1+1?", "choices": {"A": "2", "B": "3"}, "gold": "A"},
        {"id": "b", "question": "2+2?", "choices": {"A": "3", "B": "4", "C": "5"}, "gold": "B", "source": "x"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    dataset = load_dataset_file(path)
    assert dataset.name == "logic_small"
    assert [item.id for item in dataset] == ["a", "b"]


def test_load_dataset_file_missing(tmp_path):
    with pytest.raises(DatasetError, match="cannot read"):
        load_dataset_file(tmp_path / "absent.jsonl")


def test_load_dataset_file_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "question": "q", "choices": {"A": "x", "B": "y"}, "gold": "A"}\nnot json\n',
                    encoding="utf-8")
    with pytest.raises(DatasetError) as excinfo:
        load_dataset_file(path)
    assert excinfo.value.line == 2


@pytest.mark.parametrize("verbose, shown", [(False, False), (True, True)])
def test_configure_logging_levels(capsys, verbose, shown):
    configure_logging(verbose)
    log = structlog.get_logger("test")
    log.debug("debug event", item="q1")
    log.info("info event")
    err = capsys.readouterr().err
    assert "info event" in err
    assert ("debug event" in err) is shown
