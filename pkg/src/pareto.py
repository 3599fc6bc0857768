"""Accuracy-vs-cost Pareto frontier over pipeline configurations.

Dominance is two-dimensional (higher accuracy, lower median cost).  Latency
travels with each point as the plot colour but never decides dominance.
"""
import csv
from collections import defaultdict
from itertools import groupby
from pathlib import Path
from typing import Iterable, Sequence, Union

import structlog
from pydantic import Field, ValidationError

from src.core import FrozenModel
from src.errors import ConfigError

logger = structlog.get_logger(__name__)

FRONTIER_COLUMNS = ["dataset", "label", "regime", "accuracy", "median_cost", "median_latency"]
PLOT_COLUMNS = ["dataset", "label", "regime", "x", "y", "color", "on_frontier"]


class ConfigPoint(FrozenModel):
    label: str
    accuracy: float = Field(ge=0, le=100)
    median_cost: float = Field(ge=0)
    median_latency: float = Field(default=0.0, ge=0)
    dataset: str = ""
    regime: str = ""


def dominates(a: ConfigPoint, b: ConfigPoint) -> bool:
    return (
        a.accuracy >= b.accuracy
        and a.median_cost <= b.median_cost
        and (a.accuracy > b.accuracy or a.median_cost < b.median_cost)
    )


def frontier(points: Sequence[ConfigPoint]) -> list[ConfigPoint]:
    """Non-dominated points in ascending cost; exact ties are all kept.

    One sweep over the points sorted by cost: a cost level contributes its
    most accurate points only if they beat everything cheaper.
    """
    if not points:
        raise ValueError("frontier of an empty point set")
    ordered = sorted(points, key=lambda p: (p.median_cost, -p.accuracy, p.label, p.regime))
    kept: list[ConfigPoint] = []
    best = float("-inf")
    for _, level in groupby(ordered, key=lambda p: p.median_cost):
        level = list(level)
        top = level[0].accuracy
        if top > best:
            kept.extend(p for p in level if p.accuracy == top)
            best = top
    return kept


def frontiers_by_dataset(points: Iterable[ConfigPoint]) -> dict[str, list[ConfigPoint]]:
    """One frontier per benchmark; points without a dataset share the '' key."""
    groups: dict[str, list[ConfigPoint]] = defaultdict(list)
    for point in points:
        groups[point.dataset].append(point)
    return {dataset: frontier(group) for dataset, group in sorted(groups.items())}


def read_config_points(path: Union[str, Path]) -> list[ConfigPoint]:
    """Read the configs CSV written by ``report``.

    Rows without a median cost (no usage recorded) cannot be placed and are
    skipped.
    """
    path = Path(path)
    points = []
    try:
        f = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    with f:
        reader = csv.DictReader(f)
        missing = {"label", "accuracy", "median_cost"} - set(reader.fieldnames or [])
        if missing:
            raise ConfigError(f"{path}: missing columns {sorted(missing)}")
        for line_no, row in enumerate(reader, start=2):
            if not row.get("median_cost"):
                logger.warning("skipping configuration without cost", label=row.get("label"), line=line_no)
                continue
            try:
                points.append(
                    ConfigPoint(
                        label=row["label"],
                        accuracy=float(row["accuracy"]),
                        median_cost=float(row["median_cost"]),
                        median_latency=float(row.get("median_latency") or 0.0),
                        dataset=row.get("dataset") or "",
                        regime=row.get("regime") or "",
                    )
                )
            except (ValueError, ValidationError) as exc:
                raise ConfigError(f"{path}: line {line_no}: {exc}") from exc
    return points


def write_frontier_csv(path: Union[str, Path], points: Iterable[ConfigPoint]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=FRONTIER_COLUMNS)
        writer.writeheader()
        for p in points:
            writer.writerow({col: getattr(p, col) for col in FRONTIER_COLUMNS})
    return path


def write_plot_data_csv(
    path: Union[str, Path],
    points: Iterable[ConfigPoint],
    on_frontier: Iterable[ConfigPoint],
) -> Path:
    """x = cost, y = accuracy, color = latency, for any plotting tool."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    marked = set(on_frontier)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=PLOT_COLUMNS)
        writer.writeheader()
        for p in points:
            writer.writerow(
                {
                    "dataset": p.dataset,
                    "label": p.label,
                    "regime": p.regime,
                    "x": p.median_cost,
                    "y": p.accuracy,
                    "color": p.median_latency,
                    "on_frontier": int(p in marked),
                }
            )
    return path
