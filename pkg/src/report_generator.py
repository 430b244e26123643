"""
Report writers: JSON records, flat CSV tables and an SVG chart rendered
from a Jinja2 template.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Union

import numpy as np
from jinja2 import Environment, FileSystemLoader

from src.errors import ConfigError
from src.metrics import MetricsReport

logger = logging.getLogger(__name__)

ROOT_DIR = Path(__file__).parent.parent
TEMPLATES_DIR = ROOT_DIR / "templates"
FORMATS = ("json", "csv", "svg")

CHART_WIDTH = 640
BAR_AREA_HEIGHT = 200
HIST_AREA_HEIGHT = 160
MARGIN = 40
HIST_BINS = 20

ABLATION_COLUMNS = ("value", "seed", "miou", "params", "macs")


def _fmt(value) -> str:
    """Full-precision decimal, empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ReportGenerator:
    """Writes a MetricsReport as json, csv or svg."""

    def __init__(self):
        self.env = Environment(
            loader=FileSystemLoader(str(TEMPLATES_DIR)),
            autoescape=True,
        )

    def _bars(self, report: MetricsReport) -> list[dict]:
        n = max(len(report.per_class_iou), 1)
        slot = (CHART_WIDTH - 2 * MARGIN) / n
        bars = []
        for c, iou in enumerate(report.per_class_iou):
            height = (iou or 0.0) * BAR_AREA_HEIGHT
            bars.append({
                "label": str(c),
                "value": "n/a" if iou is None else f"{iou:.3f}",
                "x": MARGIN + c * slot + slot * 0.1,
                "y": MARGIN + BAR_AREA_HEIGHT - height,
                "width": slot * 0.8,
                "height": height,
                "text_x": MARGIN + c * slot + slot / 2,
            })
        return bars

    def _histogram(self, report: MetricsReport, top: float) -> list[dict]:
        if report.latency is None or not report.latency.samples_ms:
            return []
        counts, edges = np.histogram(report.latency.samples_ms, bins=HIST_BINS)
        peak = max(int(counts.max()), 1)
        slot = (CHART_WIDTH - 2 * MARGIN) / len(counts)
        bins = []
        for i, count in enumerate(counts):
            height = count / peak * HIST_AREA_HEIGHT
            bins.append({
                "x": MARGIN + i * slot,
                "y": top + HIST_AREA_HEIGHT - height,
                "width": slot,
                "height": height,
                "title": f"{edges[i]:.2f}-{edges[i + 1]:.2f} ms: {int(count)}",
            })
        return bins

    def render_svg(self, report: MetricsReport) -> str:
        hist_top = MARGIN * 3 + BAR_AREA_HEIGHT
        histogram = self._histogram(report, hist_top)
        height = hist_top + (HIST_AREA_HEIGHT + MARGIN if histogram else 0)
        return self.env.get_template("report.svg").render(
            width=CHART_WIDTH,
            height=height,
            margin=MARGIN,
            bar_area=BAR_AREA_HEIGHT,
            bars=self._bars(report),
            miou=f"{report.miou:.4f}",
            histogram=histogram,
            hist_top=hist_top,
            hist_area=HIST_AREA_HEIGHT,
            latency=report.latency.to_dict() if report.latency is not None else None,
        )

    def write_csv(self, report: MetricsReport, path: Path):
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["class", "iou"])
            for c, iou in enumerate(report.per_class_iou):
                writer.writerow([c, _fmt(iou)])
            writer.writerow(["miou", _fmt(report.miou)])

    def emit(self, report: MetricsReport, fmt: str, path: Union[str, Path]) -> Path:
        if fmt not in FORMATS:
            raise ConfigError(f"unknown report format '{fmt}' (expected one of {', '.join(FORMATS)})")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "json":
            path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        elif fmt == "csv":
            self.write_csv(report, path)
        else:
            path.write_text(self.render_svg(report), encoding="utf-8")
        logger.info(f"Report: wrote {fmt} to {path}")
        return path


def emit_report(report: MetricsReport, fmt: str, path: Union[str, Path]) -> Path:
    return ReportGenerator().emit(report, fmt, path)


def write_json(record: dict, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    return path


def write_ablation_csv(rows: list[dict], path: Union[str, Path]) -> Path:
    """One row per (value, seed) run, then a `mean` row for every value run with several seeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    by_value: dict[str, list[dict]] = {}
    for row in rows:
        by_value.setdefault(str(row["value"]), []).append(row)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in ABLATION_COLUMNS})
        for value, group in by_value.items():
            if len(group) < 2:
                continue
            writer.writerow({
                "value": value,
                "seed": "mean",
                "miou": _fmt(float(np.mean([r["miou"] for r in group]))),
                "params": group[0]["params"],
                "macs": group[0]["macs"],
            })
    logger.info(f"Report: wrote ablation table ({len(rows)} runs) to {path}")
    return path
