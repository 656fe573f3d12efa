"""
Metric records and plain-text summary tables
"""

import json
import logging
import os
from collections.abc import Iterator, Sequence
from contextlib import contextmanager

from pythonjsonlogger.json import JsonFormatter

from clockdistill.harness.schemas import AblationRow, EvalReport

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.txt"

metrics_logger = logging.getLogger("metrics")


@contextmanager
def attach_metrics_file(out_dir: str) -> Iterator[str]:
    """
    Routes the `metrics` logger into <out_dir>/metrics.jsonl for the duration
    of a run, one JSON record per line
    """
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, METRICS_FILE)
    handler = logging.FileHandler(path)
    handler.setFormatter(JsonFormatter("%(asctime)s %(message)s"))
    metrics_logger.addHandler(handler)
    metrics_logger.setLevel(logging.INFO)
    try:
        yield path
    finally:
        metrics_logger.removeHandler(handler)
        handler.close()


def _fmt(value: float | None) -> str:
    return "   -  " if value is None else f"{100 * value:6.2f}"


REPORT_HEADER = f"{'AP':>6} {'AP50':>6} {'AP75':>6} {'APs':>6} {'APm':>6} {'APl':>6}"


def report_cells(report: EvalReport) -> str:
    values = (
        report.ap,
        report.ap50,
        report.ap75,
        report.ap_small,
        report.ap_medium,
        report.ap_large,
    )
    return " ".join(_fmt(v) for v in values)


def format_report(title: str, report: EvalReport) -> str:
    lines = [title, REPORT_HEADER, report_cells(report)]
    lines.extend(f"  {name:<12} {_fmt(ap)}" for name, ap in report.per_class.items())
    return "\n".join(lines)


def _mean_ap(rows: Sequence[AblationRow]) -> float | None:
    values = [r.report.ap for r in rows if r.report.ap is not None]
    return sum(values) / len(values) if values else None


def format_ablation_table(title: str, rows: Sequence[AblationRow]) -> str:
    """
    One line per run in input order followed by the mean AP of every
    (label, depth) group across seeds
    """
    lines = [title, f"{'run':<14} {'enc':>3} {'dec':>3} {'seed':>4} {REPORT_HEADER} {'attn':>6}"]
    for row in rows:
        lines.append(
            f"{row.label:<14} {row.encoder_layers:>3} {row.decoder_layers:>3} "
            f"{row.seed:>4} {report_cells(row.report)} {_fmt(row.attention_mass)}"
        )
    groups: dict[tuple[str, int, int], list[AblationRow]] = {}
    for row in rows:
        groups.setdefault((row.label, row.encoder_layers, row.decoder_layers), []).append(
            row
        )
    lines.append("mean over seeds")
    for (label, enc, dec), members in groups.items():
        lines.append(f"{label:<14} {enc:>3} {dec:>3} {'':>4} {_fmt(_mean_ap(members))}")
    return "\n".join(lines)


def write_summary(out_dir: str, text: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, SUMMARY_FILE)
    with open(path, "w") as f:
        f.write(text + "\n")
    return path


def write_report(path: str, report: EvalReport) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(json.dumps(report.model_dump(), indent=2))
    return path
