"""Fixed-width run report and the per-depth topology table.

The report is a sequence of ``[section]`` blocks whose rows are
whitespace-separated columns, so ``parse_report`` can read it back.  Only
the first line carries a timestamp.
"""

from __future__ import annotations

import itertools
import json
import re
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

from mtsl.errors import ParseError
from mtsl.metrics import TaskMetric, delta_mtl, delta_sd

_ROW = re.compile(r"^depth (\d+): (.*)$")
_GROUP = re.compile(r"\[([^\[\]]*)\]")


# --- topology table -------------------------------------------------------------


def format_partition(partition: Sequence[Sequence[Sequence[str]]]) -> str:
    """One ``depth d: [A, B], [C]`` row per depth, depths counted from 1."""
    rows = []
    for d, groups in enumerate(partition, start=1):
        rows.append(f"depth {d}: " + ", ".join("[" + ", ".join(g) + "]" for g in groups))
    return "\n".join(rows)


def parse_partition(text: str) -> list[list[tuple[str, ...]]]:
    rows = []
    for lineno, line in enumerate(text.strip().splitlines(), start=1):
        m = _ROW.match(line.strip())
        if not m or int(m.group(1)) != len(rows) + 1:
            raise ParseError(f"bad topology row {line!r}", line=lineno)
        groups = [tuple(x.strip() for x in g.split(",") if x.strip()) for g in _GROUP.findall(m.group(2))]
        if not groups or any(not g for g in groups):
            raise ParseError(f"empty group in {line!r}", line=lineno)
        rows.append(groups)
    return rows


# --- metrics files ----------------------------------------------------------------


def metrics_to_json(metrics: Mapping[str, TaskMetric], parameter_count: int, flops: int) -> dict:
    return {
        "tasks": {t: {"value": m.value, "lower_is_better": m.lower_is_better} for t, m in metrics.items()},
        "parameter_count": parameter_count,
        "flops_per_sample": flops,
    }


def load_metrics(path) -> dict[str, TaskMetric]:
    """Per-task metrics from ``metrics.json`` or a run directory holding one."""
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.json"
    try:
        doc = json.loads(path.read_text())
        return {t: TaskMetric(t, float(v["value"]), bool(v["lower_is_better"])) for t, v in doc["tasks"].items()}
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc.msg}", offset=exc.pos) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed metrics document ({exc})") from None


# --- report -------------------------------------------------------------------------


def format_report(
    metrics: Mapping[str, TaskMetric],
    parameter_count: int,
    flops: int,
    partition,
    baseline: Mapping[str, TaskMetric] | None = None,
    timestamp: str | None = None,
) -> str:
    stamp = timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
    lines = [f"# mtsl run report, generated {stamp}", "", "[tasks]"]
    head = f"{'task':<12}{'metric':<10}{'value':>16}"
    if baseline is not None:
        head += f"{'baseline':>16}{'delta_pct':>12}"
    lines.append(head)
    for t, m in metrics.items():
        row = f"{t:<12}{'mse' if m.lower_is_better else 'accuracy':<10}{m.value:>16.8f}"
        if baseline is not None:
            b = baseline[t]
            row += f"{b.value:>16.8f}{delta_mtl([m], [b]):>12.4f}"
        lines.append(row)

    lines += ["", "[summary]", f"{'key':<20}{'value':>16}"]
    lines.append(f"{'parameter_count':<20}{parameter_count:>16d}")
    lines.append(f"{'flops_per_sample':<20}{flops:>16d}")
    if baseline is not None:
        lines.append(f"{'delta_mtl_pct':<20}{delta_mtl(list(metrics.values()), list(baseline.values())):>16.4f}")
        lines += ["", "[pairs]", f"{'pair':<20}{'delta_sd_pct':>16}"]
        for a, b in itertools.combinations(metrics, 2):
            v = delta_sd(list(metrics.values()), list(baseline.values()), (a, b))
            lines.append(f"{a + '+' + b:<20}{v:>16.4f}")

    lines += ["", "[topology]", format_partition(partition), ""]
    return "\n".join(lines)


def parse_report(text: str) -> dict[str, list]:
    """Sections of a report: header-less rows for tables, raw lines for topology."""
    sections: dict[str, list] = {}
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith("#") or not line.strip():
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
            continue
        if current is None:
            raise ParseError("row outside any section", line=lineno)
        sections[current].append(line if current == "topology" else line.split())
    for name, rows in sections.items():
        if name != "topology" and rows:
            header, body = rows[0], rows[1:]
            sections[name] = [dict(zip(header, r)) for r in body]
    return sections
