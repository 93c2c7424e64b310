"""Render condition-level metrics as markdown, CSV or JSON tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .agents import RunFileError, read_run_file
from .corpus import SCORE_LEVELS
from .metrics import MetricsReport, compute_metrics, format_pct, improvement_delta, round_half_up

REPORT_SCHEMA_VERSION = 1
CONDITION_ORDER = (("single", "zero"), ("single", "few"), ("multi", "zero"), ("multi", "few"))
_ARCH_LABEL = {"single": "Single", "multi": "Multi"}
_SHOT_LABEL = {"zero": "Zero", "few": "Few"}


class ReportError(ValueError):
    pass


def model_label(arch: str, shot: str) -> str:
    return f"{_ARCH_LABEL[arch]}-Agent ({_SHOT_LABEL[shot]})"


def column_label(arch: str, shot: str) -> str:
    return f"{_ARCH_LABEL[arch]} ({_SHOT_LABEL[shot]})"


@dataclass(frozen=True)
class Delta:
    architecture: str
    qwk_zero: float | None
    qwk_few: float | None
    qwk_improvement: float | None
    exact_match_gain: float | None

    def to_dict(self) -> dict:
        return {"architecture": self.architecture, "qwk_zero": self.qwk_zero, "qwk_few": self.qwk_few,
                "qwk_improvement_pct": self.qwk_improvement, "exact_match_gain_pp": self.exact_match_gain}


def load_condition(path: str | Path) -> list[MetricsReport]:
    """Metrics for one input: a JSONL run file, or a JSON file of precomputed metrics."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ReportError(f"{path}: cannot read metrics JSON ({exc})") from exc
        if data.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ReportError(f"{path}: unsupported schema_version {data.get('schema_version')!r}")
        try:
            return [MetricsReport.from_dict(c) for c in data["conditions"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ReportError(f"{path}: malformed metrics entry ({exc})") from exc
    try:
        records = read_run_file(path)
    except RunFileError as exc:
        raise ReportError(str(exc)) from exc
    if not records:
        raise ReportError(f"{path}: run file is empty")
    conditions = {(r.architecture, r.shot_mode) for r in records}
    if len(conditions) != 1:
        raise ReportError(f"{path}: mixes conditions {sorted(conditions)}")
    arch, shot = conditions.pop()
    if (arch, shot) not in CONDITION_ORDER:
        raise ReportError(f"{path}: unknown condition {arch}/{shot}")
    return [compute_metrics(records, arch, shot)]


def collect(paths: Sequence[str | Path]) -> list[MetricsReport]:
    if not paths:
        raise ReportError("no input files")
    reports: dict[tuple[str, str], MetricsReport] = {}
    for p in paths:
        for rep in load_condition(p):
            if rep.condition in reports:
                raise ReportError(f"condition {model_label(*rep.condition)} given more than once")
            reports[rep.condition] = rep
    return [reports[c] for c in CONDITION_ORDER if c in reports]


def deltas(reports: Iterable[MetricsReport]) -> list[Delta]:
    by_cond = {r.condition: r for r in reports}
    out = []
    for arch in ("single", "multi"):
        zero, few = by_cond.get((arch, "zero")), by_cond.get((arch, "few"))
        if zero is None or few is None:
            continue
        qwk_imp = None
        if zero.qwk is not None and few.qwk is not None and zero.qwk != 0:
            qwk_imp = improvement_delta(zero.qwk, few.qwk)
        em_gain = None
        if zero.exact_match is not None and few.exact_match is not None:
            em_gain = float(round_half_up(few.exact_match - zero.exact_match, 2))
        out.append(Delta(arch, zero.qwk, few.qwk, qwk_imp, em_gain))
    return out


# --------------------------------------------------------------------------
# table construction (shared by markdown and CSV)
# --------------------------------------------------------------------------

def _fmt_qwk(r: MetricsReport) -> str:
    if r.qwk is None:
        return "n/a"
    return f"{round_half_up(r.qwk, 4)}" + (" (degenerate)" if r.qwk_degenerate else "")


def overall_table(reports: Sequence[MetricsReport]) -> list[list[str]]:
    rows = [["Model", "QWK", "Exact Match", "n", "Failed"]]
    for r in reports:
        rows.append([model_label(*r.condition), _fmt_qwk(r), format_pct(r.exact_match, 2), str(r.n),
                     str(r.n_failed)])
    return rows


def level_table(reports: Sequence[MetricsReport]) -> list[list[str]]:
    level_maps = [{row.level: row for row in r.per_level} for r in reports]
    rows = [["Score", "Total (n)"] + [column_label(*r.condition) for r in reports]]
    for lv in SCORE_LEVELS:
        totals = {m[lv].total for m in level_maps if lv in m}
        shared = len(totals) == 1
        line = [str(lv), str(totals.pop()) if shared else ("varies" if totals else "n/a")]
        for m in level_maps:
            row = m.get(lv)
            if row is None:
                line.append("n/a")
                continue
            count = str(row.correct) if shared else f"{row.correct}/{row.total}"
            line.append(f"{count} ({format_pct(row.accuracy, 1)})")
        rows.append(line)
    return rows


def delta_table(ds: Sequence[Delta]) -> list[list[str]]:
    rows = [["Architecture", "QWK (Zero)", "QWK (Few)", "QWK Improvement", "Exact Match Gain"]]
    for d in ds:
        rows.append([
            f"{_ARCH_LABEL[d.architecture]}-Agent",
            "n/a" if d.qwk_zero is None else str(round_half_up(d.qwk_zero, 4)),
            "n/a" if d.qwk_few is None else str(round_half_up(d.qwk_few, 4)),
            format_pct(d.qwk_improvement, 2),
            "n/a" if d.exact_match_gain is None else f"{round_half_up(d.exact_match_gain, 2):+} pp",
        ])
    return rows


def _markdown_table(rows: list[list[str]], align: Sequence[str]) -> str:
    sep = ["---:" if a == "r" else ":---" for a in align]
    lines = ["| " + " | ".join(rows[0]) + " |", "| " + " | ".join(sep) + " |"]
    lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
    return "\n".join(lines)


def render_markdown(reports: Sequence[MetricsReport]) -> str:
    ov = overall_table(reports)
    lv = level_table(reports)
    parts = [
        "## Overall agreement",
        _markdown_table(ov, ["l"] + ["r"] * (len(ov[0]) - 1)),
        "## Exact match by human score level",
        _markdown_table(lv, ["r"] * len(lv[0])),
    ]
    ds = deltas(reports)
    if ds:
        dt = delta_table(ds)
        parts += ["## Few-shot improvement", _markdown_table(dt, ["l"] + ["r"] * (len(dt[0]) - 1))]
    return "\n\n".join(parts) + "\n"


def render_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    tables = [overall_table(reports), level_table(reports)]
    ds = deltas(reports)
    if ds:
        tables.append(delta_table(ds))
    for i, table in enumerate(tables):
        if i:
            buf.write("\n")
        writer.writerows(table)
    return buf.getvalue()


def render_json(reports: Sequence[MetricsReport]) -> str:
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "conditions": [r.to_dict() for r in reports],
        "deltas": [d.to_dict() for d in deltas(reports)],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


RENDERERS = {"markdown": render_markdown, "csv": render_csv, "json": render_json}


def render(reports: Sequence[MetricsReport], fmt: str = "markdown") -> str:
    try:
        return RENDERERS[fmt](reports)
    except KeyError:
        raise ReportError(f"unknown format {fmt!r}; choose from {', '.join(RENDERERS)}") from None
