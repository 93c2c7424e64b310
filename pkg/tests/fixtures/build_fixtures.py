"""Regenerate the checked-in fixtures: python tests/fixtures/build_fixtures.py

Rerun after changing prompt templates (the cassette is keyed on prompt text)
or report layout (goldens), then review the diff.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

from helpers import REFERENCE_QWK, LEVEL_CORRECT, LEVEL_TOTALS, panel_responder, synthetic_pool, reference_records  # noqa: E402

from aesgrade.agents import ExperimentContext, grade_multi, write_run_file  # noqa: E402
from aesgrade.corpus import EssayCollection, select_calibration, write_calibration, write_corpus  # noqa: E402
from aesgrade.llm_client import RecordingBackend, ScriptedBackend, record_cassette  # noqa: E402
from aesgrade.prompts import default_rubric  # noqa: E402
from aesgrade.report import collect, render  # noqa: E402

CONDITIONS = (("single", "zero"), ("single", "few"), ("multi", "zero"), ("multi", "few"))


def build_small_run() -> None:
    pool = synthetic_pool((4, 4, 4, 4, 4, 4), seed=7, prefix="S")
    test_cal = select_calibration(pool, 2, seed=11)
    test = EssayCollection(tuple(test_cal.records()), source="fixture")
    calib = select_calibration(pool, 2, seed=12, exclude=test)
    write_corpus(test, HERE / "essays12.jsonl")
    write_calibration(calib, HERE / "calibration12.jsonl")

    recorder = RecordingBackend(ScriptedBackend(panel_responder, {"temperature": 0.0}))
    ctx = ExperimentContext(default_rubric(), recorder, "few", calib)
    for essay in test:
        grade_multi(essay, ctx)
    record_cassette(recorder.exchanges, HERE / "cassette_multi_few.jsonl")


def build_reference_runs() -> None:
    for arch, shot in CONDITIONS:
        write_run_file(reference_records(arch, shot), HERE / f"reference_{arch}_{shot}.jsonl")
    rows = lambda cond: [{"level": lv + 1, "total": t, "correct": c}  # noqa: E731
                         for lv, (t, c) in enumerate(zip(LEVEL_TOTALS, LEVEL_CORRECT[cond]))]
    precomputed = {
        "schema_version": 1,
        "conditions": [
            {"architecture": "single", "shot_mode": shot, "qwk": REFERENCE_QWK[("single", shot)],
             "exact_match": None, "n": sum(LEVEL_TOTALS), "n_failed": 0, "per_level": rows(("single", shot))}
            for shot in ("zero", "few")
        ],
    }
    (HERE / "precomputed_single.json").write_text(json.dumps(precomputed, indent=2) + "\n", encoding="utf-8")
    reports = collect([HERE / f"reference_{a}_{s}.jsonl" for a, s in CONDITIONS])
    (HERE / "golden_report.md").write_text(render(reports, "markdown"), encoding="utf-8")
    (HERE / "golden_report.csv").write_text(render(reports, "csv"), encoding="utf-8")


if __name__ == "__main__":
    build_small_run()
    build_reference_runs()
    print("fixtures written to", HERE)
