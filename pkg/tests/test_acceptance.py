"""One test per acceptance criterion. Each prints a PASS/FAIL line, repeated in
the terminal summary under "acceptance criteria"."""

import contextlib
import itertools
import json
import random
import time
from pathlib import Path

import numpy as np
import pytest

from aesgrade.agents import (
    ExperimentContext,
    build_context,
    enforce_guardrails,
    format_reminder,
    grade_multi,
    grade_single,
    read_run_file,
    run_experiment,
    strip_volatile,
)
from aesgrade.config import load_config
from aesgrade.corpus import (
    SCORE_LEVELS,
    EssayCollection,
    EssayRecord,
    largest_remainder_allocation,
    load_corpus,
    select_calibration,
    stratified_sample,
)
from aesgrade.llm_client import CompletionExchange, ReplayBackend, fingerprint, record_cassette
from aesgrade.metrics import (
    ConfusionMatrix,
    compute_metrics,
    format_pct,
    improvement_delta,
    qwk,
    qwk_detail,
)
from aesgrade.prompts import SPECIALISTS, build_single_prompt, build_specialist_prompt, default_rubric
from aesgrade.report import collect, render

from conftest import ACCEPTANCE_LINES
from helpers import (
    REFERENCE_EXACT,
    REFERENCE_QWK,
    LEVEL_CORRECT,
    LEVEL_TOTALS,
    brute_force_allocation,
    reply,
    rule_oracle,
)

FIX = Path(__file__).parent / "fixtures"
CONDITIONS = (("single", "zero"), ("single", "few"), ("multi", "zero"), ("multi", "few"))


@contextlib.contextmanager
def criterion(number: int, title: str, budget: float | None = None):
    start = time.perf_counter()
    ok = False
    try:
        yield
        elapsed = time.perf_counter() - start
        if budget is not None:
            assert elapsed < budget, f"took {elapsed:.2f}s, budget {budget}s"
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        timing = f" ({elapsed:.2f}s" + (f" < {budget}s)" if budget else ")")
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}{timing}"
        ACCEPTANCE_LINES.append(line)
        print(line)


def test_criterion_1_guardrail_oracle():
    with criterion(1, "guardrails match brute-force oracle over 1296 tuples", budget=1.0):
        n = 0
        for *specs, chair in itertools.product(SCORE_LEVELS, repeat=4):
            d = enforce_guardrails(specs, chair)
            assert (d.final_score, str(d.rule_fired)) == rule_oracle(specs, chair), (specs, chair)
            if 1 in specs:
                assert d.final_score == 1
            elif 2 in specs:
                assert d.final_score <= 3
            n += 1
        assert n == 1296


def _pair_expansion_qwk(counts) -> float:
    h = np.repeat(np.repeat(np.arange(6), 6), counts.ravel()).astype(float)
    p = np.repeat(np.tile(np.arange(6), 6), counts.ravel()).astype(float)
    return 1.0 - np.mean((h - p) ** 2) / np.mean((h[:, None] - p[None, :]) ** 2)


def test_criterion_2_qwk_oracle():
    with criterion(2, "QWK agrees with pair-expansion oracle on 1000 matrices (1e-9)", budget=10.0):
        rng = np.random.default_rng(2024)
        checked = 0
        while checked < 1000:
            counts = rng.integers(0, 15, size=(6, 6)) * (rng.random((6, 6)) < 0.5)
            if counts.sum() == 0:
                continue
            value, degenerate = qwk_detail(ConfusionMatrix(counts))
            if degenerate:
                continue
            assert abs(value - _pair_expansion_qwk(counts)) <= 1e-9
            checked += 1
        for _ in range(20):
            diag = rng.integers(1, 30, size=6)
            assert qwk(ConfusionMatrix(np.diag(diag))) == 1.0
        anti = np.zeros((6, 6), dtype=int)
        anti[1, 2] = anti[2, 1] = 5
        assert qwk(ConfusionMatrix(anti)) == pytest.approx(-1.0, abs=1e-12)


def test_criterion_3_table_reproduction():
    with criterion(3, "exact-match column, per-level accuracy and improvement deltas reproduced"):
        for arch, shot in CONDITIONS:
            records = read_run_file(FIX / f"reference_{arch}_{shot}.jsonl")
            rep = compute_metrics(records, arch, shot)
            assert f"{rep.exact_match:.2f}" == f"{REFERENCE_EXACT[(arch, shot)]:.2f}", (arch, shot)
            assert [r.total for r in rep.per_level] == list(LEVEL_TOTALS)
            for row, total, hits in zip(rep.per_level, LEVEL_TOTALS, LEVEL_CORRECT[(arch, shot)]):
                assert row.correct == hits
                assert format_pct(row.accuracy, 1) == f"{hits / total * 100:.1f}%"
        multi_few = compute_metrics(read_run_file(FIX / "reference_multi_few.jsonl"), "multi", "few")
        assert format_pct(multi_few.per_level[0].accuracy, 1) == "73.3%"
        single = improvement_delta(REFERENCE_QWK[("single", "zero")], REFERENCE_QWK[("single", "few")])
        multi = improvement_delta(REFERENCE_QWK[("multi", "zero")], REFERENCE_QWK[("multi", "few")])
        assert abs(single - 26.5) <= 0.05 and abs(multi - 25.96) <= 0.05


def _random_pool(rng: random.Random, low: int, high: int, tag: str) -> EssayCollection:
    records = []
    for level in SCORE_LEVELS:
        for i in range(rng.randint(low, high)):
            records.append(EssayRecord(f"{tag}-{level}-{i}", "P", f"essay {level} {i}", level))
    rng.shuffle(records)
    return EssayCollection(tuple(records))


def test_criterion_4_sampling_properties():
    with criterion(4, "allocation oracle on 100 pools, seed determinism, disjoint calibration on 500 pools",
                   budget=5.0):
        rng = random.Random(44)
        for i in range(100):
            pool = _random_pool(rng, 0, 80, f"a{i}")
            if len(pool) == 0:
                continue
            n = rng.randint(1, len(pool))
            hist = pool.histogram()
            assert largest_remainder_allocation(hist, n) == brute_force_allocation(hist, n)
            seed = rng.randint(0, 10**6)
            first = stratified_sample(pool, n, seed)
            assert first.histogram() == brute_force_allocation(hist, n)
            assert [r.essay_id for r in first] == [r.essay_id for r in stratified_sample(pool, n, seed)]
        for i in range(500):
            pool = _random_pool(rng, 3, 12, f"c{i}")
            test = stratified_sample(pool, len(pool) // 2, i)
            left = {lv: c for lv, c in pool.histogram().items()}
            for r in test:
                left[r.human_score] -= 1
            k = min(2, min(left.values()))
            if k == 0:
                continue
            calib = select_calibration(pool, k, i, exclude=test)
            assert not calib.essay_ids & test.essay_ids


def test_criterion_5_end_to_end_determinism(tmp_path):
    with criterion(5, "12-essay multi/few replay run is reproducible with 48 backend lookups"):
        outputs = []
        for attempt in ("a", "b"):
            cfg = load_config(FIX / "config_multi_few.yaml", {"run_file": str(tmp_path / f"{attempt}.jsonl")})
            backend = ReplayBackend.from_cassette(cfg.backend.cassette, cfg.backend.decoding_params())
            records = run_experiment(load_corpus(cfg.test_set), cfg, backend=backend)
            assert backend.lookups == 48
            assert len(records) == 12 and all(r.ok for r in records)
            lines = (tmp_path / f"{attempt}.jsonl").read_text().splitlines()
            outputs.append([strip_volatile(json.loads(line)) for line in lines])
        assert outputs[0] == outputs[1]


def test_criterion_6_robustness(tmp_path):
    with criterion(6, "retry path, ParseExhausted record, failures excluded from metrics"):
        rubric = default_rubric()
        retry_essay = EssayRecord("R1", "P1", "Online classes save time for students.", 3)
        dead_essay = EssayRecord("R2", "P1", "Venus is hot.", 2)
        multi_essay = EssayRecord("R3", "P1", "Driverless cars need rules.", 4)
        exchanges = []

        def add(bundle, text):
            exchanges.append(CompletionExchange(fingerprint(bundle), text))

        b = build_single_prompt(retry_essay, rubric)
        add(b, "Hmm, hard to say.")
        add(b.with_reminder(format_reminder(2)), reply(3))
        b = build_single_prompt(dead_essay, rubric)
        add(b, "no score here")
        for a in (2, 3):
            add(b.with_reminder(format_reminder(a)), "still nothing")
        for role in SPECIALISTS:
            sb = build_specialist_prompt(multi_essay, rubric, role)
            add(sb, reply(4) if role.value != "Language" else "Language is fine overall.")
            if role.value == "Language":
                for a in (2, 3):
                    add(sb.with_reminder(format_reminder(a)), "I would rather not say.")
        path = tmp_path / "robustness.jsonl"
        record_cassette(exchanges, path)
        ctx = ExperimentContext(rubric, ReplayBackend.from_cassette(path))

        ok = grade_single(retry_essay, ctx)
        assert ok.ok and ok.verdicts[0].attempt_count == 2 and ok.predicted_score == 3
        dead = grade_single(dead_essay, ctx)
        assert dead.status == "failed" and dead.error.startswith("ParseExhausted: SingleExaminer")
        multi_dead = grade_multi(multi_essay, ctx)
        assert multi_dead.status == "failed" and multi_dead.failed_role == "Language"
        assert "ParseExhausted: Language" in multi_dead.error

        rep = compute_metrics([ok, dead], "single", "zero")
        assert rep.n == 1 and rep.n_failed == 1 and rep.exact_match == 100.0


def test_criterion_7_golden_reports():
    with criterion(7, "markdown and CSV reports are byte-identical to the goldens"):
        reports = collect([FIX / f"reference_{a}_{s}.jsonl" for a, s in CONDITIONS])
        for fmt, golden in (("markdown", "golden_report.md"), ("csv", "golden_report.csv")):
            first = render(reports, fmt).encode()
            assert first == render(reports, fmt).encode()
            assert first == (FIX / golden).read_bytes()
