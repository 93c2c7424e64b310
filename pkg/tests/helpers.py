"""Shared builders for synthetic corpora, scripted agent replies and reference-count run files."""

from __future__ import annotations

import hashlib
import random
import re
from fractions import Fraction
from itertools import combinations

from aesgrade.agents import AgentVerdict, RunRecord, enforce_guardrails
from aesgrade.corpus import SCORE_LEVELS, EssayCollection, EssayRecord
from aesgrade.prompts import SPECIALISTS, AgentRole, PromptBundle

FIXED_TIMESTAMP = "2025-01-01T00:00:00+00:00"

LEVEL_TOTALS = (30, 120, 168, 103, 26, 3)
LEVEL_CORRECT = {
    ("single", "zero"): (11, 67, 97, 44, 2, 0),
    ("single", "few"): (14, 66, 91, 63, 8, 1),
    ("multi", "zero"): (17, 72, 87, 35, 3, 0),
    ("multi", "few"): (22, 79, 88, 59, 8, 1),
}
REFERENCE_EXACT = {
    ("single", "zero"): 49.11,
    ("single", "few"): 54.00,
    ("multi", "zero"): 47.56,
    ("multi", "few"): 57.11,
}
REFERENCE_QWK = {
    ("single", "zero"): 0.5664,
    ("single", "few"): 0.7165,
    ("multi", "zero"): 0.5917,
    ("multi", "few"): 0.7453,
}

_WORDS = ("school", "students", "phones", "policy", "community", "service", "evidence", "source",
          "argument", "because", "however", "therefore", "example", "teachers", "believe", "should",
          "venus", "space", "driverless", "cars", "facial", "emotions", "online", "learning")


def synthetic_text(rng: random.Random, n_sentences: int = 4) -> str:
    sentences = []
    for _ in range(n_sentences):
        words = [rng.choice(_WORDS) for _ in range(rng.randint(6, 12))]
        sentences.append(" ".join(words).capitalize() + ".")
    return " ".join(sentences)


def synthetic_pool(level_counts, seed: int = 0, prefix: str = "E") -> EssayCollection:
    rng = random.Random(seed)
    records = []
    i = 0
    for level, count in zip(SCORE_LEVELS, level_counts):
        for _ in range(count):
            i += 1
            records.append(EssayRecord(f"{prefix}{i:05d}", f"P{rng.randint(1, 7)}",
                                       synthetic_text(rng), level))
    rng.shuffle(records)
    return EssayCollection(tuple(records), source="synthetic", seed=seed)


def reply(score, rationale: str = "Scored against the rubric.") -> str:
    return f'Assessment follows.\n\n```json\n{{"score": {score}, "rationale": "{rationale}"}}\n```\n'


def _essay_section(user_text: str) -> str:
    marker = "# Essay to score"
    return user_text[user_text.rindex(marker):] if marker in user_text else user_text


def panel_responder(bundle: PromptBundle) -> str:
    """Deterministic stand-in for a model: hashes the essay per role; the
    Chairman rounds the mean of the specialist scores (ignoring the rules)."""
    if bundle.role == AgentRole.CHAIRMAN:
        scores = [int(s) for s in re.findall(r"^Score: (\d)$", bundle.user_text, flags=re.M)]
        mean = sum(scores) / len(scores)
        return reply(int(mean + 0.5), "Weighed the three reports.")
    digest = hashlib.sha256((str(bundle.role) + _essay_section(bundle.user_text)).encode()).hexdigest()
    score = 1 + int(digest[:8], 16) % 6
    return reply(score, f"{bundle.role} view of the essay.")


def reference_records(arch: str, shot: str) -> list[RunRecord]:
    """Records whose per-level diagonal equals the reference per-level counts for one condition.

    Misses land on an adjacent level, alternating below and above.
    """
    correct = LEVEL_CORRECT[(arch, shot)]
    records = []
    i = 0
    for level, total, hits in zip(SCORE_LEVELS, LEVEL_TOTALS, correct):
        for j in range(total):
            i += 1
            if j < hits:
                pred = level
            elif level == 1:
                pred = 2
            elif level == 6:
                pred = 5
            else:
                pred = level - 1 if j % 2 == 0 else level + 1
            records.append(_fixture_record(f"T{i:04d}", arch, shot, level, pred))
    return records


def _fixture_record(essay_id: str, arch: str, shot: str, human: int, pred: int) -> RunRecord:
    if arch == "single":
        verdicts = [AgentVerdict(AgentRole.SINGLE, pred, "fixture rationale", reply(pred), 1)]
        decision = None
        roles = [AgentRole.SINGLE]
    else:
        verdicts = [AgentVerdict(r, pred, "fixture rationale", reply(pred), 1) for r in SPECIALISTS]
        verdicts.append(AgentVerdict(AgentRole.CHAIRMAN, pred, "fixture rationale", reply(pred), 1))
        decision = enforce_guardrails([pred] * 3, pred)
        roles = [*SPECIALISTS, AgentRole.CHAIRMAN]
    calls = [{"role": str(r), "attempt": 1, "fingerprint": "", "latency_ms": 0.0, "cached": False,
              "token_usage": None} for r in roles]
    return RunRecord(essay_id, arch, shot, human, pred, verdicts, decision, calls=calls,
                     backend_id="fixture", timestamp=FIXED_TIMESTAMP)


def rule_oracle(specialists, chairman):
    """Guardrail rules written out case by case, independent of enforce_guardrails."""
    lowest = min(specialists)
    if lowest == 1:
        return 1, "veto"
    if lowest == 2:
        if chairman >= 4:
            return 3, "cap"
        return chairman, "none"
    return chairman, "none"


def brute_force_allocation(counts, n_total):
    """Enumerate every floor/ceil rounding that sums to n_total; keep the one
    rounding up the largest exact remainders, lower levels first on ties."""
    pool = sum(counts.values())
    levels = sorted(counts)
    exact = {lv: Fraction(n_total * counts[lv], pool) for lv in levels}
    floors = {lv: int(exact[lv]) for lv in levels}
    r = n_total - sum(floors.values())
    best = None
    for ups in combinations(levels, r):
        key = (-sum(exact[lv] - floors[lv] for lv in ups), ups)
        if best is None or key < best[0]:
            best = (key, ups)
    return {lv: floors[lv] + (lv in best[1]) for lv in levels}
