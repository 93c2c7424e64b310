"""Grading pipelines: verdict parsing, Chairman guardrails, single/multi runs."""

from __future__ import annotations

import enum
import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import filelock

from .config import ExperimentConfig
from .corpus import SCORE_LEVELS, CalibrationSet, EssayCollection, EssayRecord, load_calibration
from .llm_client import Backend, BackendError, make_backend
from .prompts import (
    SPECIALISTS,
    AgentRole,
    PromptBundle,
    Rubric,
    TemplateSet,
    build_chairman_prompt,
    build_single_prompt,
    build_specialist_prompt,
    default_templates,
    load_rubric,
)

logger = logging.getLogger(__name__)

RUN_SCHEMA_VERSION = 1
VOLATILE_FIELDS = ("timestamp",)
VOLATILE_CALL_FIELDS = ("latency_ms", "cached")


# --------------------------------------------------------------------------
# verdicts
# --------------------------------------------------------------------------

class VerdictParseError(ValueError):
    """A reply could not be turned into a verdict; the call may be retried."""


class UnparseableResponse(VerdictParseError):
    pass


class ScoreOutOfRange(VerdictParseError):
    pass


@dataclass(frozen=True)
class AgentVerdict:
    role: AgentRole
    score: int
    rationale: str
    raw_response: str = ""
    attempt_count: int = 1

    def __post_init__(self) -> None:
        if self.score not in SCORE_LEVELS:
            raise ScoreOutOfRange(f"score {self.score} outside 1..6")
        if not self.rationale.strip():
            raise UnparseableResponse("empty rationale")

    def to_dict(self) -> dict:
        return {"role": str(self.role), "score": self.score, "rationale": self.rationale,
                "raw_response": self.raw_response, "attempt_count": self.attempt_count}

    @classmethod
    def from_dict(cls, d: dict) -> "AgentVerdict":
        return cls(AgentRole(d["role"]), int(d["score"]), d["rationale"], d.get("raw_response", ""),
                   int(d.get("attempt_count", 1)))


_FALLBACK_RE = re.compile(r"score\s*(?:\*\*)?\s*[:=]\s*(?:\*\*)?\s*(-?\d+)", re.IGNORECASE)
_FENCE_RE = re.compile(r"```(?:json)?\s*$", re.IGNORECASE)


def _json_objects(raw: str) -> list[tuple[int, dict]]:
    decoder = json.JSONDecoder()
    found = []
    pos = raw.find("{")
    while pos != -1:
        try:
            obj, end = decoder.raw_decode(raw, pos)
        except json.JSONDecodeError:
            pos = raw.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            found.append((pos, obj))
        pos = raw.find("{", end)
    return found


def _coerce_score(value: Any) -> int:
    if isinstance(value, bool):
        raise UnparseableResponse(f"score is not an integer: {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str) and re.fullmatch(r"\s*-?\d+\s*", value):
        return int(value)
    raise UnparseableResponse(f"score is not an integer: {value!r}")


def _lead_text(raw: str, end: int) -> str:
    text = raw[:end].rstrip()
    text = _FENCE_RE.sub("", text).rstrip()
    return text.strip()


def parse_verdict(raw: str, role: AgentRole | str) -> AgentVerdict:
    """Extract score and rationale from an agent reply.

    The last JSON object carrying a ``score`` key wins. Failing that, the last
    ``Score: <n>`` line is used with the preceding text as rationale.
    """
    role = AgentRole(role)
    objects = [(pos, obj) for pos, obj in _json_objects(raw) if "score" in obj]
    if objects:
        pos, obj = objects[-1]
        score = _coerce_score(obj["score"])
        rationale = obj.get("rationale")
        rationale = rationale.strip() if isinstance(rationale, str) else ""
        if not rationale:
            rationale = _lead_text(raw, pos)
        if not rationale:
            raise UnparseableResponse("structured block has no rationale")
    else:
        matches = list(_FALLBACK_RE.finditer(raw))
        if not matches:
            raise UnparseableResponse("no structured block and no 'Score: <n>' line")
        m = matches[-1]
        score = int(m.group(1))
        rationale = _lead_text(raw, m.start()) or raw.strip()
    if score not in SCORE_LEVELS:
        raise ScoreOutOfRange(f"score {score} outside 1..6")
    return AgentVerdict(role, score, rationale, raw)


# --------------------------------------------------------------------------
# guardrails
# --------------------------------------------------------------------------

class Rule(str, enum.Enum):
    NONE = "none"
    VETO = "veto"
    CAP = "cap"

    def __str__(self) -> str:
        return self.value


CAP_CEILING = 3


@dataclass(frozen=True)
class ChairmanDecision:
    chairman_score: int
    final_score: int
    rule_fired: Rule
    specialist_scores: tuple[int, int, int]

    def to_dict(self) -> dict:
        return {"chairman_score": self.chairman_score, "final_score": self.final_score,
                "rule_fired": str(self.rule_fired), "specialist_scores": list(self.specialist_scores)}

    @classmethod
    def from_dict(cls, d: dict) -> "ChairmanDecision":
        return cls(int(d["chairman_score"]), int(d["final_score"]), Rule(d["rule_fired"]),
                   tuple(int(s) for s in d["specialist_scores"]))


def enforce_guardrails(specialist_scores: Sequence[int], chairman_score: int) -> ChairmanDecision:
    """Apply the veto and cap rules on top of the Chairman's own score.

    A specialist 1 forces a final 1. Otherwise a specialist 2 bounds the final
    score at 3; the Chairman's choice stands whenever it is already within bounds.
    """
    scores = tuple(int(s) for s in specialist_scores)
    if len(scores) != 3:
        raise ValueError(f"expected 3 specialist scores, got {len(scores)}")
    for s in (*scores, chairman_score):
        if s not in SCORE_LEVELS:
            raise ValueError(f"score {s} outside 1..6")
    if 1 in scores:
        return ChairmanDecision(chairman_score, 1, Rule.VETO, scores)
    if 2 in scores and chairman_score > CAP_CEILING:
        return ChairmanDecision(chairman_score, CAP_CEILING, Rule.CAP, scores)
    return ChairmanDecision(chairman_score, chairman_score, Rule.NONE, scores)


# --------------------------------------------------------------------------
# run records
# --------------------------------------------------------------------------

class RunFileError(RuntimeError):
    pass


@dataclass
class RunRecord:
    essay_id: str
    architecture: str
    shot_mode: str
    human_score: int
    predicted_score: int | None
    verdicts: list[AgentVerdict] = field(default_factory=list)
    decision: ChairmanDecision | None = None
    status: str = "ok"
    error: str | None = None
    failed_role: str | None = None
    calls: list[dict] = field(default_factory=list)
    backend_id: str = ""
    timestamp: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def timing(self) -> list[float]:
        return [c["latency_ms"] for c in self.calls]

    @property
    def token_usage(self) -> list[dict | None]:
        return [c.get("token_usage") for c in self.calls]

    def to_dict(self) -> dict:
        return {
            "schema_version": RUN_SCHEMA_VERSION,
            "essay_id": self.essay_id,
            "status": self.status,
            "architecture": self.architecture,
            "shot_mode": self.shot_mode,
            "human_score": self.human_score,
            "predicted_score": self.predicted_score,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "decision": self.decision.to_dict() if self.decision else None,
            "error": self.error,
            "failed_role": self.failed_role,
            "calls": self.calls,
            "backend_id": self.backend_id,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        version = d.get("schema_version")
        if version != RUN_SCHEMA_VERSION:
            raise RunFileError(f"unsupported run record schema_version {version!r} "
                               f"(expected {RUN_SCHEMA_VERSION})")
        return cls(
            essay_id=d["essay_id"],
            architecture=d["architecture"],
            shot_mode=d["shot_mode"],
            human_score=int(d["human_score"]),
            predicted_score=d.get("predicted_score"),
            verdicts=[AgentVerdict.from_dict(v) for v in d.get("verdicts") or []],
            decision=ChairmanDecision.from_dict(d["decision"]) if d.get("decision") else None,
            status=d.get("status", "ok"),
            error=d.get("error"),
            failed_role=d.get("failed_role"),
            calls=list(d.get("calls") or []),
            backend_id=d.get("backend_id", ""),
            timestamp=d.get("timestamp", ""),
        )


def strip_volatile(record: dict) -> dict:
    """Copy of a serialized record without wall-clock dependent fields."""
    out = {k: v for k, v in record.items() if k not in VOLATILE_FIELDS}
    out["calls"] = [{k: v for k, v in c.items() if k not in VOLATILE_CALL_FIELDS}
                    for c in record.get("calls", [])]
    return out


def read_run_file(path: str | Path) -> list[RunRecord]:
    path = Path(path)
    if not path.is_file():
        raise RunFileError(f"run file not found: {path}")
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(RunRecord.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise RunFileError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            except (KeyError, TypeError, ValueError) as exc:
                raise RunFileError(f"{path}:{lineno}: malformed record ({exc})") from None
            except RunFileError as exc:
                raise RunFileError(f"{path}:{lineno}: {exc}") from None
    return records


def write_run_file(records: Iterable[RunRecord], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    tmp.replace(path)


# --------------------------------------------------------------------------
# pipelines
# --------------------------------------------------------------------------

@dataclass
class ExperimentContext:
    rubric: Rubric
    backend: Backend
    shot_mode: str = "zero"
    calibration: CalibrationSet | None = None
    templates: TemplateSet = field(default_factory=default_templates)
    max_retries: int = 2
    parallel_specialists: bool = True

    def __post_init__(self) -> None:
        if self.shot_mode not in ("zero", "few"):
            raise ValueError(f"shot_mode must be 'zero' or 'few', got {self.shot_mode!r}")
        if self.shot_mode == "few" and self.calibration is None:
            raise ValueError("few-shot grading needs a calibration set")

    @property
    def examples(self) -> CalibrationSet | None:
        return self.calibration if self.shot_mode == "few" else None


class RoleFailure(Exception):
    def __init__(self, role: AgentRole, kind: str, message: str, calls: list[dict]):
        self.role = role
        self.kind = kind
        self.calls = calls
        super().__init__(f"{kind}: {role.value}: {message}")


def format_reminder(attempt: int) -> str:
    return (f"Reminder (attempt {attempt}): your previous reply could not be read. "
            "Finish with a fenced JSON block of the form\n"
            '```json\n{"score": <integer 1-6>, "rationale": "<one or two sentences>"}\n```')


def _call_role(ctx: ExperimentContext, bundle: PromptBundle) -> tuple[AgentVerdict, list[dict]]:
    calls: list[dict] = []
    last_error: Exception | None = None
    for attempt in range(1, ctx.max_retries + 2):
        b = bundle if attempt == 1 else bundle.with_reminder(format_reminder(attempt))
        try:
            ex = ctx.backend.complete(b)
        except BackendError as exc:
            raise RoleFailure(bundle.role, "BackendFailure", f"{type(exc).__name__}: {exc}", calls) from exc
        calls.append({"role": str(bundle.role), "attempt": attempt, "fingerprint": ex.request_fingerprint,
                      "latency_ms": round(ex.latency_ms, 3), "cached": ex.cached,
                      "token_usage": ex.token_usage})
        try:
            v = parse_verdict(ex.response_text, bundle.role)
        except VerdictParseError as exc:
            last_error = exc
            logger.info("%s reply unreadable on attempt %d: %s", bundle.role, attempt, exc)
            continue
        return AgentVerdict(v.role, v.score, v.rationale, v.raw_response, attempt), calls
    raise RoleFailure(bundle.role, "ParseExhausted",
                      f"{len(calls)} attempt(s), last error: {type(last_error).__name__}: {last_error}", calls)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _failure(essay: EssayRecord, arch: str, ctx: ExperimentContext, exc: RoleFailure,
             verdicts: list[AgentVerdict], calls: list[dict]) -> RunRecord:
    return RunRecord(essay.essay_id, arch, ctx.shot_mode, essay.human_score, None, verdicts, None,
                     status="failed", error=str(exc), failed_role=exc.role.value, calls=calls,
                     backend_id=ctx.backend.backend_id, timestamp=_now())


def grade_single(essay: EssayRecord, ctx: ExperimentContext) -> RunRecord:
    bundle = build_single_prompt(essay, ctx.rubric, ctx.examples, ctx.templates)
    try:
        verdict, calls = _call_role(ctx, bundle)
    except RoleFailure as exc:
        return _failure(essay, "single", ctx, exc, [], exc.calls)
    return RunRecord(essay.essay_id, "single", ctx.shot_mode, essay.human_score, verdict.score, [verdict],
                     calls=calls, backend_id=ctx.backend.backend_id, timestamp=_now())


def grade_multi(essay: EssayRecord, ctx: ExperimentContext) -> RunRecord:
    """Three specialist calls, then one Chairman call over their reports."""
    bundles = [build_specialist_prompt(essay, ctx.rubric, role, ctx.examples, ctx.templates)
               for role in SPECIALISTS]

    def attempt(bundle):
        try:
            return _call_role(ctx, bundle)
        except RoleFailure as exc:
            return exc

    if ctx.parallel_specialists:
        with ThreadPoolExecutor(max_workers=len(bundles)) as pool:
            outcomes = list(pool.map(attempt, bundles))
    else:
        outcomes = [attempt(b) for b in bundles]

    verdicts: list[AgentVerdict] = []
    calls: list[dict] = []
    failure: RoleFailure | None = None
    for outcome in outcomes:
        if isinstance(outcome, RoleFailure):
            calls.extend(outcome.calls)
            failure = failure or outcome
        else:
            verdicts.append(outcome[0])
            calls.extend(outcome[1])
    if failure is not None:
        return _failure(essay, "multi", ctx, failure, verdicts, calls)

    chair_bundle = build_chairman_prompt(verdicts, ctx.rubric, ctx.templates)
    try:
        chair, chair_calls = _call_role(ctx, chair_bundle)
    except RoleFailure as exc:
        return _failure(essay, "multi", ctx, exc, verdicts, calls + exc.calls)
    decision = enforce_guardrails([v.score for v in verdicts], chair.score)
    return RunRecord(essay.essay_id, "multi", ctx.shot_mode, essay.human_score, decision.final_score,
                     verdicts + [chair], decision, calls=calls + chair_calls,
                     backend_id=ctx.backend.backend_id, timestamp=_now())


GRADERS: dict[str, Callable[[EssayRecord, ExperimentContext], RunRecord]] = {
    "single": grade_single,
    "multi": grade_multi,
}


# --------------------------------------------------------------------------
# experiment runner
# --------------------------------------------------------------------------

def build_context(config: ExperimentConfig, backend: Backend | None = None) -> ExperimentContext:
    calibration = None
    if config.shot_mode == "few":
        calibration = load_calibration(config.calibration)
    elif config.calibration:
        logger.warning("shot_mode is 'zero'; ignoring calibration file %s", config.calibration)
    templates = TemplateSet.load(config.templates) if config.templates else default_templates()
    templates.validate()
    return ExperimentContext(
        rubric=load_rubric(config.rubric),
        backend=backend or make_backend(config.backend),
        shot_mode=config.shot_mode,
        calibration=calibration,
        templates=templates,
        max_retries=config.max_retries,
        parallel_specialists=config.parallel_specialists,
    )


def run_experiment(test_set: EssayCollection, config: ExperimentConfig, *,
                   backend: Backend | None = None, ctx: ExperimentContext | None = None,
                   progress: Callable[[RunRecord, int, int], None] | None = None) -> list[RunRecord]:
    """Grade every essay in ``test_set`` and persist records to ``config.run_file``.

    Records are appended as essays finish, so an interrupted run resumes by
    skipping essay_ids already on file. Once all essays are done the file is
    rewritten in test-set order. Returns the records in test-set order.
    """
    config.validate()
    ctx = ctx or build_context(config, backend)
    grade = GRADERS[config.architecture]
    run_path = Path(config.run_file)
    try:
        run_path.parent.mkdir(parents=True, exist_ok=True)
        lock = filelock.FileLock(str(run_path) + ".lock", timeout=0)
        lock.acquire()
    except filelock.Timeout:
        raise RunFileError(f"another run holds the lock on {run_path}") from None
    except OSError as exc:
        raise RunFileError(f"run file not writable: {exc}") from exc
    try:
        order = {r.essay_id: i for i, r in enumerate(test_set.records)}
        existing = read_run_file(run_path) if run_path.exists() else []
        for r in existing:
            if r.essay_id not in order:
                raise RunFileError(f"{run_path}: essay {r.essay_id} is not in the test set")
            if (r.architecture, r.shot_mode) != config.condition:
                raise RunFileError(f"{run_path}: holds a {r.architecture}/{r.shot_mode} record, "
                                   f"config is {config.architecture}/{config.shot_mode}")
        if len({r.essay_id for r in existing}) != len(existing):
            raise RunFileError(f"{run_path}: duplicate essay_id records")
        if config.retry_failed and any(not r.ok for r in existing):
            existing = [r for r in existing if r.ok]
            write_run_file(sorted(existing, key=lambda r: order[r.essay_id]), run_path)
        done = {r.essay_id: r for r in existing}
        todo = [e for e in test_set.records if e.essay_id not in done]
        if done:
            logger.info("resuming: %d of %d essays already recorded", len(done), len(test_set))

        write_lock = threading.Lock()
        total = len(test_set)
        try:
            fh = run_path.open("a", encoding="utf-8")
        except OSError as exc:
            raise RunFileError(f"run file not writable: {exc}") from exc
        with fh:
            def work(essay: EssayRecord) -> RunRecord:
                rec = grade(essay, ctx)
                line = json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n"
                with write_lock:
                    fh.write(line)
                    fh.flush()
                    done[rec.essay_id] = rec
                    if progress:
                        progress(rec, len(done), total)
                return rec

            if config.concurrency == 1:
                for essay in todo:
                    work(essay)
            else:
                with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
                    for _ in pool.map(work, todo):
                        pass
        records = sorted(done.values(), key=lambda r: order[r.essay_id])
        write_run_file(records, run_path)
        return records
    finally:
        lock.release()
