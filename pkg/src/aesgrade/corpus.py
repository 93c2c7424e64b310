"""Essay corpus loading, stratified test-set sampling and calibration selection."""

from __future__ import annotations

import csv
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

SCORE_LEVELS = (1, 2, 3, 4, 5, 6)
CORPUS_FIELDS = ("essay_id", "prompt_id", "score", "full_text")


class CorpusError(ValueError):
    """Raised when a corpus file cannot be ingested.

    ``errors`` holds one ``(row, field, message)`` triple per problem; ``row``
    is the 1-based data row (header excluded) or ``None`` for file-level issues.
    """

    def __init__(self, errors: Sequence[tuple[int | None, str | None, str]], source: str = ""):
        self.errors = list(errors)
        self.source = source
        shown = "; ".join(_format_error(e) for e in self.errors[:5])
        more = f" (+{len(self.errors) - 5} more)" if len(self.errors) > 5 else ""
        prefix = f"{source}: " if source else ""
        super().__init__(f"{prefix}{shown}{more}")


def _format_error(err: tuple[int | None, str | None, str]) -> str:
    row, fld, msg = err
    where = []
    if row is not None:
        where.append(f"row {row}")
    if fld:
        where.append(f"field '{fld}'")
    return f"{', '.join(where)}: {msg}" if where else msg


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class EssayRecord:
    essay_id: str
    prompt_id: str
    text: str
    human_score: int

    def __post_init__(self) -> None:
        if not self.essay_id:
            raise ValueError("essay_id must be non-empty")
        if isinstance(self.human_score, bool) or self.human_score not in SCORE_LEVELS:
            raise ValueError(f"human_score must be in 1..6, got {self.human_score!r}")
        if not self.text.strip():
            raise ValueError(f"essay {self.essay_id} has empty text")

    def to_row(self) -> dict:
        return {
            "essay_id": self.essay_id,
            "prompt_id": self.prompt_id,
            "score": self.human_score,
            "full_text": self.text,
        }


@dataclass(frozen=True)
class EssayCollection:
    records: tuple[EssayRecord, ...]
    source: str | None = None
    seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        dupes = [k for k, v in Counter(r.essay_id for r in self.records).items() if v > 1]
        if dupes:
            raise ValueError(f"duplicate essay_id(s): {', '.join(sorted(dupes))}")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def essay_ids(self) -> set[str]:
        return {r.essay_id for r in self.records}

    def histogram(self) -> dict[int, int]:
        counts = Counter(r.human_score for r in self.records)
        return {level: counts.get(level, 0) for level in SCORE_LEVELS}

    def by_level(self) -> dict[int, list[EssayRecord]]:
        out: dict[int, list[EssayRecord]] = {level: [] for level in SCORE_LEVELS}
        for r in self.records:
            out[r.human_score].append(r)
        return out


@dataclass(frozen=True)
class CalibrationSet:
    per_level: Mapping[int, tuple[EssayRecord, ...]]
    seed: int | None = None

    def __post_init__(self) -> None:
        levels = {int(k): tuple(v) for k, v in self.per_level.items()}
        missing = [lv for lv in SCORE_LEVELS if not levels.get(lv)]
        if missing:
            raise ValueError(f"calibration set is missing level(s) {missing}")
        extra = set(levels) - set(SCORE_LEVELS)
        if extra:
            raise ValueError(f"calibration set has unknown level(s) {sorted(extra)}")
        sizes = {len(v) for v in levels.values()}
        if len(sizes) != 1:
            raise ValueError(f"calibration levels have unequal sizes: "
                             f"{ {lv: len(levels[lv]) for lv in SCORE_LEVELS} }")
        for lv, recs in levels.items():
            for r in recs:
                if r.human_score != lv:
                    raise ValueError(f"essay {r.essay_id} has score {r.human_score} "
                                     f"but is filed under level {lv}")
        ids = [r.essay_id for recs in levels.values() for r in recs]
        if len(ids) != len(set(ids)):
            raise ValueError("calibration set contains duplicate essay_id")
        object.__setattr__(self, "per_level", {lv: levels[lv] for lv in SCORE_LEVELS})

    @property
    def k(self) -> int:
        return len(self.per_level[1])

    def records(self) -> list[EssayRecord]:
        """All calibration essays in ascending level order."""
        return [r for lv in SCORE_LEVELS for r in self.per_level[lv]]

    @property
    def essay_ids(self) -> set[str]:
        return {r.essay_id for r in self.records()}

    def __len__(self) -> int:
        return sum(len(v) for v in self.per_level.values())


# --------------------------------------------------------------------------
# loading / writing
# --------------------------------------------------------------------------

def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt:
        fmt = fmt.lower()
    elif path.suffix.lower() in (".jsonl", ".ndjson"):
        fmt = "jsonl"
    elif path.suffix.lower() == ".csv":
        fmt = "csv"
    else:
        raise CorpusError([(None, None, f"cannot infer format from suffix '{path.suffix}'")], str(path))
    if fmt not in ("csv", "jsonl"):
        raise CorpusError([(None, None, f"unsupported format '{fmt}'")], str(path))
    return fmt


def _iter_raw_rows(path: Path, fmt: str, errors: list) -> Iterable[tuple[int, dict]]:
    if fmt == "csv":
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [f for f in CORPUS_FIELDS if f not in header]
            if missing:
                errors.append((None, None, f"CSV header lacks column(s): {', '.join(missing)}"))
                return
            for i, row in enumerate(reader, start=1):
                yield i, row
    else:
        with path.open(encoding="utf-8") as fh:
            row_no = 0
            for line in fh:
                if not line.strip():
                    continue
                row_no += 1
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    errors.append((row_no, None, f"invalid JSON ({exc.msg})"))
                    continue
                if not isinstance(obj, dict):
                    errors.append((row_no, None, "expected a JSON object"))
                    continue
                yield row_no, obj


def _parse_score(value, row: int, errors: list, fld: str = "score") -> int | None:
    if isinstance(value, bool):
        errors.append((row, fld, f"not an integer: {value!r}"))
        return None
    if isinstance(value, int):
        score = value
    elif isinstance(value, str) and value.strip().lstrip("+-").isdigit():
        score = int(value.strip())
    else:
        errors.append((row, fld, f"not an integer: {value!r}"))
        return None
    if score not in SCORE_LEVELS:
        errors.append((row, fld, f"score {score} outside 1..6"))
        return None
    return score


def _record_from_row(row_no: int, row: dict, errors: list) -> EssayRecord | None:
    n_before = len(errors)
    for fld in CORPUS_FIELDS:
        if row.get(fld) is None:
            errors.append((row_no, fld, "missing"))
    if len(errors) > n_before:
        return None
    essay_id = str(row["essay_id"]).strip()
    if not essay_id:
        errors.append((row_no, "essay_id", "empty"))
    text = row["full_text"]
    if not isinstance(text, str) or not text.strip():
        errors.append((row_no, "full_text", "empty or whitespace-only essay"))
    score = _parse_score(row["score"], row_no, errors)
    if len(errors) > n_before:
        return None
    return EssayRecord(essay_id=essay_id, prompt_id=str(row["prompt_id"]), text=text, human_score=score)


def load_corpus(path: str | Path, format: str | None = None) -> EssayCollection:
    """Load essays from a CSV or JSONL file.

    Every row is validated; all problems are collected and raised together as a
    :class:`CorpusError` so a bad file can be fixed in one pass.
    """
    path = Path(path)
    if not path.is_file():
        raise CorpusError([(None, None, "file not found")], str(path))
    fmt = _detect_format(path, format)
    errors: list = []
    records: list[EssayRecord] = []
    first_seen: dict[str, int] = {}
    for row_no, row in _iter_raw_rows(path, fmt, errors):
        rec = _record_from_row(row_no, row, errors)
        if rec is None:
            continue
        if rec.essay_id in first_seen:
            errors.append((row_no, "essay_id",
                           f"duplicate essay_id '{rec.essay_id}' (first at row {first_seen[rec.essay_id]})"))
            continue
        first_seen[rec.essay_id] = row_no
        records.append(rec)
    if errors:
        raise CorpusError(errors, str(path))
    return EssayCollection(tuple(records), source=str(path))


def write_corpus(collection: EssayCollection | Iterable[EssayRecord], path: str | Path,
                 format: str | None = None) -> None:
    path = Path(path)
    fmt = _detect_format(path, format)
    rows = [r.to_row() for r in collection]
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(CORPUS_FIELDS))
            writer.writeheader()
            writer.writerows(rows)
    else:
        with path.open("w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def write_calibration(calibration: CalibrationSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in calibration.records():
            row = rec.to_row()
            row["level"] = rec.human_score
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def load_calibration(path: str | Path) -> CalibrationSet:
    path = Path(path)
    if not path.is_file():
        raise CorpusError([(None, None, "file not found")], str(path))
    errors: list = []
    per_level: dict[int, list[EssayRecord]] = {lv: [] for lv in SCORE_LEVELS}
    seen: set[str] = set()
    for row_no, row in _iter_raw_rows(path, "jsonl", errors):
        rec = _record_from_row(row_no, row, errors)
        level = _parse_score(row.get("level"), row_no, errors, fld="level")
        if rec is None or level is None:
            continue
        if rec.human_score != level:
            errors.append((row_no, "level", f"level {level} does not match score {rec.human_score}"))
            continue
        if rec.essay_id in seen:
            errors.append((row_no, "essay_id", f"duplicate essay_id '{rec.essay_id}'"))
            continue
        seen.add(rec.essay_id)
        per_level[level].append(rec)
    if errors:
        raise CorpusError(errors, str(path))
    try:
        return CalibrationSet(per_level)
    except ValueError as exc:
        raise CorpusError([(None, None, str(exc))], str(path)) from exc


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def largest_remainder_allocation(counts: Mapping[int, int], n_total: int) -> dict[int, int]:
    """Split ``n_total`` across strata in proportion to ``counts``.

    Each stratum gets the floor of its exact share; leftover units go to the
    largest fractional remainders, ties going to the lower level.
    """
    pool_size = sum(counts.values())
    if pool_size <= 0:
        raise SamplingError("cannot allocate over an empty pool")
    levels = sorted(counts)
    # Integer arithmetic keeps remainders exact.
    floors = {lv: n_total * counts[lv] // pool_size for lv in levels}
    rems = {lv: n_total * counts[lv] % pool_size for lv in levels}
    leftover = n_total - sum(floors.values())
    for lv in sorted(levels, key=lambda lv: (-rems[lv], lv))[:leftover]:
        floors[lv] += 1
    return floors


def stratified_sample(pool: EssayCollection, n_total: int, seed: int) -> EssayCollection:
    """Draw ``n_total`` essays with per-score quotas proportional to the pool.

    Within each stratum essays are drawn uniformly without replacement; the
    result keeps the pool's record order.
    """
    if n_total <= 0:
        raise SamplingError(f"n_total must be positive, got {n_total}")
    if n_total > len(pool):
        raise SamplingError(f"n_total={n_total} exceeds pool size {len(pool)}")
    strata = pool.by_level()
    quotas = largest_remainder_allocation({lv: len(strata[lv]) for lv in SCORE_LEVELS}, n_total)
    rng = random.Random(seed)
    chosen: set[str] = set()
    for lv in SCORE_LEVELS:
        members = strata[lv]
        if quotas[lv] > len(members):
            raise SamplingError(f"level {lv}: quota {quotas[lv]} exceeds stratum size {len(members)}")
        chosen.update(r.essay_id for r in rng.sample(members, quotas[lv]))
    picked = tuple(r for r in pool.records if r.essay_id in chosen)
    return EssayCollection(picked, source=pool.source, seed=seed)


def select_calibration(pool: EssayCollection, k_per_level: int, seed: int,
                       exclude: EssayCollection | Iterable[EssayRecord] = ()) -> CalibrationSet:
    if k_per_level <= 0:
        raise SamplingError(f"k_per_level must be positive, got {k_per_level}")
    excluded = {r.essay_id for r in exclude}
    rng = random.Random(seed)
    per_level: dict[int, list[EssayRecord]] = {}
    short = []
    candidates_by_level = pool.by_level()
    for lv in SCORE_LEVELS:
        candidates = [r for r in candidates_by_level[lv] if r.essay_id not in excluded]
        if len(candidates) < k_per_level:
            short.append(f"level {lv} has {len(candidates)} candidate(s), needs {k_per_level}")
            continue
        per_level[lv] = rng.sample(candidates, k_per_level)
    if short:
        raise SamplingError("insufficient calibration candidates: " + "; ".join(short))
    return CalibrationSet(per_level, seed=seed)


def verify_disjoint(a: EssayCollection | Iterable[EssayRecord],
                    b: CalibrationSet | Iterable[EssayRecord]) -> list[str]:
    """Return the essay_ids present in both inputs (empty list means disjoint)."""
    b_records = b.records() if isinstance(b, CalibrationSet) else list(b)
    ids_a = {r.essay_id for r in a}
    return sorted({r.essay_id for r in b_records} & ids_a)
