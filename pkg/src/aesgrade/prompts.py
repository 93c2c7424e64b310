"""Prompt assembly for every grading role, in zero-shot and few-shot modes."""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import yaml

from .corpus import SCORE_LEVELS, CalibrationSet, EssayRecord

PLACEHOLDER_RE = re.compile(r"\{\{\s*(\w+)\s*\}\}")


class AgentRole(str, enum.Enum):
    SINGLE = "SingleExaminer"
    CONTENT = "Content"
    STRUCTURE = "Structure"
    LANGUAGE = "Language"
    CHAIRMAN = "Chairman"

    def __str__(self) -> str:
        return self.value


SPECIALISTS = (AgentRole.CONTENT, AgentRole.STRUCTURE, AgentRole.LANGUAGE)

# Each specialist's system prompt must keep these out-of-scope instructions.
NEGATIVE_CONSTRAINTS: dict[AgentRole, tuple[str, ...]] = {
    AgentRole.CONTENT: ("Ignore grammar",),
    AgentRole.STRUCTURE: ("Ignore facts", "Ignore grammar"),
    AgentRole.LANGUAGE: ("Ignore the argument",),
}

TEMPLATE_NAMES = (
    "single_system",
    "single_user",
    "content_system",
    "structure_system",
    "language_system",
    "specialist_user",
    "chairman_system",
    "chairman_user",
)

REQUIRED_PLACEHOLDERS: dict[str, frozenset[str]] = {
    "single_system": frozenset(),
    "single_user": frozenset({"rubric", "examples", "essay"}),
    "content_system": frozenset(),
    "structure_system": frozenset(),
    "language_system": frozenset(),
    "specialist_user": frozenset({"rubric", "examples", "essay"}),
    "chairman_system": frozenset(),
    "chairman_user": frozenset({"rubric", "reports"}),
}

FEW_SHOT_HEADER = (
    "# Calibration examples\n\n"
    "The essays below were scored by expert human raters on the same rubric. "
    "Use them to calibrate your scoring."
)
SPECIALIST_ANCHOR_NOTE = (
    "Note: these example scores are holistic anchors for the whole essay, not "
    "scores for your dimension. Use them to see what each level looks like."
)


class PromptError(ValueError):
    pass


class TemplateError(PromptError):
    pass


@dataclass(frozen=True)
class Rubric:
    full_text: str
    per_level_descriptors: Mapping[int, str]
    name: str = "rubric"

    def __post_init__(self) -> None:
        if not self.full_text.strip():
            raise PromptError("rubric full_text is empty")
        desc = {int(k): str(v) for k, v in self.per_level_descriptors.items()}
        missing = [lv for lv in SCORE_LEVELS if not desc.get(lv, "").strip()]
        if missing:
            raise PromptError(f"rubric lacks descriptor(s) for level(s) {missing}")
        object.__setattr__(self, "per_level_descriptors", {lv: desc[lv] for lv in SCORE_LEVELS})


def load_rubric(path: str | Path | None = None) -> Rubric:
    """Load a rubric YAML/JSON file with ``full_text`` and ``levels`` keys.

    With no path, the packaged placeholder rubric is returned.
    """
    if path is None:
        text = resources.files("aesgrade").joinpath("data/rubric.yaml").read_text(encoding="utf-8")
        source = "<packaged>"
    else:
        path = Path(path)
        if not path.is_file():
            raise PromptError(f"rubric file not found: {path}")
        text = path.read_text(encoding="utf-8")
        source = str(path)
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise PromptError(f"{source}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict) or "full_text" not in data or "levels" not in data:
        raise PromptError(f"{source}: rubric needs 'full_text' and 'levels' keys")
    return Rubric(full_text=str(data["full_text"]).strip(),
                  per_level_descriptors=data["levels"],
                  name=str(data.get("name", Path(source).stem)))


def default_rubric() -> Rubric:
    return load_rubric(None)


@dataclass(frozen=True)
class TemplateSet:
    texts: Mapping[str, str]
    source: str = "<packaged>"

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "TemplateSet":
        if directory is None:
            root = resources.files("aesgrade").joinpath("templates")
            texts = {n: root.joinpath(f"{n}.txt").read_text(encoding="utf-8") for n in TEMPLATE_NAMES}
            return cls(texts)
        directory = Path(directory)
        if not directory.is_dir():
            raise TemplateError(f"template directory not found: {directory}")
        texts = {}
        for name in TEMPLATE_NAMES:
            p = directory / f"{name}.txt"
            if p.is_file():
                texts[name] = p.read_text(encoding="utf-8")
        return cls(texts, source=str(directory))

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.texts):
            h.update(name.encode())
            h.update(b"\0")
            h.update(self.texts[name].encode("utf-8"))
            h.update(b"\0")
        return h.hexdigest()[:16]

    def problems(self) -> list[str]:
        """Human-readable list of everything wrong with this template set."""
        out = []
        for name in TEMPLATE_NAMES:
            if name not in self.texts:
                out.append(f"template '{name}' is missing")
                continue
            found = set(PLACEHOLDER_RE.findall(self.texts[name]))
            for ph in sorted(REQUIRED_PLACEHOLDERS[name] - found):
                out.append(f"template '{name}' lacks placeholder {{{{{ph}}}}}")
            for ph in sorted(found - REQUIRED_PLACEHOLDERS[name]):
                out.append(f"template '{name}' has unknown placeholder {{{{{ph}}}}}")
        for role, phrases in NEGATIVE_CONSTRAINTS.items():
            name = f"{role.value.lower()}_system"
            for phrase in phrases:
                if name in self.texts and phrase not in self.texts[name]:
                    out.append(f"template '{name}' lacks the constraint '{phrase}'")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise TemplateError(f"{self.source}: " + "; ".join(problems))

    def render(self, name: str, **values: str) -> str:
        if name not in self.texts:
            raise TemplateError(f"template '{name}' is missing from {self.source}")

        def sub(m: re.Match) -> str:
            key = m.group(1)
            if key not in values:
                raise TemplateError(f"template '{name}': no value for {{{{{key}}}}}")
            return values[key]

        template = self.texts[name]
        # an empty value on a line of its own drops the line and one blank line after it
        for key, value in values.items():
            if value == "":
                template = re.sub(r"(?m)^[ \t]*\{\{\s*%s\s*\}\}[ \t]*\n(?:[ \t]*\n)?" % re.escape(key), "", template)
        # single pass, so essay text containing "{{...}}" is never re-expanded
        return PLACEHOLDER_RE.sub(sub, template)


_DEFAULT_TEMPLATES: TemplateSet | None = None


def default_templates() -> TemplateSet:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = TemplateSet.load(None)
    return _DEFAULT_TEMPLATES


@dataclass(frozen=True)
class PromptBundle:
    role: AgentRole
    system_text: str
    user_text: str
    example_blocks: tuple[tuple[str, int, int], ...] = ()
    shot_mode: str = "zero"

    def __post_init__(self) -> None:
        if self.shot_mode not in ("zero", "few"):
            raise PromptError(f"shot_mode must be 'zero' or 'few', got {self.shot_mode!r}")
        if self.shot_mode == "zero" and self.example_blocks:
            raise PromptError("zero-shot bundle cannot carry example blocks")
        levels = [lv for _, _, lv in self.example_blocks]
        if levels != sorted(levels):
            raise PromptError("example blocks must be in ascending level order")

    def with_reminder(self, reminder: str) -> "PromptBundle":
        return PromptBundle(self.role, self.system_text, self.user_text.rstrip("\n") + "\n\n" + reminder + "\n",
                            self.example_blocks, self.shot_mode)


def _example_blocks(calibration: CalibrationSet | None) -> tuple[tuple[str, int, int], ...]:
    if calibration is None:
        return ()
    return tuple((r.text, r.human_score, r.human_score) for r in calibration.records())


def _render_examples(blocks: Sequence[tuple[str, int, int]], rubric: Rubric, note: str | None = None) -> str:
    if not blocks:
        return ""
    parts = [FEW_SHOT_HEADER]
    if note:
        parts.append(note)
    for i, (text, score, level) in enumerate(blocks, start=1):
        parts.append(f"## Example {i}: score {score} ({rubric.per_level_descriptors[level]})\n\n{text}")
    return "\n\n".join(parts)


def _check_calibration(calibration: CalibrationSet | None) -> None:
    if calibration is None:
        return
    if not isinstance(calibration, CalibrationSet):
        raise PromptError("calibration must be a CalibrationSet")
    missing = [lv for lv in SCORE_LEVELS if not calibration.per_level.get(lv)]
    if missing:
        raise PromptError(f"calibration set is missing level(s) {missing}")


def build_single_prompt(essay: EssayRecord, rubric: Rubric, calibration: CalibrationSet | None = None,
                        templates: TemplateSet | None = None) -> PromptBundle:
    templates = templates or default_templates()
    _check_calibration(calibration)
    blocks = _example_blocks(calibration)
    user = templates.render("single_user", rubric=rubric.full_text,
                            examples=_render_examples(blocks, rubric), essay=essay.text)
    return PromptBundle(AgentRole.SINGLE, templates.render("single_system"), user, blocks,
                        "few" if calibration is not None else "zero")


def build_specialist_prompt(essay: EssayRecord, rubric: Rubric, role: AgentRole,
                            calibration: CalibrationSet | None = None,
                            templates: TemplateSet | None = None) -> PromptBundle:
    role = AgentRole(role)
    if role not in SPECIALISTS:
        raise PromptError(f"{role.value} is not a specialist role")
    templates = templates or default_templates()
    _check_calibration(calibration)
    system = templates.render(f"{role.value.lower()}_system")
    for phrase in NEGATIVE_CONSTRAINTS[role]:
        if phrase not in system:
            raise TemplateError(f"{role.value} system template lacks the constraint '{phrase}'")
    blocks = _example_blocks(calibration)
    user = templates.render("specialist_user", rubric=rubric.full_text,
                            examples=_render_examples(blocks, rubric, SPECIALIST_ANCHOR_NOTE),
                            essay=essay.text)
    return PromptBundle(role, system, user, blocks, "few" if calibration is not None else "zero")


def _render_reports(reports) -> str:
    by_role = {}
    for v in reports:
        role = AgentRole(v.role)
        if role not in SPECIALISTS:
            raise PromptError(f"chairman input contains a {role.value} verdict")
        if role in by_role:
            raise PromptError(f"duplicate {role.value} verdict")
        by_role[role] = v
    missing = [r.value for r in SPECIALISTS if r not in by_role]
    if missing:
        raise PromptError(f"missing specialist verdict(s): {', '.join(missing)}")
    sections = []
    for role in SPECIALISTS:
        v = by_role[role]
        sections.append(f"## {role.value} specialist\n\nScore: {v.score}\nRationale: {v.rationale.strip()}")
    return "\n\n".join(sections)


def build_chairman_prompt(reports, rubric: Rubric, templates: TemplateSet | None = None) -> PromptBundle:
    """Chairman prompt carrying the three specialist reports (never the essay)."""
    templates = templates or default_templates()
    reports = list(reports)
    if len(reports) != 3:
        raise PromptError(f"chairman needs exactly 3 specialist verdicts, got {len(reports)}")
    user = templates.render("chairman_user", rubric=rubric.full_text, reports=_render_reports(reports))
    return PromptBundle(AgentRole.CHAIRMAN, templates.render("chairman_system"), user, (), "zero")
