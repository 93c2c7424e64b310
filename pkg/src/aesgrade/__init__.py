"""LLM essay grading: a single examiner or a specialist panel with a rule-bound Chairman."""

__version__ = "0.1.0"

from .agents import (
    AgentVerdict,
    ChairmanDecision,
    ExperimentContext,
    Rule,
    RunRecord,
    enforce_guardrails,
    grade_multi,
    grade_single,
    parse_verdict,
    run_experiment,
)
from .config import ExperimentConfig, load_config
from .corpus import (
    CalibrationSet,
    EssayCollection,
    EssayRecord,
    load_calibration,
    load_corpus,
    select_calibration,
    stratified_sample,
    verify_disjoint,
)
from .llm_client import BackendConfig, CompletionExchange, make_backend
from .metrics import ConfusionMatrix, MetricsReport, exact_match, improvement_delta, per_level_breakdown, qwk
from .prompts import AgentRole, PromptBundle, Rubric, build_chairman_prompt, build_single_prompt, build_specialist_prompt
