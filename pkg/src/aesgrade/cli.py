"""Command-line entry point: ``aesgrade sample|run|report|validate``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .agents import RunFileError, run_experiment
from .config import ExperimentConfig, load_config
from .corpus import (
    CorpusError,
    SamplingError,
    load_calibration,
    load_corpus,
    select_calibration,
    stratified_sample,
    verify_disjoint,
    write_calibration,
    write_corpus,
)
from .llm_client import CassetteError, ConfigError, load_cassette
from .prompts import PromptError, TemplateSet, default_templates, load_rubric
from .report import ReportError, collect, render

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_USAGE = 2

def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# --------------------------------------------------------------------------
# sample
# --------------------------------------------------------------------------

def cmd_sample(args: argparse.Namespace) -> int:
    out = Path(args.out_dir)
    targets = [out / "test_set.jsonl", out / "calibration.jsonl", out / "provenance.json"]
    existing = [str(p) for p in targets if p.exists()]
    if existing and not args.force:
        _err(f"refusing to overwrite {', '.join(existing)} (use --force)")
        return EXIT_USAGE
    try:
        pool = load_corpus(args.corpus)
        test = stratified_sample(pool, args.n, args.seed)
        calib = select_calibration(pool, args.k, args.seed, exclude=test)
    except (CorpusError, SamplingError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    shared = verify_disjoint(test, calib)
    if shared:  # select_calibration excludes the test set, so this is a bug guard
        _err(f"calibration overlaps test set: {', '.join(shared)}")
        return EXIT_USAGE
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(test, targets[0])
    write_calibration(calib, targets[1])
    provenance = {
        "source": str(Path(args.corpus).resolve()),
        "seed": args.seed,
        "n_total": args.n,
        "k_per_level": args.k,
        "pool_size": len(pool),
        "pool_histogram": {str(k): v for k, v in pool.histogram().items()},
        "test_histogram": {str(k): v for k, v in test.histogram().items()},
        "calibration_ids": [r.essay_id for r in calib.records()],
    }
    targets[2].write_text(json.dumps(provenance, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(test)} test essays and {len(calib)} calibration essays to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------

def _overrides(args: argparse.Namespace) -> dict:
    return {
        "seed": args.seed,
        "run_file": getattr(args, "run_file", None),
        "concurrency": getattr(args, "concurrency", None),
        "retry_failed": True if getattr(args, "retry_failed", False) else None,
    }


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config, _overrides(args))
        test_set = load_corpus(config.test_set)
    except (ConfigError, CorpusError) as exc:
        _err(str(exc))
        return EXIT_USAGE

    def progress(rec, done, total):
        status = "ok" if rec.ok else f"FAILED ({rec.error})"
        print(f"[{done}/{total}] {rec.essay_id}: {status}", file=sys.stderr)

    try:
        records = run_experiment(test_set, config, progress=None if args.quiet else progress)
    except (RunFileError, ConfigError, CorpusError, PromptError, CassetteError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    failed = sum(1 for r in records if not r.ok)
    print(f"completed {len(records) - failed}/{len(records)} essays, {failed} failed -> {config.run_file}")
    return EXIT_FAILURES if failed else EXIT_OK


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

def cmd_report(args: argparse.Namespace) -> int:
    if len(args.files) > 4:
        _err("report takes at most four inputs (one per condition)")
        return EXIT_USAGE
    try:
        text = render(collect(args.files), args.format)
    except ReportError as exc:
        _err(str(exc))
        return EXIT_USAGE
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# validate
# --------------------------------------------------------------------------

def validate_config(config: ExperimentConfig) -> list[tuple[str, str]]:
    """Return ``(severity, message)`` findings for an already-parsed config."""
    findings: list[tuple[str, str]] = []
    test_set = None
    try:
        test_set = load_corpus(config.test_set)
    except CorpusError as exc:
        findings.append(("error", f"test_set: {exc}"))

    if config.shot_mode == "few":
        try:
            calib = load_calibration(config.calibration)
        except CorpusError as exc:
            findings.append(("error", f"calibration: {exc}"))
        else:
            if test_set is not None:
                shared = verify_disjoint(test_set, calib)
                if shared:
                    findings.append(("error", f"calibration overlaps test set: {', '.join(shared)}"))
    elif config.calibration:
        findings.append(("warning", "shot_mode is zero; calibration file will be ignored"))

    try:
        load_rubric(config.rubric)
    except PromptError as exc:
        findings.append(("error", f"rubric: {exc}"))

    try:
        templates = TemplateSet.load(config.templates) if config.templates else default_templates()
    except PromptError as exc:
        findings.append(("error", f"templates: {exc}"))
    else:
        findings += [("error", p) for p in templates.problems()]

    backend = config.backend
    if backend.kind == "replay":
        try:
            load_cassette(backend.cassette)
        except CassetteError as exc:
            findings.append(("error", f"cassette: {exc}"))
    elif not os.environ.get(backend.api_key_env):
        findings.append(("error", f"environment variable {backend.api_key_env} is not set"))
    if backend.cache_dir and Path(backend.cache_dir).exists() and not Path(backend.cache_dir).is_dir():
        findings.append(("error", f"cache_dir {backend.cache_dir} is not a directory"))
    return findings


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        findings = [("error", str(exc))]
    else:
        findings = validate_config(config)
    for severity, msg in findings:
        print(f"{severity}: {msg}")
    errors = sum(1 for s, _ in findings if s == "error")
    warnings = len(findings) - errors
    print(f"{errors} issues" + (f", {warnings} warnings" if warnings else ""))
    return EXIT_OK if errors == 0 else EXIT_FAILURES


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aesgrade", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="draw a stratified test set and a disjoint calibration set")
    p.add_argument("--corpus", required=True, help="CSV or JSONL corpus file")
    p.add_argument("--n", type=int, default=450, help="test-set size (default 450)")
    p.add_argument("--k", type=int, default=2, help="calibration essays per level (default 2)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("run", help="grade a test set under one condition")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--run-file", help="override config run_file")
    p.add_argument("--concurrency", type=int, help="override config concurrency")
    p.add_argument("--retry-failed", action="store_true", help="re-grade essays recorded as failed")
    p.add_argument("-q", "--quiet", action="store_true", help="no per-essay progress")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="tabulate one to four run files")
    p.add_argument("files", nargs="+", help="run files (.jsonl) or precomputed metrics (.json)")
    p.add_argument("--format", choices=("markdown", "csv", "json"), default="markdown")
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("validate", help="check a run config before spending API calls")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
