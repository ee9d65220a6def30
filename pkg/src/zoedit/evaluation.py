"""Editing-quality metrics and the ablation harness.

Metrics (greedy exact-match, no partial credit):
  edit success — the fact prompt decodes to the new target under the
    edited model;
  portability  — rephrased prompts decode to the new target;
  locality     — unrelated prompts decode to the same continuation under
    the edited and unedited models, token for token, over the probe's
    expected length.

Datasets are JSONL: one case per line with fields subject / prompt /
target / preservation_prompt / rephrases / locality_probes (+ optional
layer). Text fields hold whitespace-separated vocabulary words.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import telemetry
from .editor import (
    CovarianceEstimate,
    EditRequest,
    ZOConfig,
    edit,
    find_subspan,
)
from .errors import DatasetError, EditFailure, InputError
from .model import ModelBundle, decode_matches, greedy_decode


@dataclass
class EvalCase:
    request: EditRequest
    rephrase_prompts: list  # token tuples, each containing the subject
    locality_probes: list  # (prompt tokens, expected continuation tokens)

    def __post_init__(self):
        if len(self.rephrase_prompts) < 1 or len(self.locality_probes) < 1:
            raise InputError("each case needs at least one rephrase and one locality probe")
        for prompt, _ in self.locality_probes:
            if find_subspan(prompt, self.request.subject) is not None:
                raise InputError("locality probe contains the edited subject")


@dataclass
class MetricsReport:
    edit_success: float
    locality: float
    portability: float
    per_case: list
    telemetry: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "edit_success": self.edit_success,
            "locality": self.locality,
            "portability": self.portability,
            "per_case": self.per_case,
            "telemetry": self.telemetry,
        }


# ---------------------------------------------------------------------------
# dataset ingestion
# ---------------------------------------------------------------------------

_REQUIRED_FIELDS = ("subject", "prompt", "target", "preservation_prompt",
                    "rephrases", "locality_probes")


def load_dataset(path: str, tokenizer, default_layer: int = 0) -> list:
    """Parse a JSONL dataset into EvalCases. Malformed lines are rejected
    with their line numbers and the offending fields listed."""
    cases = []
    problems = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                cases.append(_parse_case(line, tokenizer, default_layer))
            except (KeyError, ValueError, InputError, json.JSONDecodeError) as e:
                problems.append(f"line {lineno}: {e}")
    if problems:
        raise DatasetError("dataset schema violations:\n  " + "\n  ".join(problems))
    return cases


def _parse_case(line: str, tokenizer, default_layer: int) -> EvalCase:
    obj = json.loads(line)
    missing = [f for f in _REQUIRED_FIELDS if f not in obj]
    if missing:
        raise ValueError(f"missing field(s) {missing}")
    request = EditRequest(
        subject=tuple(tokenizer.encode(obj["subject"])),
        fact_prompt=tuple(tokenizer.encode(obj["prompt"])),
        target=tuple(tokenizer.encode(obj["target"])),
        preservation_prompt=tuple(tokenizer.encode(obj["preservation_prompt"])),
        edit_layer=int(obj.get("layer", default_layer)),
    )
    rephrases = [tuple(tokenizer.encode(r)) for r in obj["rephrases"]]
    probes = []
    for p in obj["locality_probes"]:
        probes.append((tuple(tokenizer.encode(p["prompt"])), tuple(tokenizer.encode(p["expected"]))))
    return EvalCase(request=request, rephrase_prompts=rephrases, locality_probes=probes)


def write_dataset(path: str, records: Sequence[dict]) -> None:
    import os
    import tempfile

    dirpath = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=dirpath, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def evaluate(
    model_before: ModelBundle,
    model_after,
    cases: Sequence[EvalCase],
    edit_reports: Optional[Sequence] = None,
) -> MetricsReport:
    """Score edited model(s) against the unedited one.

    `model_after` is a single bundle (sequential-edit scenario) or a list
    aligned with `cases` (each fact edited independently on the base
    model). Locality compares greedy continuations of the edited model
    against the *unedited* model over each probe's expected length.
    """
    if isinstance(model_after, ModelBundle):
        after = [model_after] * len(cases)
    else:
        after = list(model_after)
        if len(after) != len(cases):
            raise InputError("one edited model per case required")

    per_case = []
    n_rephrase_hits = 0
    n_rephrases = 0
    n_local_hits = 0
    n_local = 0
    n_success = 0
    for case, edited in zip(cases, after):
        req = case.request
        ok, _ = decode_matches(edited, req.fact_prompt, req.target)
        n_success += ok

        case_rephrase = []
        for prompt in case.rephrase_prompts:
            hit, _ = decode_matches(edited, prompt, req.target)
            case_rephrase.append(bool(hit))
            n_rephrase_hits += hit
            n_rephrases += 1

        case_local = []
        for prompt, expected in case.locality_probes:
            base_cont = greedy_decode(model_before, prompt, len(expected))
            same, _ = decode_matches(edited, prompt, base_cont)
            case_local.append(bool(same))
            n_local_hits += same
            n_local += 1

        per_case.append(
            {
                "edit_success": bool(ok),
                "rephrase_hits": case_rephrase,
                "locality_hits": case_local,
            }
        )

    report = MetricsReport(
        edit_success=n_success / len(cases) if cases else 0.0,
        locality=n_local_hits / n_local if n_local else 0.0,
        portability=n_rephrase_hits / n_rephrases if n_rephrases else 0.0,
        per_case=per_case,
    )
    if edit_reports:
        report.telemetry = {
            "mean_steps": float(np.mean([r.steps_used for r in edit_reports])),
            "total_forward_calls": int(sum(r.forward_calls for r in edit_reports)),
            "total_matmul_flops": int(sum(r.matmul_flops for r in edit_reports)),
            "total_wall_time_s": float(sum(r.wall_time_s for r in edit_reports)),
            "peak_memory_bytes": max(
                (r.peak_memory_bytes or 0) for r in edit_reports
            ),
        }
    return report


def run_editing_suite(
    model: ModelBundle,
    cases: Sequence[EvalCase],
    config: ZOConfig,
    cov: CovarianceEstimate,
    prefix_corpus: Optional[Sequence[Sequence[int]]] = None,
    n_prefixes: int = 4,
) -> tuple:
    """Edit every case independently on the base model; returns
    (MetricsReport, [EditReport])."""
    edited = []
    reports = []
    for case in cases:
        try:
            bundle, rep = edit(
                model,
                case.request,
                config,
                cov,
                prefix_corpus=prefix_corpus,
                n_prefixes=n_prefixes,
            )
        except EditFailure as e:
            bundle, rep = model, e.report  # failed edit: score the unedited model
        edited.append(bundle)
        reports.append(rep)
    metrics = evaluate(model, edited, cases, edit_reports=reports)
    return metrics, reports


ABLATION_VARIANTS = ("zo", "zo+earlystop", "zo+cache", "full")


def variant_config(base: ZOConfig, variant: str) -> ZOConfig:
    flags = {
        "zo": (False, False),
        "zo+earlystop": (True, False),
        "zo+cache": (False, True),
        "full": (True, True),
    }
    if variant not in flags:
        raise InputError(f"unknown variant {variant!r} (choose from {ABLATION_VARIANTS})")
    early, cache = flags[variant]
    return replace(base, use_early_stop=early, use_prefix_cache=cache)


def ablation_run(
    model: ModelBundle,
    cases: Sequence[EvalCase],
    variants: Sequence[str],
    config: ZOConfig,
    cov: CovarianceEstimate,
    prefix_corpus: Optional[Sequence[Sequence[int]]] = None,
    n_prefixes: int = 4,
) -> dict:
    """Run the editing suite once per variant with identical seeds; report
    per-variant mean steps, forward calls, FLOPs, wall time, edit success."""
    out = {}
    for variant in variants:
        cfg = variant_config(config, variant)
        t0 = time.perf_counter()
        with telemetry.CounterDelta() as delta:
            metrics, reports = run_editing_suite(
                model, cases, cfg, cov, prefix_corpus=prefix_corpus, n_prefixes=n_prefixes
            )
        out[variant] = {
            "edit_success": metrics.edit_success,
            "locality": metrics.locality,
            "portability": metrics.portability,
            "mean_steps": float(np.mean([r.steps_used for r in reports])),
            "forward_calls": delta.forward_calls,
            "matmul_flops": delta.matmul_flops,
            "wall_time_s": time.perf_counter() - t0,
        }
    return out
