"""End-to-end orchestration of the de-identification workflow.

Presets select which stages run:

    rules_only   phone/email rule recognizers, no backends
    llm_single   one LLM tagging run for the context-dependent categories
    hybrid       rules + LLM channel (ensemble on the ambiguous categories)
    hybrid_ev    hybrid + evidence-checked verifier on those categories

A run writes ``redacted.jsonl``, ``audit.jsonl`` (when the verifier ran)
and ``manifest.json`` into the output directory. The manifest snapshot
fully determines the run and can be replayed. Narratives that fail are
listed as unprocessed; they are never emitted unredacted.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .corpus import Corpus, Narrative, load_corpus, write_audit_log, write_redacted
from .evalkit import MetricsReport, build_report, write_report
from .extract import (
    AllRunsFailed,
    CandidateSet,
    EnsembleConfig,
    candidate_set_from_spans,
    extract_single_run,
    hybrid_extract,
    rule_candidates,
)
from .gateway import BackendConfig, GatewayError
from .redact import RedactionStyle, RedactionCollision, SurfaceNotFound, render
from .tags import PiiCategory, contains_delimiter_sequence
from .verify import AuditRecord, VerifierPolicy, rfc3339_now, verify_candidates

PRESETS = ("rules_only", "llm_single", "hybrid", "hybrid_ev")
MASKED_TIMESTAMP = "1970-01-01T00:00:00Z"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    preset: str
    ensemble: EnsembleConfig = EnsembleConfig()
    policy: VerifierPolicy = VerifierPolicy.recall_first()
    extractor_backend: BackendConfig | None = None
    verifier_backend: BackendConfig | None = None
    output_style: RedactionStyle = RedactionStyle()
    parallelism: int = 1
    seed: int | None = None
    mask_timestamps: bool = False

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.preset in ("llm_single", "hybrid", "hybrid_ev"):
            if self.extractor_backend is None:
                raise ConfigError(f"preset {self.preset} requires an extractor backend")
        if self.preset == "hybrid_ev" and self.verifier_backend is None:
            raise ConfigError("preset hybrid_ev requires a verifier backend")


@dataclass
class NarrativeResult:
    narrative: Narrative
    final: CandidateSet | None = None
    audit: list[AuditRecord] = field(default_factory=list)
    degraded: bool = False
    error: str | None = None


def _empty_set(narrative: Narrative) -> CandidateSet:
    return CandidateSet(narrative_id=narrative.id)


def _extract(narrative: Narrative, config: PipelineConfig) -> CandidateSet:
    if config.preset == "rules_only":
        return CandidateSet(
            narrative_id=narrative.id,
            by_category=rule_candidates(narrative.text),
        )
    if config.preset == "llm_single":
        if contains_delimiter_sequence(narrative.text):
            return _empty_set(narrative)
        run = extract_single_run(
            narrative,
            config.extractor_backend,
            seed=config.seed,
            discard_hallucinated=config.ensemble.discard_hallucinated_runs,
        )
        return candidate_set_from_spans(narrative, run.spans)
    return hybrid_extract(
        narrative, config.extractor_backend, config.ensemble, base_seed=config.seed
    )


def process_narrative(narrative: Narrative, config: PipelineConfig) -> NarrativeResult:
    result = NarrativeResult(narrative=narrative)
    if not narrative.text:
        result.final = _empty_set(narrative)
        return result
    try:
        candidates = _extract(narrative, config)
        if config.preset == "hybrid_ev":
            timestamp_fn = (
                (lambda: MASKED_TIMESTAMP) if config.mask_timestamps else rfc3339_now
            )
            verification = verify_candidates(
                narrative,
                candidates,
                config.verifier_backend,
                config.policy,
                timestamp_fn=timestamp_fn,
            )
            result.final = verification.final
            result.audit = verification.audit
            result.degraded = verification.degraded
        else:
            result.final = candidates
    except (GatewayError, AllRunsFailed, ValueError) as exc:
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def execute(corpus: Corpus, config: PipelineConfig) -> list[NarrativeResult]:
    """Process every narrative, preserving input order in the results."""
    if config.parallelism == 1:
        return [process_narrative(n, config) for n in corpus.narratives]
    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        return list(pool.map(lambda n: process_narrative(n, config), corpus.narratives))


def config_snapshot(
    config: PipelineConfig, input_path: str, fmt: str | None, gold_path: str | None
) -> dict:
    def backend_dict(backend: BackendConfig | None) -> dict | None:
        if backend is None:
            return None
        return {
            "kind": backend.kind,
            "endpoint_url": backend.endpoint_url,
            "model_name": backend.model_name,
            "fixture_path": str(backend.fixture_path) if backend.fixture_path else None,
            "timeout": backend.timeout,
            "retries": backend.retries,
        }

    return {
        "preset": config.preset,
        "k_runs": config.ensemble.k_runs,
        "ensemble_categories": sorted(
            c.value for c in config.ensemble.ensemble_categories
        ),
        "discard_hallucinated_runs": config.ensemble.discard_hallucinated_runs,
        "policy": config.policy.label,
        "redaction": {
            "mode": config.output_style.mode,
            "placeholders": {
                c.value: p for c, p in config.output_style.placeholder_map.items()
            },
        },
        "parallelism": config.parallelism,
        "seed": config.seed,
        "mask_timestamps": config.mask_timestamps,
        "extractor_backend": backend_dict(config.extractor_backend),
        "verifier_backend": backend_dict(config.verifier_backend),
        "input": input_path,
        "format": fmt,
        "gold": gold_path,
    }


def config_from_snapshot(snapshot: dict) -> PipelineConfig:
    def backend_from(obj: dict | None) -> BackendConfig | None:
        if obj is None:
            return None
        return BackendConfig(
            kind=obj["kind"],
            endpoint_url=obj.get("endpoint_url"),
            model_name=obj.get("model_name"),
            fixture_path=obj.get("fixture_path"),
            timeout=obj.get("timeout", 30.0),
            retries=obj.get("retries", 2),
        )

    policy = (
        VerifierPolicy.recall_first()
        if snapshot["policy"] == "recall_first"
        else VerifierPolicy.precision_first()
    )
    return PipelineConfig(
        preset=snapshot["preset"],
        ensemble=EnsembleConfig(
            k_runs=snapshot["k_runs"],
            ensemble_categories=frozenset(
                PiiCategory(v) for v in snapshot["ensemble_categories"]
            ),
            discard_hallucinated_runs=snapshot["discard_hallucinated_runs"],
        ),
        policy=policy,
        extractor_backend=backend_from(snapshot.get("extractor_backend")),
        verifier_backend=backend_from(snapshot.get("verifier_backend")),
        output_style=RedactionStyle(
            mode=snapshot["redaction"]["mode"],
            placeholder_map={
                PiiCategory(k): v
                for k, v in snapshot["redaction"]["placeholders"].items()
            },
        ),
        parallelism=snapshot["parallelism"],
        seed=snapshot.get("seed"),
        mask_timestamps=snapshot.get("mask_timestamps", False),
    )


@dataclass
class RunSummary:
    narratives: int
    processed: int
    failed_narratives: list[str]
    counts: dict
    wall_time_s: float
    output_dir: Path

    @property
    def ok(self) -> bool:
        return not self.failed_narratives


def run_pipeline(
    config: PipelineConfig,
    input_path: str | Path,
    output_dir: str | Path,
    fmt: str | None = None,
    gold_path: str | Path | None = None,
) -> RunSummary:
    """Process the corpus and write redacted output, audit log and manifest."""
    started = time.monotonic()
    corpus = load_corpus(input_path, fmt=fmt, gold_path=gold_path)
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    results = execute(corpus, config)

    rows = []
    audit: list[AuditRecord] = []
    failed: list[str] = []
    candidates_by_category = {c.value: 0 for c in PiiCategory}
    decisions = {"kept": 0, "dropped": 0, "uncertain": 0}
    degraded = 0
    for result in results:
        if result.error is not None or result.final is None:
            failed.append(result.narrative.id)
            continue
        try:
            redacted = render(result.narrative, result.final, config.output_style)
        except (RedactionCollision, SurfaceNotFound) as exc:
            result.error = f"{type(exc).__name__}: {exc}"
            failed.append(result.narrative.id)
            continue
        rows.append((result.narrative.id, redacted, result.final.total() > 0))
        for category in PiiCategory:
            candidates_by_category[category.value] += len(
                result.final.candidates(category)
            )
        audit.extend(result.audit)
        degraded += int(result.degraded)
    for record in audit:
        if record.review.decision == "KEEP":
            decisions["kept"] += 1
        elif record.review.decision == "DROP":
            decisions["dropped"] += 1
        else:
            decisions["uncertain"] += 1

    write_redacted(output_dir / "redacted.jsonl", rows)
    if config.preset == "hybrid_ev":
        audit_path = output_dir / "audit.jsonl"
        audit_path.unlink(missing_ok=True)
        write_audit_log(audit_path, audit)

    counts = {
        "narratives": len(corpus.narratives),
        "processed": len(rows),
        "failed": len(failed),
        "degraded": degraded,
        "candidates_by_category": candidates_by_category,
        **decisions,
    }
    wall_time = 0.0 if config.mask_timestamps else time.monotonic() - started
    manifest = {
        "tool": "crashdeid",
        "version": __version__,
        "config": config_snapshot(
            config,
            str(input_path),
            fmt,
            str(gold_path) if gold_path else None,
        ),
        "counts": counts,
        "failed_narratives": failed,
        "wall_time_s": wall_time,
        "started_at": MASKED_TIMESTAMP if config.mask_timestamps else rfc3339_now(),
    }
    (output_dir / "manifest.json").write_text(
        json.dumps(manifest, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    return RunSummary(
        narratives=len(corpus.narratives),
        processed=len(rows),
        failed_narratives=failed,
        counts=counts,
        wall_time_s=wall_time,
        output_dir=output_dir,
    )


def replay_manifest(manifest_path: str | Path, output_dir: str | Path) -> RunSummary:
    """Re-run a recorded manifest; outputs are reproduced byte-for-byte."""
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    snapshot = manifest["config"]
    config = config_from_snapshot(snapshot)
    return run_pipeline(
        config,
        snapshot["input"],
        output_dir,
        fmt=snapshot.get("format"),
        gold_path=snapshot.get("gold"),
    )


def run_eval(
    config: PipelineConfig,
    input_path: str | Path,
    gold_path: str | Path,
    report_path: str | Path,
    fmt: str | None = None,
    output_dir: str | Path | None = None,
) -> MetricsReport:
    """Run the pipeline and score it against gold; writes JSON + text reports."""
    corpus = load_corpus(input_path, fmt=fmt, gold_path=gold_path)
    results = execute(corpus, config)
    predictions = {
        r.narrative.id: r.final for r in results if r.final is not None
    }
    report = build_report(corpus.gold, predictions, corpus, config.preset)
    report_path = Path(report_path)
    write_report(report, report_path, report_path.with_suffix(".txt"))
    if output_dir is not None:
        run_pipeline(config, input_path, output_dir, fmt=fmt, gold_path=gold_path)
    return report
