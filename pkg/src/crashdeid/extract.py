"""Layer 1: hybrid extraction under the fixed responsibility split.

Phone and email candidates come from the rule recognizers only; name,
home-address and alphanumeric candidates come from the LLM channel only.
The split is enforced structurally when a CandidateSet is built, not left
to caller discipline.

For the two most ambiguous categories the LLM tagger runs K times and the
union of candidate surfaces across runs is kept, with ``run_votes``
counting how many runs produced each surface. A run whose completion fails
the detag-equality guard is treated as hallucinated and (by default)
discarded wholesale: offsets cannot be trusted once the model rewrote the
text.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

from . import gateway, rules
from .corpus import Narrative
from .gateway import BackendConfig, GatewayError
from .tags import (
    LLM_CATEGORIES,
    RULE_CATEGORIES,
    CATEGORY_ORDER,
    PiiCategory,
    PiiSpan,
    TagError,
    contains_delimiter_sequence,
    detag_equals,
    parse_tagged,
)

SOURCE_RULE = "rule"
SOURCE_LLM_SINGLE = "llm_single"
SOURCE_LLM_ENSEMBLE = "llm_ensemble"

_RULE_SOURCES = {SOURCE_RULE}
_LLM_SOURCES = {SOURCE_LLM_SINGLE, SOURCE_LLM_ENSEMBLE}


class AllRunsFailed(RuntimeError):
    """Every ensemble run failed at the gateway."""


class ResponsibilitySplitViolation(ValueError):
    """A candidate was attributed to a channel that does not own its category."""


@dataclass(frozen=True)
class Candidate:
    """One candidate PII surface for a narrative."""

    surface: str
    source: str
    run_votes: int = 1
    first_offset: int = -1


@dataclass(frozen=True)
class CandidateSet:
    """Per-narrative candidates, one deduplicated list per category."""

    narrative_id: str
    by_category: dict[PiiCategory, tuple[Candidate, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for category in CATEGORY_ORDER:
            self.by_category.setdefault(category, ())
        for category, candidates in self.by_category.items():
            seen: set[str] = set()
            for candidate in candidates:
                if category in RULE_CATEGORIES and candidate.source not in _RULE_SOURCES:
                    raise ResponsibilitySplitViolation(
                        f"{category.value} candidate {candidate.surface!r} "
                        f"from non-rule source {candidate.source!r}"
                    )
                if category in LLM_CATEGORIES and candidate.source not in _LLM_SOURCES:
                    raise ResponsibilitySplitViolation(
                        f"{category.value} candidate {candidate.surface!r} "
                        f"from non-LLM source {candidate.source!r}"
                    )
                if candidate.surface in seen:
                    raise ValueError(
                        f"duplicate {category.value} surface {candidate.surface!r}"
                    )
                seen.add(candidate.surface)

    def candidates(self, category: PiiCategory) -> tuple[Candidate, ...]:
        return self.by_category.get(category, ())

    def surfaces(self, category: PiiCategory) -> list[str]:
        return [c.surface for c in self.candidates(category)]

    def total(self) -> int:
        return sum(len(v) for v in self.by_category.values())


@dataclass(frozen=True)
class EnsembleConfig:
    k_runs: int = 5
    ensemble_categories: frozenset[PiiCategory] = frozenset(
        {PiiCategory.HOME_ADDRESS, PiiCategory.ALPHANUMERIC}
    )
    discard_hallucinated_runs: bool = True

    def __post_init__(self) -> None:
        if self.k_runs < 1:
            raise ValueError("k_runs must be >= 1")
        if not self.ensemble_categories <= set(PiiCategory):
            raise ValueError("ensemble_categories must be PII categories")


class SingleRun(NamedTuple):
    spans: list[PiiSpan]
    hallucinated: bool


def extract_single_run(
    narrative: Narrative,
    backend: BackendConfig,
    *,
    seed: int | None = None,
    temperature: float = gateway.DEFAULT_EXTRACTION_TEMPERATURE,
    discard_hallucinated: bool = True,
) -> SingleRun:
    """One tagging run: prompt, complete, guard, parse.

    Returns spans restricted to the LLM-owned categories; rule-owned tags
    in the completion are discarded. A completion that fails detag
    equality (or does not parse) counts as hallucinated; under the discard
    policy it contributes no spans. Gateway errors propagate.
    """
    if not narrative.text:
        raise ValueError("narrative text must be non-empty")
    request = gateway.build_extraction_prompt(
        narrative.text, temperature=temperature, seed=seed
    )
    response = gateway.complete(request, backend)
    hallucinated = not detag_equals(response.text, narrative.text)
    spans: list[PiiSpan] = []
    if not hallucinated:
        try:
            _, parsed = parse_tagged(response.text)
        except TagError:
            hallucinated = True
        else:
            spans = [s for s in parsed if s.category in LLM_CATEGORIES]
    if hallucinated and discard_hallucinated:
        return SingleRun([], True)
    if hallucinated:
        # Salvage mode: recover surfaces from the rewritten completion when
        # they still occur in the narrative; offsets are re-anchored there.
        try:
            _, parsed = parse_tagged(response.text)
        except TagError:
            return SingleRun([], True)
        spans = []
        for span in parsed:
            if span.category not in LLM_CATEGORIES:
                continue
            offset = narrative.text.find(span.surface)
            if offset >= 0:
                spans.append(
                    PiiSpan(span.category, offset, offset + len(span.surface), span.surface)
                )
        return SingleRun(spans, True)
    return SingleRun(spans, False)


@dataclass(frozen=True)
class EnsembleResult:
    """LLM-channel candidate fragment plus per-run accounting."""

    by_category: dict[PiiCategory, tuple[Candidate, ...]]
    runs_attempted: int
    runs_failed: int
    runs_discarded: int

    @property
    def effective_runs(self) -> int:
        return self.runs_attempted - self.runs_failed - self.runs_discarded


def _candidates_from_votes(
    narrative: Narrative,
    votes: dict[str, int],
    source: str,
) -> tuple[Candidate, ...]:
    candidates = [
        Candidate(
            surface=surface,
            source=source,
            run_votes=count,
            first_offset=narrative.text.find(surface),
        )
        for surface, count in votes.items()
    ]
    candidates.sort(key=lambda c: (c.first_offset, c.surface))
    return tuple(candidates)


def extract_ensemble(
    narrative: Narrative,
    backend: BackendConfig,
    cfg: EnsembleConfig,
    *,
    base_seed: int | None = None,
    temperature: float = gateway.DEFAULT_EXTRACTION_TEMPERATURE,
) -> EnsembleResult:
    """Run the tagger K times and pool candidates.

    Ensemble categories take the union of surfaces across non-discarded
    runs (``run_votes`` = number of producing runs); the other LLM
    categories take run 1's output only. With ``base_seed`` set, run i
    uses seed ``base_seed + i`` so scripted mocks can represent distinct
    sampled runs.
    """
    runs: list[SingleRun | None] = []
    failed = 0
    for i in range(cfg.k_runs):
        seed = base_seed + i if base_seed is not None else None
        try:
            runs.append(
                extract_single_run(
                    narrative,
                    backend,
                    seed=seed,
                    temperature=temperature,
                    discard_hallucinated=cfg.discard_hallucinated_runs,
                )
            )
        except GatewayError:
            runs.append(None)
            failed += 1
    if failed == cfg.k_runs:
        raise AllRunsFailed(
            f"all {cfg.k_runs} extraction runs failed for narrative "
            f"{narrative.id!r}"
        )
    discarded = sum(
        1
        for run in runs
        if run is not None and run.hallucinated and cfg.discard_hallucinated_runs
    )

    by_category: dict[PiiCategory, tuple[Candidate, ...]] = {}
    for category in sorted(cfg.ensemble_categories & LLM_CATEGORIES, key=CATEGORY_ORDER.index):
        votes: dict[str, int] = {}
        for run in runs:
            if run is None:
                continue
            if run.hallucinated and cfg.discard_hallucinated_runs:
                continue
            produced = {s.surface for s in run.spans if s.category is category}
            for surface in produced:
                votes[surface] = votes.get(surface, 0) + 1
        by_category[category] = _candidates_from_votes(
            narrative, votes, SOURCE_LLM_ENSEMBLE
        )

    first_run = runs[0]
    for category in LLM_CATEGORIES - cfg.ensemble_categories:
        votes = {}
        if first_run is not None:
            for span in first_run.spans:
                if span.category is category:
                    votes[span.surface] = 1
        by_category[category] = _candidates_from_votes(
            narrative, votes, SOURCE_LLM_SINGLE
        )
    return EnsembleResult(
        by_category=by_category,
        runs_attempted=cfg.k_runs,
        runs_failed=failed,
        runs_discarded=discarded,
    )


def rule_candidates(text: str) -> dict[PiiCategory, tuple[Candidate, ...]]:
    """Phone/email candidates from the rule recognizers, deduped by surface."""
    out: dict[PiiCategory, tuple[Candidate, ...]] = {}
    for category, matches in (
        (PiiCategory.PHONE, rules.find_phones(text)),
        (PiiCategory.EMAIL, rules.find_emails(text)),
    ):
        candidates: list[Candidate] = []
        seen: set[str] = set()
        for match in matches:
            if match.span.surface in seen:
                continue
            seen.add(match.span.surface)
            candidates.append(
                Candidate(
                    surface=match.span.surface,
                    source=SOURCE_RULE,
                    run_votes=1,
                    first_offset=match.span.start,
                )
            )
        out[category] = tuple(candidates)
    return out


def candidate_set_from_spans(
    narrative: Narrative, spans: list[PiiSpan], source: str = SOURCE_LLM_SINGLE
) -> CandidateSet:
    """Build an LLM-only CandidateSet from one run's spans (baseline preset)."""
    by_category: dict[PiiCategory, tuple[Candidate, ...]] = {}
    for category in LLM_CATEGORIES:
        votes = {s.surface: 1 for s in spans if s.category is category}
        by_category[category] = _candidates_from_votes(narrative, votes, source)
    return CandidateSet(narrative_id=narrative.id, by_category=by_category)


def hybrid_extract(
    narrative: Narrative,
    backend: BackendConfig,
    cfg: EnsembleConfig,
    *,
    base_seed: int | None = None,
    temperature: float = gateway.DEFAULT_EXTRACTION_TEMPERATURE,
) -> CandidateSet:
    """Rules for phone/email, LLM channel for the rest, merged into one set.

    An LLM candidate whose surface equals or sits inside a rule match is
    suppressed: rules are the authority for their own span text. Narratives
    whose source text already contains a tag delimiter skip the LLM channel
    entirely (the tag protocol cannot represent them) and keep rule
    candidates only.
    """
    merged = rule_candidates(narrative.text)
    if contains_delimiter_sequence(narrative.text):
        for category in LLM_CATEGORIES:
            merged[category] = ()
        return CandidateSet(narrative_id=narrative.id, by_category=merged)

    ensemble = extract_ensemble(
        narrative, backend, cfg, base_seed=base_seed, temperature=temperature
    )
    rule_surfaces = [
        c.surface
        for category in RULE_CATEGORIES
        for c in merged.get(category, ())
    ]
    for category, candidates in ensemble.by_category.items():
        merged[category] = tuple(
            c
            for c in candidates
            if not any(c.surface in surface for surface in rule_surfaces)
        )
    return CandidateSet(narrative_id=narrative.id, by_category=merged)
