"""Layer 2: evidence-checked review of home-address and alphanumeric
candidates.

The verifier backend must answer with JSON of exactly this shape::

    {"home_address_reviews": [{"text", "decision", "reason", "evidence"}, ...],
     "alphanumeric_reviews": [...]}

with one review per candidate, in candidate order, text matching
character-for-character. ``parse_verifier_output`` enforces every
narrative-independent rule (shape, decision tokens, KEEP/DROP carry
non-empty evidence, UNCERTAIN carries ""); ``check_evidence`` enforces the
narrative-dependent rule that KEEP/DROP evidence is a verbatim substring,
demoting violators to UNCERTAIN rather than failing.

Malformed completions are re-prompted with the validation error appended,
up to ``max_repair_attempts`` times; after that every candidate is treated
as UNCERTAIN and the policy applied (fail-safe: never a silent DROP). The
whole stage touches only the two ambiguous categories; name, phone and
email candidates pass through untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import TYPE_CHECKING, Callable, NamedTuple

from . import gateway
from .extract import Candidate, CandidateSet
from .gateway import BackendConfig, GatewayError
from .tags import PiiCategory

if TYPE_CHECKING:
    from .corpus import Narrative

KEEP = "KEEP"
DROP = "DROP"
UNCERTAIN = "UNCERTAIN"
DECISIONS = (KEEP, DROP, UNCERTAIN)

RETAINED = "retained"
REMOVED = "removed"

AMBIGUOUS_CATEGORIES = (PiiCategory.HOME_ADDRESS, PiiCategory.ALPHANUMERIC)

_REVIEW_FIELDS = {"text", "decision", "reason", "evidence"}
_OUTPUT_KEYS = {"home_address_reviews", "alphanumeric_reviews"}


class VerifierFormatError(ValueError):
    """Base error for completions violating the output contract."""


class NotJson(VerifierFormatError):
    pass


class SchemaMismatch(VerifierFormatError):
    pass


class AlignmentViolation(VerifierFormatError):
    pass


@dataclass(frozen=True)
class VerifierReview:
    text: str
    decision: str
    reason: str
    evidence: str


@dataclass(frozen=True)
class VerifierOutput:
    home_address_reviews: tuple[VerifierReview, ...]
    alphanumeric_reviews: tuple[VerifierReview, ...]

    def reviews_for(self, category: PiiCategory) -> tuple[VerifierReview, ...]:
        if category is PiiCategory.HOME_ADDRESS:
            return self.home_address_reviews
        if category is PiiCategory.ALPHANUMERIC:
            return self.alphanumeric_reviews
        raise KeyError(category)


@dataclass(frozen=True)
class VerifierPolicy:
    """What to do with UNCERTAIN reviews: keep (recall-first) or drop."""

    uncertain_action: str = "keep"

    def __post_init__(self) -> None:
        if self.uncertain_action not in ("keep", "drop"):
            raise ValueError("uncertain_action must be 'keep' or 'drop'")

    @property
    def label(self) -> str:
        return "recall_first" if self.uncertain_action == "keep" else "precision_first"

    @classmethod
    def recall_first(cls) -> "VerifierPolicy":
        return cls("keep")

    @classmethod
    def precision_first(cls) -> "VerifierPolicy":
        return cls("drop")


_AUDIT_FIELD_ORDER = (
    "narrative_id",
    "category",
    "text",
    "decision",
    "reason",
    "evidence",
    "policy_applied",
    "final_action",
    "backend_id",
    "timestamp",
)


@dataclass(frozen=True)
class AuditRecord:
    narrative_id: str
    category: PiiCategory
    review: VerifierReview
    policy_applied: str
    final_action: str
    backend_id: str
    timestamp: str

    def to_json_line(self) -> str:
        flat = {
            "narrative_id": self.narrative_id,
            "category": self.category.value,
            "text": self.review.text,
            "decision": self.review.decision,
            "reason": self.review.reason,
            "evidence": self.review.evidence,
            "policy_applied": self.policy_applied,
            "final_action": self.final_action,
            "backend_id": self.backend_id,
            "timestamp": self.timestamp,
        }
        ordered = {key: flat[key] for key in _AUDIT_FIELD_ORDER}
        return json.dumps(ordered, ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_json_line(cls, line: str) -> "AuditRecord":
        obj = json.loads(line)
        return cls(
            narrative_id=obj["narrative_id"],
            category=PiiCategory(obj["category"]),
            review=VerifierReview(
                text=obj["text"],
                decision=obj["decision"],
                reason=obj["reason"],
                evidence=obj["evidence"],
            ),
            policy_applied=obj["policy_applied"],
            final_action=obj["final_action"],
            backend_id=obj["backend_id"],
            timestamp=obj["timestamp"],
        )


def rfc3339_now() -> str:
    return (
        datetime.now(timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")
    )


def _parse_review(item: object, list_name: str, index: int) -> VerifierReview:
    if not isinstance(item, dict):
        raise SchemaMismatch(f"{list_name}[{index}] is not an object")
    if set(item.keys()) != _REVIEW_FIELDS:
        raise SchemaMismatch(
            f"{list_name}[{index}] must have exactly the fields "
            f"text, decision, reason, evidence"
        )
    for fieldname in _REVIEW_FIELDS:
        if not isinstance(item[fieldname], str):
            raise SchemaMismatch(f"{list_name}[{index}].{fieldname} is not a string")
    if item["decision"] not in DECISIONS:
        raise SchemaMismatch(
            f"{list_name}[{index}].decision is {item['decision']!r}, "
            f"expected KEEP, DROP or UNCERTAIN"
        )
    if item["text"] == "":
        raise SchemaMismatch(f"{list_name}[{index}].text is an empty string")
    if item["decision"] in (KEEP, DROP) and item["evidence"] == "":
        raise SchemaMismatch(
            f"{list_name}[{index}] has decision {item['decision']} "
            f"without evidence"
        )
    if item["decision"] == UNCERTAIN and item["evidence"] != "":
        raise SchemaMismatch(
            f"{list_name}[{index}] is UNCERTAIN but carries non-empty evidence"
        )
    return VerifierReview(
        text=item["text"],
        decision=item["decision"],
        reason=item["reason"],
        evidence=item["evidence"],
    )


def _check_alignment(
    reviews: tuple[VerifierReview, ...], candidates: list[str], list_name: str
) -> None:
    if len(reviews) != len(candidates):
        raise AlignmentViolation(
            f"{list_name} has {len(reviews)} reviews for "
            f"{len(candidates)} candidates"
        )
    for index, (review, candidate) in enumerate(zip(reviews, candidates)):
        if review.text != candidate:
            raise AlignmentViolation(
                f"{list_name}[{index}].text {review.text!r} does not equal "
                f"candidate {candidate!r}"
            )


def parse_verifier_output(
    completion_text: str,
    home_candidates: list[str],
    alnum_candidates: list[str],
) -> VerifierOutput:
    """Validate a completion against the output contract.

    Raises NotJson, SchemaMismatch or AlignmentViolation; the message is
    suitable for feeding back to the backend in a repair prompt.
    """
    try:
        obj = json.loads(completion_text)
    except json.JSONDecodeError:
        raise NotJson("completion is not valid JSON") from None
    if not isinstance(obj, dict):
        raise SchemaMismatch("completion is not a JSON object")
    if set(obj.keys()) != _OUTPUT_KEYS:
        raise SchemaMismatch(
            "completion must have exactly the keys home_address_reviews "
            "and alphanumeric_reviews"
        )
    parsed: dict[str, tuple[VerifierReview, ...]] = {}
    for list_name in ("home_address_reviews", "alphanumeric_reviews"):
        raw = obj[list_name]
        if not isinstance(raw, list):
            raise SchemaMismatch(f"{list_name} is not a list")
        parsed[list_name] = tuple(
            _parse_review(item, list_name, i) for i, item in enumerate(raw)
        )
    output = VerifierOutput(
        home_address_reviews=parsed["home_address_reviews"],
        alphanumeric_reviews=parsed["alphanumeric_reviews"],
    )
    _check_alignment(output.home_address_reviews, home_candidates, "home_address_reviews")
    _check_alignment(output.alphanumeric_reviews, alnum_candidates, "alphanumeric_reviews")
    return output


DEMOTION_NOTE = "[demoted: evidence not found verbatim in narrative]"


def check_evidence(review: VerifierReview, narrative_text: str) -> VerifierReview:
    """Enforce verbatim evidence; violations demote to UNCERTAIN, never fail."""
    if review.decision in (KEEP, DROP):
        if review.evidence and review.evidence in narrative_text:
            return review
        return VerifierReview(
            text=review.text,
            decision=UNCERTAIN,
            reason=f"{review.reason} {DEMOTION_NOTE}".strip(),
            evidence="",
        )
    if review.evidence:
        return replace(review, evidence="")
    return review


def final_action(decision: str, policy: VerifierPolicy) -> str:
    if decision == KEEP:
        return RETAINED
    if decision == DROP:
        return REMOVED
    if decision == UNCERTAIN:
        return RETAINED if policy.uncertain_action == "keep" else REMOVED
    raise ValueError(f"unknown decision {decision!r}")


def apply_policy(
    output: VerifierOutput,
    candidates: CandidateSet,
    policy: VerifierPolicy,
    *,
    backend_id: str = "",
    timestamp: str = "",
    policy_applied: str | None = None,
) -> tuple[CandidateSet, list[AuditRecord]]:
    """Materialize reviews: DROP removes, KEEP retains, UNCERTAIN per policy.

    Name/phone/email candidates pass through untouched. Emits one audit
    record per reviewed candidate.
    """
    label = policy_applied if policy_applied is not None else policy.label
    final_by_category = dict(candidates.by_category)
    audit: list[AuditRecord] = []
    for category in AMBIGUOUS_CATEGORIES:
        existing = candidates.candidates(category)
        reviews = output.reviews_for(category)
        _check_alignment(
            reviews,
            [c.surface for c in existing],
            f"{category.value}_reviews",
        )
        kept: list[Candidate] = []
        for candidate, review in zip(existing, reviews):
            action = final_action(review.decision, policy)
            if action == RETAINED:
                kept.append(candidate)
            audit.append(
                AuditRecord(
                    narrative_id=candidates.narrative_id,
                    category=category,
                    review=review,
                    policy_applied=label,
                    final_action=action,
                    backend_id=backend_id,
                    timestamp=timestamp,
                )
            )
        final_by_category[category] = tuple(kept)
    final = CandidateSet(
        narrative_id=candidates.narrative_id, by_category=final_by_category
    )
    return final, audit


def repair_user_content(base_user_content: str, error_text: str) -> str:
    return (
        f"{base_user_content}\n\n"
        f"Your previous output was invalid: {error_text}. "
        f"Output JSON only, matching the schema exactly."
    )


class VerificationResult(NamedTuple):
    final: CandidateSet
    audit: list[AuditRecord]
    degraded: bool


def verify_candidates(
    narrative: "Narrative",
    candidates: CandidateSet,
    backend: BackendConfig,
    policy: VerifierPolicy,
    max_repair_attempts: int = 2,
    *,
    timestamp_fn: Callable[[], str] = rfc3339_now,
) -> VerificationResult:
    """Run the full verification stage for one narrative.

    Short-circuits without a backend call when both ambiguous categories
    are empty. Unrecoverable output or transport failure falls back to
    treating every reviewed candidate as UNCERTAIN (then the policy
    decides), flagged degraded in the result and in ``policy_applied``.
    """
    home = candidates.surfaces(PiiCategory.HOME_ADDRESS)
    alnum = candidates.surfaces(PiiCategory.ALPHANUMERIC)
    if not home and not alnum:
        return VerificationResult(candidates, [], False)

    base = gateway.build_verifier_prompt(narrative.text, home, alnum)
    request = base
    failure: str | None = None
    for _ in range(max_repair_attempts + 1):
        try:
            response = gateway.complete(request, backend)
        except GatewayError as exc:
            failure = f"verifier backend unavailable: {exc}"
            break
        try:
            output = parse_verifier_output(response.text, home, alnum)
        except VerifierFormatError as exc:
            failure = str(exc)
            request = replace(
                base, user_content=repair_user_content(base.user_content, str(exc))
            )
            continue
        checked = VerifierOutput(
            home_address_reviews=tuple(
                check_evidence(r, narrative.text) for r in output.home_address_reviews
            ),
            alphanumeric_reviews=tuple(
                check_evidence(r, narrative.text) for r in output.alphanumeric_reviews
            ),
        )
        final, audit = apply_policy(
            checked,
            candidates,
            policy,
            backend_id=response.backend_id,
            timestamp=timestamp_fn(),
        )
        return VerificationResult(final, audit, False)

    fallback = VerifierOutput(
        home_address_reviews=tuple(
            VerifierReview(
                text=surface,
                decision=UNCERTAIN,
                reason=f"verifier unavailable or output unrecoverable: {failure}",
                evidence="",
            )
            for surface in home
        ),
        alphanumeric_reviews=tuple(
            VerifierReview(
                text=surface,
                decision=UNCERTAIN,
                reason=f"verifier unavailable or output unrecoverable: {failure}",
                evidence="",
            )
            for surface in alnum
        ),
    )
    final, audit = apply_policy(
        fallback,
        candidates,
        policy,
        backend_id=backend.backend_id,
        timestamp=timestamp_fn(),
        policy_applied=f"{policy.label}+uncertain_fallback",
    )
    return VerificationResult(final, audit, True)
