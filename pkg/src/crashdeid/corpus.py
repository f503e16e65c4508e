"""Corpus loading and pipeline output persistence.

Narratives arrive as JSONL (one ``{"id", "text"}`` object per line) or as
RFC 4180 CSV with ``id,text`` columns. Gold annotations live in a JSONL
sidecar (``{"narrative_id", "category", "surface"}``) so one corpus can be
scored against several gold versions; by convention the sidecar for
``corpus.jsonl`` is ``corpus.gold.jsonl`` and it is attached automatically
when present.

Narrative text is stored byte-for-byte as read; offsets elsewhere in the
system are Unicode scalar-value indices into that exact text.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

from .tags import PiiCategory, contains_delimiter_sequence

if TYPE_CHECKING:
    from .verify import AuditRecord


class CorpusError(ValueError):
    """Base error for corpus ingest problems."""


class MalformedRecord(CorpusError):
    """A record does not fit the input grammar; names the line and field."""


class DuplicateNarrativeId(CorpusError):
    """Two narratives share an id."""


class DanglingGoldAnnotation(CorpusError):
    """A gold annotation references an unknown narrative id."""


class GoldSurfaceMissing(CorpusError):
    """A gold surface does not occur in its narrative's text."""


@dataclass(frozen=True)
class Narrative:
    """One free-text record; the unit of processing."""

    id: str
    text: str


@dataclass(frozen=True)
class GoldAnnotation:
    """One annotated PII instance; identical surfaces count separately."""

    narrative_id: str
    category: PiiCategory
    surface: str


@dataclass(frozen=True)
class Corpus:
    narratives: tuple[Narrative, ...]
    gold: tuple[GoldAnnotation, ...] = field(default=())

    def narrative(self, narrative_id: str) -> Narrative:
        for narrative in self.narratives:
            if narrative.id == narrative_id:
                return narrative
        raise KeyError(narrative_id)

    def narrative_counts_by_category(self) -> dict[PiiCategory, int]:
        """Number of narratives carrying at least one gold instance per category."""
        bearers: dict[PiiCategory, set[str]] = {}
        for annotation in self.gold:
            bearers.setdefault(annotation.category, set()).add(
                annotation.narrative_id
            )
        return {cat: len(ids) for cat, ids in bearers.items()}

    def instance_counts_by_category(self) -> dict[PiiCategory, int]:
        """Number of gold instances per category (multiplicities included)."""
        counts: dict[PiiCategory, int] = {}
        for annotation in self.gold:
            counts[annotation.category] = counts.get(annotation.category, 0) + 1
        return counts

    def delimiter_flagged_ids(self) -> frozenset[str]:
        """Ids of narratives whose source text already contains a tag delimiter.

        These records cannot travel through the tag protocol unambiguously
        and are routed around it by the extractor.
        """
        return frozenset(
            n.id for n in self.narratives if contains_delimiter_sequence(n.text)
        )


def default_gold_path(path: Path) -> Path:
    return path.with_suffix(".gold.jsonl")


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("jsonl", "csv"):
            raise MalformedRecord(f"unsupported corpus format: {fmt!r}")
        return fmt
    if path.suffix == ".csv":
        return "csv"
    return "jsonl"


def _require_str(obj: dict, key: str, line_no: int, path: Path) -> str:
    value = obj.get(key)
    if not isinstance(value, str):
        raise MalformedRecord(
            f"{path}: line {line_no}: field {key!r} missing or not a string"
        )
    return value


def _read_narratives_jsonl(path: Path) -> list[Narrative]:
    narratives = []
    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(
                    f"{path}: line {line_no}: invalid JSON ({exc.msg})"
                ) from exc
            if not isinstance(obj, dict):
                raise MalformedRecord(
                    f"{path}: line {line_no}: record is not an object"
                )
            narratives.append(
                Narrative(
                    id=_require_str(obj, "id", line_no, path),
                    text=_require_str(obj, "text", line_no, path),
                )
            )
    return narratives


def _read_narratives_csv(path: Path) -> list[Narrative]:
    narratives = []
    with path.open(encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or not {"id", "text"} <= set(reader.fieldnames):
            raise MalformedRecord(f"{path}: line 1: header must include id,text")
        for line_no, row in enumerate(reader, start=2):
            if row.get("id") is None or row.get("text") is None:
                raise MalformedRecord(
                    f"{path}: line {line_no}: field 'id' or 'text' missing"
                )
            narratives.append(Narrative(id=row["id"], text=row["text"]))
    return narratives


def _read_gold(path: Path, by_id: dict[str, Narrative]) -> list[GoldAnnotation]:
    annotations = []
    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(
                    f"{path}: line {line_no}: invalid JSON ({exc.msg})"
                ) from exc
            if not isinstance(obj, dict):
                raise MalformedRecord(
                    f"{path}: line {line_no}: record is not an object"
                )
            narrative_id = _require_str(obj, "narrative_id", line_no, path)
            raw_category = _require_str(obj, "category", line_no, path)
            surface = _require_str(obj, "surface", line_no, path)
            try:
                category = PiiCategory(raw_category)
            except ValueError:
                raise MalformedRecord(
                    f"{path}: line {line_no}: field 'category' has unknown "
                    f"value {raw_category!r}"
                ) from None
            narrative = by_id.get(narrative_id)
            if narrative is None:
                raise DanglingGoldAnnotation(
                    f"{path}: line {line_no}: gold annotation references "
                    f"unknown narrative {narrative_id!r}"
                )
            if surface not in narrative.text:
                raise GoldSurfaceMissing(
                    f"{path}: line {line_no}: surface {surface!r} not found "
                    f"in narrative {narrative_id!r}"
                )
            annotations.append(GoldAnnotation(narrative_id, category, surface))
    return annotations


def load_corpus(
    path: str | Path,
    fmt: str | None = None,
    gold_path: str | Path | None = None,
) -> Corpus:
    """Load narratives (and gold sidecar, when present) preserving input order."""
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        narratives = _read_narratives_csv(path)
    else:
        narratives = _read_narratives_jsonl(path)

    by_id: dict[str, Narrative] = {}
    for narrative in narratives:
        if not narrative.id:
            raise MalformedRecord(f"{path}: narrative with empty id")
        if narrative.id in by_id:
            raise DuplicateNarrativeId(
                f"{path}: duplicate narrative id {narrative.id!r}"
            )
        by_id[narrative.id] = narrative

    gold: list[GoldAnnotation] = []
    sidecar = Path(gold_path) if gold_path is not None else default_gold_path(path)
    if gold_path is not None or sidecar.exists():
        gold = _read_gold(sidecar, by_id)
    return Corpus(narratives=tuple(narratives), gold=tuple(gold))


def write_corpus(corpus: Corpus, path: str | Path, fmt: str | None = None) -> None:
    """Persist a corpus (and its gold sidecar) in the load_corpus grammar."""
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        with path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["id", "text"])
            for narrative in corpus.narratives:
                writer.writerow([narrative.id, narrative.text])
    else:
        with path.open("w", encoding="utf-8") as handle:
            for narrative in corpus.narratives:
                handle.write(
                    json.dumps(
                        {"id": narrative.id, "text": narrative.text},
                        ensure_ascii=False,
                    )
                    + "\n"
                )
    if corpus.gold:
        with default_gold_path(path).open("w", encoding="utf-8") as handle:
            for annotation in corpus.gold:
                handle.write(
                    json.dumps(
                        {
                            "narrative_id": annotation.narrative_id,
                            "category": annotation.category.value,
                            "surface": annotation.surface,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )


def write_audit_log(path: str | Path, records: Iterable["AuditRecord"]) -> None:
    """Append audit records as JSONL; serialization is deterministic so the
    same records always append the same bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as handle:
        for record in records:
            handle.write(record.to_json_line() + "\n")


def read_audit_log(path: str | Path) -> list["AuditRecord"]:
    from .verify import AuditRecord

    records = []
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                records.append(AuditRecord.from_json_line(line))
    return records


def write_redacted(
    path: str | Path, rows: Iterable[tuple[str, str, bool]]
) -> None:
    """Write redacted output JSONL: {"id", "redacted_text", "pii_found"}."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for narrative_id, redacted_text, pii_found in rows:
            handle.write(
                json.dumps(
                    {
                        "id": narrative_id,
                        "redacted_text": redacted_text,
                        "pii_found": pii_found,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
