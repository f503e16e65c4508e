from __future__ import annotations

import json
from pathlib import Path

import pytest

from crashdeid.gateway import (
    BackendConfig,
    build_extraction_prompt,
    build_verifier_prompt,
    fixture_entry,
    write_fixture_file,
)
from crashdeid.verify import repair_user_content

FIXTURE_DIR = Path(__file__).parent / "fixtures"


def extraction_entries(
    narrative_text: str, responses_by_seed: dict[int | None, str]
) -> list[dict[str, str]]:
    """Mock-fixture entries scripting one tagging response per seed."""
    return [
        fixture_entry(build_extraction_prompt(narrative_text, seed=seed), response)
        for seed, response in responses_by_seed.items()
    ]


def verifier_entries(
    narrative_text: str,
    home: list[str],
    alnum: list[str],
    responses: list[str],
) -> list[dict[str, str]]:
    """Mock-fixture entries scripting a verifier conversation.

    ``responses[0]`` answers the initial prompt; each later response
    answers the repair prompt generated by the previous (invalid) one.
    """
    from crashdeid.verify import VerifierFormatError, parse_verifier_output

    base = build_verifier_prompt(narrative_text, home, alnum)
    entries = [fixture_entry(base, responses[0])]
    request = base
    for previous, response in zip(responses, responses[1:]):
        try:
            parse_verifier_output(previous, home, alnum)
        except VerifierFormatError as exc:
            error_text = str(exc)
        else:  # pragma: no cover - fixture authoring error
            raise AssertionError("scripted repair after a valid response")
        from dataclasses import replace

        request = replace(
            base, user_content=repair_user_content(base.user_content, error_text)
        )
        entries.append(fixture_entry(request, response))
    return entries


def mock_backend(tmp_path: Path, entries: list[dict[str, str]], name: str = "mock.jsonl") -> BackendConfig:
    path = tmp_path / name
    write_fixture_file(path, entries)
    return BackendConfig(kind="scripted_mock", fixture_path=path)


def write_corpus_jsonl(path: Path, rows: list[dict]) -> Path:
    with path.open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")
    return path


def review_obj(text: str, decision: str, reason: str = "r", evidence: str = "") -> dict:
    return {"text": text, "decision": decision, "reason": reason, "evidence": evidence}


def verifier_json(home_reviews: list[dict], alnum_reviews: list[dict]) -> str:
    return json.dumps(
        {"home_address_reviews": home_reviews, "alphanumeric_reviews": alnum_reviews}
    )


@pytest.fixture
def fig_narrative() -> str:
    return "UNIT 1 HIT THE DRIVEWAY OF 4647 HIGHWAY 47. UNIT 2 FLED THE SCENE."
