"""Two-call suggester: pattern analysis, then improvement suggestions."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Any, Sequence

from .analyzer import AdversarialSample, Explanation, Region
from .dsl import HeuristicProgram
from .llm import BackendError, LlmBackend, extract_json
from .prompts import FORMAT_REMINDER, PromptBundle, build_pattern_prompt, build_suggestion_prompt

logger = logging.getLogger(__name__)

_ITEM = re.compile(r"^\s*(?:\*\*)?(\d+)[.)](?:\*\*)?\s+(.*)$")
_NAME_JUNK = " \t*\"'“”_#"


@dataclass(frozen=True)
class Pattern:
    name: str
    description: str

    def to_dict(self) -> dict:
        return {"pattern_name": self.name, "description": self.description}


@dataclass(frozen=True)
class PatternReport:
    """Named failure patterns; ``patterns == ()`` is the explicit empty marker."""

    patterns: tuple[Pattern, ...]
    region_id: str = ""
    raw_text: str = ""

    @property
    def empty(self) -> bool:
        return not self.patterns

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.patterns]

    def to_dict(self) -> dict:
        return {"region": self.region_id, "empty": self.empty, "patterns": [p.to_dict() for p in self.patterns]}


def _split_header(header: str) -> tuple[str, str]:
    if ":" in header:
        name, rest = header.split(":", 1)
        return name.strip(_NAME_JUNK), rest.strip()
    return header.strip(_NAME_JUNK), ""


def parse_patterns(text: str, region_id: str = "") -> PatternReport:
    """Parse a numbered list ``1. Name: description``.

    Items must be numbered 1, 2, 3, ... in order; otherwise the whole text
    becomes a single unnamed pattern. Never raises.
    """
    if not text or not text.strip():
        return PatternReport((), region_id, text or "")
    lines = text.strip().splitlines()
    items: list[tuple[int, str, list[str]]] = []
    preamble = True
    for line in lines:
        m = _ITEM.match(line)
        if m and (not items or int(m.group(1)) == items[-1][0] + 1 or preamble):
            items.append((int(m.group(1)), m.group(2), []))
            preamble = False
        elif m and int(m.group(1)) != items[-1][0] + 1:
            items = []
            break
        elif items:
            items[-1][2].append(line.strip())
    if not items or items[0][0] != 1:
        return PatternReport((Pattern("", text.strip()),), region_id, text)
    patterns = []
    for _, header, body in items:
        name, first = _split_header(header)
        desc = " ".join(x for x in [first, *body] if x)
        patterns.append(Pattern(name, desc))
    return PatternReport(tuple(patterns), region_id, text)


@dataclass(frozen=True)
class Suggestion:
    idea: str
    reasoning: str
    region_id: str
    backend_id: str
    template_id: str

    def to_dict(self) -> dict:
        return {
            "idea": self.idea,
            "reasoning": self.reasoning,
            "region": self.region_id,
            "backend": self.backend_id,
            "template_id": self.template_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Suggestion":
        return cls(d["idea"], d.get("reasoning", ""), d.get("region", ""), d.get("backend", ""),
                   d.get("template_id", ""))


def parse_suggestions(text: str) -> list[dict[str, str]]:
    """Decode the ``[{"idea": ..., "reasoning": ...}]`` reply; raises ``ValueError``."""
    try:
        data: Any = extract_json(text, "[")
    except ValueError:
        data = extract_json(text, "{")
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise ValueError("expected a JSON array")
    out = []
    for item in data:
        if not isinstance(item, dict):
            raise ValueError("array items must be objects")
        idea = item.get("idea")
        if not isinstance(idea, str) or not idea.strip():
            continue
        reasoning = item.get("reasoning", "")
        out.append({"idea": idea.strip(), "reasoning": reasoning.strip() if isinstance(reasoning, str) else ""})
    return out


def analyze_patterns(backend: LlmBackend, prompt: PromptBundle, region_id: str = "") -> PatternReport:
    text = backend.generate(list(prompt.messages), template_id=prompt.template_id)
    return parse_patterns(text, region_id)


def request_suggestions(backend: LlmBackend, prompt: PromptBundle, n: int, region_id: str = "") -> list[Suggestion]:
    """Run the suggestion call with one format-reminder retry. Never raises on bad output."""
    bundle = prompt
    for attempt in range(2):
        text = backend.generate(list(bundle.messages), template_id=bundle.template_id)
        try:
            items = parse_suggestions(text)
        except ValueError as exc:
            logger.warning("suggestion reply not parseable (attempt %d): %s", attempt + 1, exc)
            bundle = prompt.with_followup(text, FORMAT_REMINDER)
            continue
        return [
            Suggestion(it["idea"], it["reasoning"], region_id, backend.backend_id, prompt.template_id)
            for it in items[:n]
        ]
    logger.warning("no suggestions for region %s after retry; continuing without them", region_id or "?")
    return []


def suggest(
    backend: LlmBackend,
    region: Region,
    adversarial: Sequence[AdversarialSample],
    normal: Sequence[AdversarialSample],
    explanation: Explanation | None,
    program: HeuristicProgram,
    n: int,
    per_class: int = 5,
) -> tuple[PatternReport, list[Suggestion]]:
    """Pattern analysis followed by the suggestion call for one region.

    Backend failures in either call are logged and yield no suggestions.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    try:
        report = analyze_patterns(backend, build_pattern_prompt(region, adversarial, normal, per_class), region.id)
        prompt = build_suggestion_prompt(report, explanation, program, n)
        return report, request_suggestions(backend, prompt, n, region.id)
    except BackendError as exc:
        logger.error("suggester backend failure for region %s: %s", region.id, exc)
        return PatternReport((), region.id), []
