"""Prompt templates for pattern analysis, suggestions, mutation and fixing.

Renderers are pure functions of their inputs so the output can be pinned by
golden files. Programs are shown as DSL JSON inside ``json`` fences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

from .analyzer import AdversarialSample, Explanation, Region
from .dsl import HeuristicProgram

PATTERN_TEMPLATE = "pattern_analysis"
SUGGESTION_TEMPLATE = "suggest_improvement"
MUTATION_TEMPLATE = "mutation"
FIX_TEMPLATE = "fix"

MAX_EXPLANATIONS = 10

PROBLEM_DESCRIPTION = (
    "You are an expert in analyzing heuristic performance difference between the optimal solution and "
    "the heuristic solution in the Traffic Engineering problem. In this problem, we have a topology with "
    "nodes and directed edges with limited capacity. The inputs are the demands between the nodes. The "
    "goal is to route the maximum amount of traffic between the nodes in the network. Your final goal is "
    "to help design a better heuristic. Be concise and to the point."
)

DSL_REFERENCE = """\
Heuristics are programs in a small JSON language:
{"name": str, "ordering": "volume_desc" | "volume_asc" | "pair_lex", "budget_ms": int, "lineage": [str], "stages": [stage, ...]}
Demands are visited in "ordering". Stages run in sequence against shared residual capacity, and a demand may only use its candidate paths (its shortest paths by hop count, shortest first). Available stages:
- {"type": "pin_small", "threshold": number}: every demand with volume below threshold goes entirely on its shortest path if it fits there.
- {"type": "greedy_top_k", "k": int >= 1, "split": bool}: each open demand is routed over its first k paths, filling them in turn when split is true, otherwise using the first path with enough room.
- {"type": "lp_residual", "scope": "all_remaining"} or {"type": "lp_residual", "scope": "heavy_subset", "count": int >= 1}: solve the max-throughput LP for the remaining demands (or the count largest of them) on residual capacity.
- {"type": "hotspot_reopt", "util_threshold": number in (0, 1], "max_hotspots": int >= 1, "radius": int >= 1}: for the most utilized edges above the threshold, tear up flow on paths crossing the neighborhood within radius hops and re-solve it optimally.
The run stops at budget_ms and keeps whatever was routed so far."""

SUGGESTION_OUTPUT = """\
[
  {
  "idea": "...",
  "reasoning": "..."
  },
  {
  "idea": "...",
  "reasoning": "..."
  }
]"""

MUTATION_OUTPUT = """\
[
  {
  "code": {"name": "...", "ordering": "...", "budget_ms": 2000, "lineage": [], "stages": [...]},
  "reasoning": "..."
  }
]"""

FIX_SYSTEM = (
    "You are an expert heuristic developer. You are given a code that is not working as expected.\n"
    "You are given an error message. You need to fix the code."
)

FORMAT_REMINDER = (
    "Your previous answer could not be parsed. Reply with ONLY the JSON array in the required "
    "Output Format, with no text before or after it."
)


@dataclass(frozen=True)
class PromptBundle:
    messages: tuple[dict[str, str], ...]
    template_id: str

    @property
    def rendered_length(self) -> int:
        return sum(len(m["content"]) for m in self.messages)

    def render(self) -> str:
        """Flat text form, used for golden files."""
        return "\n\n".join(f"[{m['role']}]\n{m['content']}" for m in self.messages) + "\n"

    def with_followup(self, previous: str, note: str) -> "PromptBundle":
        msgs = self.messages + ({"role": "assistant", "content": previous}, {"role": "user", "content": note})
        return PromptBundle(msgs, self.template_id)


def _bundle(template_id: str, system: str, user: str) -> PromptBundle:
    return PromptBundle(({"role": "system", "content": system}, {"role": "user", "content": user}), template_id)


def _problem() -> str:
    return "Problem Description:\n" + PROBLEM_DESCRIPTION


def sample_record(sample: AdversarialSample) -> dict:
    return {
        "demands": [[d.source, d.target, d.volume] for d in sample.demands],
        "gap": round(sample.gap, 6),
    }


def render_samples(samples: Sequence[AdversarialSample]) -> str:
    """One JSON object per line; node names stay readable (non-ASCII kept as is)."""
    return "\n".join(json.dumps(sample_record(s), ensure_ascii=False) for s in samples)


def program_block(program: HeuristicProgram | str) -> str:
    text = program if isinstance(program, str) else program.to_json()
    return f"```json\n{text}\n```"


def render_explanation(explanation: Explanation | None, limit: int = MAX_EXPLANATIONS) -> str:
    diffs = list(explanation.differences) if explanation is not None else []
    if not diffs:
        return "none observed"
    ranked = sorted(diffs, key=lambda d: (-d.weight, d.pair))
    lines = [f"- {d.describe()}" for d in ranked[:limit]]
    if len(ranked) > limit:
        lines.append(f"(showing the top {limit} of {len(ranked)} differences by flow volume)")
    return "\n".join(lines)


def build_pattern_prompt(
    region: Region,
    adversarial: Sequence[AdversarialSample],
    normal: Sequence[AdversarialSample],
    n: int,
) -> PromptBundle:
    if n < 1:
        raise ValueError("n must be >= 1")
    adv, nrm = list(adversarial)[:n], list(normal)[:n]
    user = (
        "Instructions:\n"
        "Please analyze these samples and identify patterns causing performance gaps between the heuristic "
        "and the optimal solution:\n\n"
        "Tasks:\n"
        f"1. Compare the adversarial and non-adversarial sample sets (top {n} each) and list patterns that "
        "correlate with a large heuristic-optimal gap.\n"
        "2. For each pattern, provide a concise natural-language description.\n"
        "3. Combine the findings with region description (green boundary).\n\n"
        f"Region description ({region.id}):\n{region.description}\n\n"
        "Each sample lists demands as [source, destination, volume] and the gap between the optimal and "
        "the heuristic total routed traffic.\n\n"
        f"Examples of adversarial samples:\n{render_samples(adv)}\n\n"
        f"Examples of normal samples:\n{render_samples(nrm)}"
    )
    return _bundle(PATTERN_TEMPLATE, _problem(), user)


def render_patterns(report) -> str:
    if report is None or not report.patterns:
        return "none observed"
    out = []
    for i, p in enumerate(report.patterns, 1):
        head = f"{i}. {p.name}:" if p.name else f"{i}."
        out.append(f"{head}\n   {p.description}" if p.description else head)
    return "\n".join(out)


def build_suggestion_prompt(report, explanation: Explanation | None, program: HeuristicProgram, n: int) -> PromptBundle:
    if n < 1:
        raise ValueError("n must be >= 1")
    stage_names = "pin_small, greedy_top_k, lp_residual, hotspot_reopt"
    user = (
        "We have analyzed the performance of a heuristic and the optimal solution on a set of samples.\n"
        f"Pattern Analysis:\n{render_patterns(report)}\n\n"
        f"Heuristic code:\n{program_block(program)}\n\n"
        f"{DSL_REFERENCE}\n\n"
        "Explanations:\n"
        "We also found out that the following decisions are the most likely to cause the gap:\n"
        f"{render_explanation(explanation)}\n\n"
        "Task:\n"
        "Please suggest ideas for improvements to the heuristic:\n\n"
        "1. What modifications could prevent these gaps?\n"
        "2. What additional network metrics should be considered?\n"
        "3. What alternative routing strategies might work better?\n"
        "4. How can we better handle congestion and load balancing?\n"
        "5. Is there a way to run optimal on a subset of the problem? For example, a subset of demands or graph?\n"
        "6. Propose ideas for improvements.\n\n"
        f"Your task is to list up to {n} concrete, different idea that would reduce the gap.\n\n"
        "In order to do your task:\n\n"
        "1. Examine the adversarial patterns and the decision differences.\n"
        "2. From those patterns, extract up to one improvement idea likely to improve the heuristic.\n"
        "3. For each idea, provide a detailed (at least 100 words), code-agnostic explanation and reasoning.\n\n"
        "-- Requirements --\n\n"
        "• Do not write code, only suggest ideas.\n"
        "• Do not suggest ML approaches requiring lots of training data.\n"
        "• Provide a thorough explanation of each idea.\n"
        "• Explain so the reader can implement it themselves.\n"
        f"• The heuristic will be implemented as a program in the language above, so each idea should be "
        f"expressible with its stages ({stage_names}).\n\n"
        "-- Output Format --\n\n"
        f"{SUGGESTION_OUTPUT}"
    )
    return _bundle(SUGGESTION_TEMPLATE, _problem(), user)


def render_suggestions(suggestions: Sequence) -> str:
    if not suggestions:
        return "none"
    return "\n".join(f"{i}. {s.idea}\n   Reasoning: {s.reasoning}" for i, s in enumerate(suggestions, 1))


@dataclass(frozen=True)
class ParentView:
    """What the mutation prompt shows about one parent."""

    program: HeuristicProgram
    worst: tuple[AdversarialSample, ...]
    explanation: Explanation | None = None


def build_mutation_prompt(
    parents: Sequence[ParentView],
    suggestions: Sequence,
    m: int,
    include_samples: bool = True,
    include_suggestions: bool = True,
) -> PromptBundle:
    """Mutation prompt with one section per parent.

    A parent's ``explanation`` (if any) adds a decision-difference section.
    The one-shot comparison turns the sample and suggestion sections off to
    build its prompt variants.
    """
    if not parents:
        raise ValueError("at least one parent is required")
    parts = [
        "Task:\nYour task is to design a new heuristic different than the Parent heuristics.\n",
    ]
    for i, parent in enumerate(parents, 1):
        section = (
            f"Parent Heuristic ({i}):\n"
            "Here is a parent heuristic:\n"
            f"{program_block(parent.program)}\n"
        )
        if include_samples:
            section += (
                f"\n-- Worst Performing Samples for the Parent Heuristic ({i}) --\n"
                "The *Parent* heuristic performed poorly on the following samples compared to the optimal solution:\n"
                f"Examples of adversarial samples for the parent ({i}):\n"
                f"{render_samples(list(parent.worst)[:m]) or 'none'}\n"
            )
        if parent.explanation is not None:
            section += (
                f"\n-- Decision Differences for the Parent Heuristic ({i}) --\n"
                "We also found out that the following decisions are the most likely to cause the gap:\n"
                f"{render_explanation(parent.explanation)}\n"
            )
        if include_suggestions:
            section += (
                f"\n-- Suggestions to improve the Parent Heuristic ({i}) --\n"
                "You can use the following observations/suggestions to improve the parent heuristic:\n"
                f"{render_suggestions(suggestions)}\n"
            )
        parts.append(section)
    parts.append(
        "-- Requirements --\n"
        "Based on the parent heuristics above, first analyze the pros and cons of each, and then design a new "
        "heuristic that performs better. You can use the suggestions to improve the parent heuristics if you want.\n"
        'The new heuristic must be a program in the language below; put the program object in the "code" field.\n\n'
        f"{DSL_REFERENCE}\n"
    )
    parts.append(f"-- Output Format --\n\n{MUTATION_OUTPUT}")
    return _bundle(MUTATION_TEMPLATE, _problem(), "\n".join(parts))


def build_fix_prompt(program_text: str, error: str) -> PromptBundle:
    err = error if error and error.strip() else "unknown error"
    user = (
        f"Language reference:\n{DSL_REFERENCE}\n\n"
        f"Code to fix:\n```json\n{program_text}\n```\n\n"
        f"Error:\n```\n{err}\n```\n\n"
        "Task:\n"
        "Fix the code and return ONLY the complete fixed program JSON (no fences)."
    )
    return _bundle(FIX_TEMPLATE, FIX_SYSTEM, user)
