"""Mock scripts built in code for the writer tests."""

from __future__ import annotations

from teforge.dsl import base_heuristic, specialist_program
from teforge.mock import Script, ScriptEntry


def mutation_reply(program) -> str:
    import json

    return json.dumps([{"code": program.to_dict(), "reasoning": "scripted"}])


def ladder_script(specialist_at: int = 9, total: int = 12) -> Script:
    """Diverse ties (pinning thresholds 61, 62, ...), with the specialist at one position."""
    entries = []
    for i in range(total):
        prog = specialist_program() if i == specialist_at else base_heuristic(61.0 + i)
        entries.append(ScriptEntry(mutation_reply(prog), "mutation"))
    entries.append(ScriptEntry('{"stages": []}', "fix"))
    return Script(tuple(entries))
