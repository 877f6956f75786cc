"""A small, total heuristic language for traffic engineering.

Every heuristic (the pinning baseline, LLM mutations, regional specialists)
is a ``HeuristicProgram``: a demand ordering plus a list of stages executed
against a shared residual-capacity view. Programs travel as canonical JSON::

    {"name": "H0", "ordering": "volume_desc", "budget_ms": 2000, "lineage": [],
     "stages": [{"type": "pin_small", "threshold": 60.0},
                {"type": "lp_residual", "scope": "all_remaining"}]}
"""

from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Union

from .core import (
    FLOW_FLOOR,
    Commodity,
    DemandMatrix,
    EdgeKey,
    FlowAssignment,
    Pair,
    Path,
    PathSet,
    Topology,
    solve_path_lp,
)

ORDERINGS = ("volume_desc", "volume_asc", "pair_lex")
LP_SCOPES = ("all_remaining", "heavy_subset")
DEFAULT_BUDGET_MS = 2000
DEFAULT_PIN_THRESHOLD = 60.0


class ProgramError(ValueError):
    """A program failed validation; ``violations`` lists every problem found."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class PinSmall:
    threshold: float
    type = "pin_small"


@dataclass(frozen=True)
class GreedyTopK:
    k: int
    split: bool = True
    type = "greedy_top_k"


@dataclass(frozen=True)
class LpResidual:
    scope: str = "all_remaining"
    count: int | None = None
    type = "lp_residual"


@dataclass(frozen=True)
class HotspotReopt:
    util_threshold: float = 0.8
    max_hotspots: int = 3
    radius: int = 1
    type = "hotspot_reopt"


Stage = Union[PinSmall, GreedyTopK, LpResidual, HotspotReopt]

# per tag: required field -> kind
_STAGE_FIELDS: dict[str, dict[str, str]] = {
    "pin_small": {"threshold": "number"},
    "greedy_top_k": {"k": "int", "split": "bool"},
    "lp_residual": {"scope": "str"},
    "hotspot_reopt": {"util_threshold": "number", "max_hotspots": "int", "radius": "int"},
}


def _stage_to_dict(stage: Stage) -> dict[str, Any]:
    if isinstance(stage, PinSmall):
        return {"type": stage.type, "threshold": float(stage.threshold)}
    if isinstance(stage, GreedyTopK):
        return {"type": stage.type, "k": stage.k, "split": stage.split}
    if isinstance(stage, LpResidual):
        d: dict[str, Any] = {"type": stage.type, "scope": stage.scope}
        if stage.scope == "heavy_subset":
            d["count"] = stage.count
        return d
    if isinstance(stage, HotspotReopt):
        return {
            "type": stage.type,
            "util_threshold": float(stage.util_threshold),
            "max_hotspots": stage.max_hotspots,
            "radius": stage.radius,
        }
    raise ProgramError([f"not a stage: {stage!r}"])


@dataclass(frozen=True)
class HeuristicProgram:
    stages: tuple[Stage, ...]
    ordering: str = "volume_desc"
    budget_ms: int = DEFAULT_BUDGET_MS
    name: str = "H"
    lineage: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "ordering": self.ordering,
            "budget_ms": self.budget_ms,
            "lineage": list(self.lineage),
            "stages": [_stage_to_dict(s) for s in self.stages],
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def behavior_key(self) -> str:
        """Canonical JSON without name/lineage metadata."""
        d = self.to_dict()
        del d["name"], d["lineage"]
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def renamed(self, name: str, lineage: tuple[str, ...] | list[str] = ()) -> "HeuristicProgram":
        return HeuristicProgram(self.stages, self.ordering, self.budget_ms, name, tuple(lineage))


def _is_number(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and not math.isnan(x)


def _is_int(x: Any) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _check_stage(i: int, raw: Any) -> list[str]:
    where = f"stages[{i}]"
    if not isinstance(raw, dict):
        return [f"{where}: expected an object, got {type(raw).__name__}"]
    tag = raw.get("type")
    if tag not in _STAGE_FIELDS:
        known = ", ".join(sorted(_STAGE_FIELDS))
        return [f"{where}: unknown stage type {tag!r} (expected one of: {known})"]
    problems = []
    expected = dict(_STAGE_FIELDS[tag])
    if tag == "lp_residual" and raw.get("scope") == "heavy_subset":
        expected["count"] = "int"
    for key, kind in expected.items():
        if key not in raw:
            problems.append(f"{where} ({tag}): missing field {key!r}")
            continue
        val = raw[key]
        ok = {"number": _is_number, "int": _is_int, "bool": lambda v: isinstance(v, bool),
              "str": lambda v: isinstance(v, str)}[kind](val)
        if not ok:
            problems.append(f"{where} ({tag}): field {key!r} must be {kind}, got {val!r}")
    extra = set(raw) - set(expected) - {"type"}
    for key in sorted(extra):
        problems.append(f"{where} ({tag}): unexpected field {key!r}")
    if problems:
        return problems

    if tag == "pin_small" and raw["threshold"] < 0:
        problems.append(f"{where} (pin_small): threshold must be >= 0")
    elif tag == "greedy_top_k" and raw["k"] < 1:
        problems.append(f"{where} (greedy_top_k): k must be ≥ 1")
    elif tag == "lp_residual":
        if raw["scope"] not in LP_SCOPES:
            problems.append(f"{where} (lp_residual): scope must be one of {', '.join(LP_SCOPES)}")
        elif raw["scope"] == "heavy_subset" and raw["count"] < 1:
            problems.append(f"{where} (lp_residual): count must be ≥ 1")
    elif tag == "hotspot_reopt":
        if not 0 < raw["util_threshold"] <= 1:
            problems.append(f"{where} (hotspot_reopt): util_threshold must be in (0, 1]")
        if raw["max_hotspots"] < 1:
            problems.append(f"{where} (hotspot_reopt): max_hotspots must be ≥ 1")
        if raw["radius"] < 1:
            problems.append(f"{where} (hotspot_reopt): radius must be ≥ 1")
    return problems


def _check_program_dict(raw: Any) -> list[str]:
    if not isinstance(raw, dict):
        return [f"program must be a JSON object, got {type(raw).__name__}"]
    problems = []
    allowed = {"name", "ordering", "budget_ms", "lineage", "stages"}
    for key in sorted(set(raw) - allowed):
        problems.append(f"unexpected top-level field {key!r}")
    if "name" in raw and not isinstance(raw["name"], str):
        problems.append("name must be a string")
    ordering = raw.get("ordering", "volume_desc")
    if ordering not in ORDERINGS:
        problems.append(f"unknown ordering {ordering!r} (expected one of: {', '.join(ORDERINGS)})")
    budget = raw.get("budget_ms", DEFAULT_BUDGET_MS)
    if not _is_int(budget) or budget <= 0:
        problems.append(f"budget_ms must be a positive integer, got {budget!r}")
    lineage = raw.get("lineage", [])
    if not isinstance(lineage, list) or not all(isinstance(x, str) for x in lineage):
        problems.append("lineage must be a list of strings")
    stages = raw.get("stages")
    if not isinstance(stages, list) or not stages:
        problems.append("stages must be a non-empty list")
    else:
        for i, s in enumerate(stages):
            problems.extend(_check_stage(i, s))
    return problems


def _coerce(obj: Any) -> tuple[Any, list[str]]:
    if isinstance(obj, HeuristicProgram):
        try:
            return obj.to_dict(), []
        except ProgramError as exc:
            return None, exc.violations
    if isinstance(obj, (str, bytes)):
        try:
            return json.loads(obj), []
        except json.JSONDecodeError as exc:
            return None, [f"invalid JSON: {exc}"]
    return obj, []


def validate(program: Any) -> list[str]:
    """Return every violation in ``program``; an empty list means valid.

    Accepts a ``HeuristicProgram``, a decoded JSON object, or JSON text.
    """
    raw, problems = _coerce(program)
    if problems:
        return problems
    return _check_program_dict(raw)


def _build_stage(raw: dict) -> Stage:
    tag = raw["type"]
    if tag == "pin_small":
        return PinSmall(float(raw["threshold"]))
    if tag == "greedy_top_k":
        return GreedyTopK(raw["k"], raw["split"])
    if tag == "lp_residual":
        return LpResidual(raw["scope"], raw.get("count") if raw["scope"] == "heavy_subset" else None)
    return HotspotReopt(float(raw["util_threshold"]), raw["max_hotspots"], raw["radius"])


def parse_program(obj: Any) -> HeuristicProgram:
    """Decode program JSON (text or object); raise ``ProgramError`` if invalid."""
    raw, problems = _coerce(obj)
    problems = problems or _check_program_dict(raw)
    if problems:
        raise ProgramError(problems)
    if isinstance(obj, HeuristicProgram):
        return obj
    return HeuristicProgram(
        stages=tuple(_build_stage(s) for s in raw["stages"]),
        ordering=raw.get("ordering", "volume_desc"),
        budget_ms=raw.get("budget_ms", DEFAULT_BUDGET_MS),
        name=raw.get("name", "H"),
        lineage=tuple(raw.get("lineage", [])),
    )


def base_heuristic(threshold: float = DEFAULT_PIN_THRESHOLD, budget_ms: int = DEFAULT_BUDGET_MS) -> HeuristicProgram:
    """Demand pinning: small demands go on their shortest path, the rest via LP."""
    if not threshold >= 0:
        raise ProgramError(["threshold must be >= 0"])
    return HeuristicProgram((PinSmall(float(threshold)), LpResidual()), budget_ms=budget_ms, name="H0")


def optimal_program(budget_ms: int = DEFAULT_BUDGET_MS) -> HeuristicProgram:
    """A program that routes everything with the LP; its gap is always zero."""
    return HeuristicProgram((PinSmall(0.0), LpResidual()), budget_ms=budget_ms, name="LP")


def specialist_program(budget_ms: int = DEFAULT_BUDGET_MS) -> HeuristicProgram:
    """Largest-first greedy over the top-3 paths, then local re-optimization."""
    return HeuristicProgram(
        (GreedyTopK(3, True), HotspotReopt(0.8, 3, 1)),
        ordering="volume_desc",
        budget_ms=budget_ms,
        name="specialist",
    )


def dominant_paths(assignment: FlowAssignment) -> dict[Pair, Path]:
    """Per pair, the path carrying the most flow (ties: shorter, then lexicographic)."""
    best: dict[Pair, tuple[float, Path]] = {}
    for path, f in assignment.flows.items():
        if f <= FLOW_FLOOR:
            continue
        pair = (path.source, path.target)
        cur = best.get(pair)
        if cur is None or f > cur[0] or (f == cur[0] and path.sort_key < cur[1].sort_key):
            best[pair] = (f, path)
    return {pair: p for pair, (_, p) in best.items()}


@dataclass
class RoutingOutcome:
    assignment: FlowAssignment
    elapsed_ms: float
    timed_out: bool = False
    chosen_paths: dict[Pair, Path] = field(default_factory=dict)

    @property
    def total_met(self) -> float:
        return self.assignment.total_met

    @property
    def total_unmet(self) -> float:
        return self.assignment.total_unmet


class _Deadline(Exception):
    pass


class _Run:
    """Mutable scratch state for one interpretation."""

    def __init__(self, program, topology, demands, paths, clock, deadline):
        self.program = program
        self.topology = topology
        self.paths = paths
        self.clock = clock
        self.deadline = deadline
        self.residual: dict[EdgeKey, float] = topology.capacities
        self.flows: dict[Path, float] = {}
        self.volume: dict[Pair, float] = demands.volumes()
        self.routed: dict[Pair, float] = {p: 0.0 for p in self.volume}
        self.closed: set[Pair] = set()
        active = [p for p, v in self.volume.items() if v > FLOW_FLOOR]
        key: Callable[[Pair], Any] = {
            "volume_desc": lambda p: (-self.volume[p], p),
            "volume_asc": lambda p: (self.volume[p], p),
            "pair_lex": lambda p: p,
        }[program.ordering]
        self.order = sorted(active, key=key)

    def check_time(self) -> None:
        if self.clock() > self.deadline:
            raise _Deadline()

    def remaining(self, pair: Pair) -> float:
        return max(0.0, self.volume[pair] - self.routed[pair])

    def room(self, path: Path) -> float:
        return max(0.0, min(self.residual.get(e, 0.0) for e in path.edges))

    def add(self, path: Path, f: float) -> None:
        if f <= FLOW_FLOOR:
            return
        self.flows[path] = self.flows.get(path, 0.0) + f
        for e in path.edges:
            self.residual[e] = max(0.0, self.residual[e] - f)
        self.routed[(path.source, path.target)] += f

    def remove(self, path: Path) -> None:
        f = self.flows.pop(path, 0.0)
        for e in path.edges:
            self.residual[e] = self.residual[e] + f
        self.routed[(path.source, path.target)] -= f

    def candidates(self, pair: Pair) -> list[Path]:
        return self.paths.get(pair, [])

    # stages

    def pin_small(self, stage: PinSmall) -> None:
        for pair in self.order:
            self.check_time()
            if pair in self.closed or self.volume[pair] >= stage.threshold:
                continue
            need = self.remaining(pair)
            cands = self.candidates(pair)
            if need <= FLOW_FLOOR or not cands:
                continue
            room = self.room(cands[0])
            # a demand that does not fit is not pinned and stays open for later stages
            if room >= need - FLOW_FLOOR:
                self.add(cands[0], min(need, room))
                self.closed.add(pair)

    def greedy(self, stage: GreedyTopK) -> None:
        for pair in self.order:
            self.check_time()
            if pair in self.closed:
                continue
            for path in self.candidates(pair)[: stage.k]:
                need = self.remaining(pair)
                if need <= FLOW_FLOOR:
                    break
                room = self.room(path)
                if stage.split:
                    self.add(path, min(room, need))
                elif room >= need - FLOW_FLOOR:
                    self.add(path, min(room, need))
                    break

    def lp_residual(self, stage: LpResidual) -> None:
        open_pairs = [p for p in self.order if p not in self.closed and self.remaining(p) > FLOW_FLOOR]
        if stage.scope == "heavy_subset":
            open_pairs = sorted(open_pairs, key=lambda p: (-self.remaining(p), p))[: stage.count]
        coms = [Commodity(p, self.remaining(p), self.candidates(p)) for p in open_pairs]
        for path, f in sorted(solve_path_lp(self.residual, coms).items()):
            self.add(path, min(f, self.room(path), self.remaining((path.source, path.target))))

    def _neighborhood(self, edge: EdgeKey, radius: int) -> set[str]:
        adj: dict[str, set[str]] = {}
        for e in self.topology.edges:
            adj.setdefault(e.src, set()).add(e.dst)
            adj.setdefault(e.dst, set()).add(e.src)
        seen = {edge[0]: 0, edge[1]: 0}
        queue = deque(edge)
        while queue:
            v = queue.popleft()
            if seen[v] == radius:
                continue
            for w in sorted(adj.get(v, ())):
                if w not in seen:
                    seen[w] = seen[v] + 1
                    queue.append(w)
        return set(seen)

    def hotspot(self, stage: HotspotReopt) -> None:
        caps = self.topology.capacities
        used: dict[EdgeKey, float] = {}
        for path, f in self.flows.items():
            for e in path.edges:
                used[e] = used.get(e, 0.0) + f
        util = {e: used.get(e, 0.0) / c for e, c in caps.items() if c > 0}
        hot = sorted((e for e, u in util.items() if u > stage.util_threshold), key=lambda e: (-util[e], e))
        for edge in hot[: stage.max_hotspots]:
            self.check_time()
            region = self._neighborhood(edge, stage.radius)
            region_edges = {e for e in caps if e[0] in region and e[1] in region}
            touched: dict[Pair, list[Path]] = {}
            for pair in self.order:
                hit = [p for p in self.candidates(pair) if any(e in region_edges for e in p.edges)]
                if hit:
                    touched[pair] = hit
            if not touched:
                continue
            for pair, hit in touched.items():
                for p in hit:
                    if p in self.flows:
                        self.remove(p)
            # previous flows on the touched paths stay feasible, so this never loses throughput
            coms = [Commodity(pair, self.remaining(pair), hit) for pair, hit in touched.items()]
            for path, f in sorted(solve_path_lp(self.residual, coms).items()):
                self.add(path, min(f, self.room(path), self.remaining((path.source, path.target))))

    def execute(self) -> None:
        handlers = {
            PinSmall: self.pin_small,
            GreedyTopK: self.greedy,
            LpResidual: self.lp_residual,
            HotspotReopt: self.hotspot,
        }
        for stage in self.program.stages:
            self.check_time()
            handlers[type(stage)](stage)


def interpret(
    program: HeuristicProgram,
    topology: Topology,
    demands: DemandMatrix,
    paths: PathSet,
    clock: Callable[[], float] = time.perf_counter,
) -> RoutingOutcome:
    """Run ``program`` on one instance.

    Raises ``ProgramError`` for an invalid program. When the wall-clock budget
    runs out, the remaining stages are skipped and the partial (still
    feasible) assignment is returned with ``timed_out`` set.
    """
    problems = validate(program)
    if problems:
        raise ProgramError(problems)
    start = clock()
    run = _Run(program, topology, demands, paths, clock, start + program.budget_ms / 1000.0)
    timed_out = False
    try:
        run.execute()
    except _Deadline:
        timed_out = True
    elapsed_ms = (clock() - start) * 1000.0
    if elapsed_ms > program.budget_ms:
        timed_out = True
    flows = {p: f for p, f in run.flows.items() if f > FLOW_FLOOR}
    assignment = FlowAssignment(flows, demands.volumes())
    return RoutingOutcome(assignment, elapsed_ms, timed_out, dominant_paths(assignment))
