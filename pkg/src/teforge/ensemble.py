"""Regional ensembles: dispatch each demand matrix to its region's specialist."""

from __future__ import annotations

import json
import logging
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Sequence

from .analyzer import Region
from .core import EPS_LP, DemandMatrix, PathSet, Topology, solve_optimal, throughput_gap
from .dsl import HeuristicProgram, ProgramError, RoutingOutcome, interpret, parse_program, validate

logger = logging.getLogger(__name__)

FALLBACK = "fallback"
MODES = ("dispatch", "parallel")


@dataclass(frozen=True)
class EnsembleSpec:
    entries: tuple[tuple[Region, HeuristicProgram], ...]
    fallback: HeuristicProgram

    def __post_init__(self) -> None:
        for label, prog in [(r.id, p) for r, p in self.entries] + [(FALLBACK, self.fallback)]:
            problems = validate(prog)
            if problems:
                raise ProgramError([f"{label}: {v}" for v in problems])
        ids = [r.id for r, _ in self.entries]
        if len(set(ids)) != len(ids) or FALLBACK in ids:
            raise ValueError(f"region ids must be unique and not {FALLBACK!r}: {ids}")

    @classmethod
    def single(cls, program: HeuristicProgram) -> "EnsembleSpec":
        return cls((), program)

    def program_for(self, region_id: str) -> HeuristicProgram:
        for r, p in self.entries:
            if r.id == region_id:
                return p
        return self.fallback

    def to_dict(self) -> dict:
        return {
            "fallback": self.fallback.to_dict(),
            "entries": [{"region": r.to_dict(), "program": p.to_dict()} for r, p in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleSpec":
        entries = tuple((Region.from_dict(e["region"]), parse_program(e["program"])) for e in d["entries"])
        return cls(entries, parse_program(d["fallback"]))


def save_ensemble(spec: EnsembleSpec, path: str | FsPath, run_hash: str = "") -> None:
    payload = {"config_hash": run_hash, **spec.to_dict()}
    FsPath(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_ensemble(path: str | FsPath) -> EnsembleSpec:
    return EnsembleSpec.from_dict(json.loads(FsPath(path).read_text(encoding="utf-8")))


def classify(spec: EnsembleSpec, demands: DemandMatrix) -> str:
    """First region (declared order) containing ``demands``, else ``"fallback"``."""
    for region, _ in spec.entries:
        if region.contains(demands):
            return region.id
    return FALLBACK


@dataclass(frozen=True)
class EnsembleOutcome:
    outcome: RoutingOutcome
    region_id: str
    program_name: str

    @property
    def total_met(self) -> float:
        return self.outcome.total_met


def route(
    spec: EnsembleSpec,
    topology: Topology,
    demands: DemandMatrix,
    paths: PathSet,
    mode: str = "dispatch",
) -> EnsembleOutcome:
    """Route with the classified program, or (``parallel``) with every program keeping the best.

    Parallel ties go to the earliest program in declared order, fallback last.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "dispatch":
        rid = classify(spec, demands)
        prog = spec.program_for(rid)
        return EnsembleOutcome(interpret(prog, topology, demands, paths), rid, prog.name)
    best: EnsembleOutcome | None = None
    for rid, prog in [(r.id, p) for r, p in spec.entries] + [(FALLBACK, spec.fallback)]:
        out = interpret(prog, topology, demands, paths)
        if best is None or out.total_met > best.total_met + EPS_LP:
            best = EnsembleOutcome(out, rid, prog.name)
    assert best is not None
    return best


@dataclass
class InstanceResult:
    index: int
    region_id: str
    optimal_met: float
    total_met: float
    gap: float
    base_gap: float
    normalized_gap: float = 0.0
    runtime_ms: float = 0.0
    base_runtime_ms: float = 0.0

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "region": self.region_id,
            "optimal_met": self.optimal_met,
            "total_met": self.total_met,
            "gap": self.gap,
            "base_gap": self.base_gap,
            "normalized_gap": self.normalized_gap,
        }


def _stats(values: Sequence[float]) -> dict:
    n = len(values)
    mean = sum(values) / n if n else 0.0
    se = statistics.stdev(values) / math.sqrt(n) if n > 1 else 0.0
    return {"count": n, "max": max(values, default=0.0), "mean": mean, "se": se}


@dataclass
class HeldoutReport:
    label: str
    mode: str
    base_max_gap: float
    instances: list[InstanceResult]
    regions: list[str] = field(default_factory=list)

    @property
    def normalized(self) -> list[float]:
        return [r.normalized_gap for r in self.instances]

    @property
    def overall(self) -> dict:
        s = _stats(self.normalized)
        raw = _stats([r.gap for r in self.instances])
        return {"normalized_max": s["max"], "normalized_mean": s["mean"], "normalized_se": s["se"],
                "max_gap": raw["max"], "mean_gap": raw["mean"], "count": s["count"]}

    def per_region(self) -> dict[str, dict]:
        out = {}
        for rid in [*self.regions, FALLBACK]:
            vals = [r.normalized_gap for r in self.instances if r.region_id == rid]
            if vals:
                s = _stats(vals)
                out[rid] = {"count": s["count"], "normalized_max": s["max"], "normalized_mean": s["mean"]}
        return out

    @property
    def runtime_ratio(self) -> float:
        ours = statistics.median(r.runtime_ms for r in self.instances)
        base = statistics.median(r.base_runtime_ms for r in self.instances)
        return ours / base if base > 0 else float("nan")

    def to_dict(self) -> dict:
        """Deterministic content only; wall-clock numbers live in ``runtime_dict``."""
        return {
            "label": self.label,
            "mode": self.mode,
            "base_max_gap": self.base_max_gap,
            "overall": self.overall,
            "per_region": self.per_region(),
            "instances": [r.to_dict() for r in self.instances],
        }

    def runtime_dict(self) -> dict:
        return {
            "runtime_ratio": self.runtime_ratio,
            "median_runtime_ms": statistics.median(r.runtime_ms for r in self.instances),
            "median_base_runtime_ms": statistics.median(r.base_runtime_ms for r in self.instances),
        }

    def to_markdown(self) -> str:
        o = self.overall
        base_mean = _mean([r.base_gap for r in self.instances]) / self.base_max_gap if self.base_max_gap > EPS_LP else 0.0
        lines = [
            f"# Held-out evaluation: {self.label}",
            "",
            f"Instances: {o['count']}, mode: {self.mode}, base worst-case gap: {self.base_max_gap:g}",
            "",
            "| Heuristic | Max suboptimality | Mean suboptimality | Runtime (x base) |",
            "|---|---|---|---|",
        ]
        if self.label != "base":
            lines.append(f"| base | 100.00% | {_pct(base_mean)} | 1.00 |")
        lines += [
            f"| {self.label} | {_pct(o['normalized_max'])} | {_pct(o['normalized_mean'])} ± "
            f"{_pct(o['normalized_se'])} | {self.runtime_ratio:.2f} |",
            "",
            "| Region | Instances | Max | Mean |",
            "|---|---|---|---|",
        ]
        for rid, s in self.per_region().items():
            lines.append(f"| {rid} | {s['count']} | {_pct(s['normalized_max'])} | {_pct(s['normalized_mean'])} |")
        return "\n".join(lines) + "\n"


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else 0.0


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}%"


def evaluate_heldout(
    target: EnsembleSpec | HeuristicProgram,
    held_out: Sequence[DemandMatrix],
    topology: Topology,
    paths: PathSet,
    base: HeuristicProgram,
    mode: str = "dispatch",
    label: str | None = None,
    workers: int = 1,
) -> HeldoutReport:
    """Gaps of ``target`` on every held-out matrix, normalized by ``base``'s worst gap.

    When the base never trails the optimum the normalized gaps are reported
    as 0.
    """
    if not held_out:
        raise ValueError("held-out set must not be empty")
    spec = target if isinstance(target, EnsembleSpec) else EnsembleSpec.single(target)
    if label is None:
        label = "ensemble" if isinstance(target, EnsembleSpec) else target.name

    def one(i: int) -> InstanceResult:
        dm = held_out[i]
        opt = solve_optimal(topology, dm, paths).total_met
        res = route(spec, topology, dm, paths, mode)
        b = interpret(base, topology, dm, paths)
        return InstanceResult(i, res.region_id, opt, res.total_met, throughput_gap(opt, res.total_met),
                              throughput_gap(opt, b.total_met), 0.0, res.outcome.elapsed_ms, b.elapsed_ms)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(len(held_out))))
    else:
        results = [one(i) for i in range(len(held_out))]
    base_max = max(r.base_gap for r in results)
    for r in results:
        r.normalized_gap = r.gap / base_max if base_max > EPS_LP else 0.0
    return HeldoutReport(label, mode, base_max, results, [r.id for r, _ in spec.entries])


def write_reports(reports: Sequence[HeldoutReport], out_dir: str | FsPath, run_hash: str = "") -> None:
    """report.json and report.md (deterministic) plus runtime.json (wall clock)."""
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"config_hash": run_hash, "reports": [r.to_dict() for r in reports]}
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    runtime = {r.label: r.runtime_dict() for r in reports}
    (out / "runtime.json").write_text(json.dumps(runtime, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    md = [f"<!-- config_hash={run_hash} -->"] + [r.to_markdown() for r in reports]
    (out / "report.md").write_text("\n".join(md), encoding="utf-8")
