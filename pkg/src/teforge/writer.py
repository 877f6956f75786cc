"""Island-based evolutionary search over heuristic programs.

Each iteration every island picks a parent by size-2 tournament, asks the
backend for a mutated program, repairs it with up to ``fix_rounds`` fix calls
if it does not validate or evaluate, and keeps it when it lowers the island's
worst-case training gap (or ties and differs from every member). Archives are
pruned and the state is checkpointed after every iteration.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath
from typing import Any, Sequence

import numpy as np

from .analyzer import AdversarialSample
from .core import EPS_LP, DemandMatrix, PathSet, SolverError, Topology, solve_optimal, throughput_gap
from .dsl import HeuristicProgram, ProgramError, interpret, parse_program, validate
from .llm import BackendError, LlmBackend, extract_json
from .prompts import ParentView, build_fix_prompt, build_mutation_prompt

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class RestoreError(ValueError):
    """A checkpoint could not be restored; ``section`` names the part that failed."""

    def __init__(self, section: str, detail: str):
        super().__init__(f"checkpoint section {section!r}: {detail}")
        self.section = section


class SearchAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class WriterConfig:
    islands: int = 2
    iterations: int = 6
    m: int = 5
    fix_rounds: int = 3
    archive: int = 8
    patience: int = 3
    parents: int = 1
    seed: int = 0
    island_cap: int = 4

    def __post_init__(self) -> None:
        for name in ("islands", "iterations", "m", "fix_rounds", "archive", "patience", "parents", "island_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"writer.{name} must be >= 1")
        if self.patience > self.iterations:
            raise ValueError("writer.patience must not exceed writer.iterations")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WriterConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown writer keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass(frozen=True)
class Member:
    program: HeuristicProgram
    gaps: tuple[float, ...]

    @property
    def worst(self) -> float:
        return max(self.gaps) if self.gaps else 0.0

    @property
    def mean(self) -> float:
        return sum(self.gaps) / len(self.gaps) if self.gaps else 0.0

    def rank(self) -> tuple:
        return (round(self.worst, 9), round(self.mean, 9), self.program.name)

    def to_dict(self) -> dict:
        return {"program": self.program.to_dict(), "gaps": list(self.gaps)}

    @classmethod
    def from_dict(cls, d: dict) -> "Member":
        return cls(parse_program(d["program"]), tuple(float(g) for g in d["gaps"]))


@dataclass
class Island:
    id: int
    members: list[Member]

    @property
    def best(self) -> Member:
        return min(self.members, key=Member.rank)

    def to_dict(self) -> dict:
        return {"id": self.id, "members": [m.to_dict() for m in self.members]}

    @classmethod
    def from_dict(cls, d: dict) -> "Island":
        return cls(int(d["id"]), [Member.from_dict(m) for m in d["members"]])


@dataclass
class Candidate:
    iteration: int
    island: int
    name: str
    parents: list[str]
    status: str
    fix_rounds: int = 0
    train_gap: float | None = None
    mean_gap: float | None = None
    error: str | None = None
    program: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SearchState:
    islands: list[Island]
    archive: list[Member]
    iteration: int = 0
    curve: list[tuple[int, float, float | None]] = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)
    transcript_index: int = 0
    backend_state: dict | None = None
    stale: int = 0
    counter: int = 0
    candidates: int = 0
    stop_reason: str | None = None
    config_hash: str = ""
    config: dict = field(default_factory=dict)

    @property
    def best(self) -> Member:
        return min(self.archive, key=Member.rank)

    @property
    def best_train_gap(self) -> float:
        return self.curve[-1][1] if self.curve else self.best.worst

    @property
    def best_heldout_gap(self) -> float | None:
        return self.curve[-1][2] if self.curve else None

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config_hash": self.config_hash,
            "config": self.config,
            "iteration": self.iteration,
            "islands": [i.to_dict() for i in self.islands],
            "archive": [m.to_dict() for m in self.archive],
            "curve": [list(row) for row in self.curve],
            "rng": self.rng_state,
            "transcript_index": self.transcript_index,
            "backend_state": self.backend_state,
            "progress": {
                "stale": self.stale,
                "counter": self.counter,
                "candidates": self.candidates,
                "stop_reason": self.stop_reason,
            },
        }


def checkpoint(state: SearchState, directory: str | FsPath) -> FsPath:
    """Write ``checkpoints/iter_%04d.json`` under ``directory``; return its path."""
    folder = FsPath(directory) / "checkpoints"
    folder.mkdir(parents=True, exist_ok=True)
    path = folder / f"iter_{state.iteration:04d}.json"
    path.write_text(json.dumps(state.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _section(name: str, fn):
    try:
        return fn()
    except RestoreError:
        raise
    except (KeyError, IndexError, TypeError, ValueError, AttributeError) as exc:
        raise RestoreError(name, f"{type(exc).__name__}: {exc}") from exc


def restore(path: str | FsPath) -> SearchState:
    """Load a checkpoint. Any damage raises ``RestoreError``; no partial state is returned."""
    try:
        text = FsPath(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise RestoreError("file", str(exc)) from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RestoreError("file", f"not valid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise RestoreError("file", "top level is not an object")
    if d.get("version") != CHECKPOINT_VERSION:
        raise RestoreError("version", f"unsupported version {d.get('version')!r}")
    islands = _section("islands", lambda: [Island.from_dict(i) for i in d["islands"]])
    archive = _section("archive", lambda: [Member.from_dict(m) for m in d["archive"]])
    if not archive or any(not i.members for i in islands):
        raise RestoreError("islands", "empty island or archive")
    curve = _section("curve", lambda: [(int(r[0]), float(r[1]), None if r[2] is None else float(r[2]))
                                       for r in d["curve"]])
    rng_state = _section("rng", lambda: _check_rng(d["rng"]))
    progress = _section("progress", lambda: dict(d["progress"]))
    return SearchState(
        islands=islands,
        archive=archive,
        iteration=_section("iteration", lambda: int(d["iteration"])),
        curve=curve,
        rng_state=rng_state,
        transcript_index=_section("transcript_index", lambda: int(d["transcript_index"])),
        backend_state=d.get("backend_state"),
        stale=_section("progress", lambda: int(progress["stale"])),
        counter=_section("progress", lambda: int(progress["counter"])),
        candidates=_section("progress", lambda: int(progress["candidates"])),
        stop_reason=progress.get("stop_reason"),
        config_hash=d.get("config_hash", ""),
        config=d.get("config", {}),
    )


def _check_rng(state: dict) -> dict:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return state


def tournament_select(island: Island, rng: np.random.Generator, k: int = 1) -> list[Member]:
    """``k`` parents, each the winner of a size-2 tournament (draws with replacement)."""
    members = island.members
    if not members:
        raise ValueError("cannot select from an empty island")
    out = []
    for _ in range(k):
        a, b = (int(x) for x in rng.integers(len(members), size=2))
        out.append(min((members[a], a), (members[b], b), key=lambda t: (t[0].rank(), t[1]))[0])
    return out


def is_diverse(candidate: HeuristicProgram, island: Island) -> bool:
    key = candidate.behavior_key()
    return all(m.program.behavior_key() != key for m in island.members)


class GapScorer:
    """Per-instance gaps against precomputed optimal throughput."""

    def __init__(self, topology: Topology, paths: PathSet, matrices: Sequence[DemandMatrix]):
        self.topology = topology
        self.paths = paths
        self.matrices = list(matrices)
        self.optimal = [solve_optimal(topology, dm, paths).total_met for dm in self.matrices]

    def gaps(self, program: HeuristicProgram) -> tuple[float, ...]:
        out = []
        for dm, opt in zip(self.matrices, self.optimal):
            met = interpret(program, self.topology, dm, self.paths).total_met
            out.append(throughput_gap(opt, met))
        return tuple(out)


def candidate_program_text(reply: str) -> str:
    """Pull the program out of a mutation or fix reply, as JSON text.

    Accepts the ``[{"code": ..., "reasoning": ...}]`` array, a bare program
    object, or a ``code`` string holding program JSON. Raises ``ValueError``.
    """
    try:
        data = extract_json(reply, "[")
    except ValueError:
        data = extract_json(reply, "{")
    if isinstance(data, list):
        if not data or not isinstance(data[0], dict):
            raise ValueError("reply array holds no candidate object")
        data = data[0]
    if isinstance(data, dict) and "code" in data:
        code = data["code"]
        if isinstance(code, str):
            return code
        return json.dumps(code, indent=2, sort_keys=True)
    if isinstance(data, dict):
        return json.dumps(data, indent=2, sort_keys=True)
    raise ValueError(f"expected a program object, got {type(data).__name__}")


def config_hash(payload: Any) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


class _Search:
    def __init__(self, config, train_scorer, held_scorer, suggestions, backend, train, run_dir, config_hash_):
        self.config = config
        self.train_scorer = train_scorer
        self.held_scorer = held_scorer
        self.suggestions = list(suggestions)
        self.backend = backend
        self.train = list(train)
        self.run_dir = FsPath(run_dir) if run_dir is not None else None
        self.hash = config_hash_
        self._held_cache: dict[str, float] = {}

    # evaluation

    def heldout_gap(self, program: HeuristicProgram) -> float | None:
        if self.held_scorer is None or not self.held_scorer.matrices:
            return None
        key = program.behavior_key()
        if key not in self._held_cache:
            self._held_cache[key] = max(self.held_scorer.gaps(program))
        return self._held_cache[key]

    def attempt(self, text: str) -> tuple[Member | None, str, str | None]:
        """Parse, validate and score a program; returns (member, program text, error)."""
        try:
            program_text = candidate_program_text(text)
        except ValueError as exc:
            return None, text, f"could not find program JSON in the reply: {exc}"
        problems = validate(program_text)
        if problems:
            return None, program_text, "\n".join(problems)
        program = parse_program(program_text)
        try:
            gaps = self.train_scorer.gaps(program)
        except (ProgramError, SolverError) as exc:
            return None, program_text, f"evaluation failed: {exc}"
        return Member(program, gaps), program_text, None

    def worst_samples(self, member: Member) -> tuple[AdversarialSample, ...]:
        order = sorted(range(len(member.gaps)), key=lambda i: (-member.gaps[i], i))
        picked = [i for i in order if member.gaps[i] > EPS_LP][: self.config.m]
        return tuple(AdversarialSample(self.train[i], member.gaps[i]) for i in picked)

    # one island step

    def step_island(self, state: SearchState, island: Island, rng: np.random.Generator) -> Candidate:
        parents = tournament_select(island, rng, self.config.parents)
        views = [ParentView(p.program, self.worst_samples(p)) for p in parents]
        state.counter += 1
        name = f"c{state.counter:04d}"
        cand = Candidate(state.iteration, island.id, name, [p.program.name for p in parents], "failed")
        prompt = build_mutation_prompt(views, self.suggestions, self.config.m)
        try:
            reply = self.backend.generate(list(prompt.messages), template_id=prompt.template_id)
            member, program_text, error = self.attempt(reply)
            while error is not None and cand.fix_rounds < self.config.fix_rounds:
                cand.fix_rounds += 1
                fix = build_fix_prompt(program_text, error)
                reply = self.backend.generate(list(fix.messages), template_id=fix.template_id)
                member, program_text, error = self.attempt(reply)
        except BackendError as exc:
            logger.error("iteration %d island %d: backend error: %s", state.iteration, island.id, exc)
            cand.status, cand.error = "skipped", str(exc)
            return cand
        if member is None:
            cand.error = error
            return cand
        lineage = tuple(dict.fromkeys([*parents[0].program.lineage, parents[0].program.name]))
        member = Member(member.program.renamed(name, lineage), member.gaps)
        cand.program = member.program.to_dict()
        cand.train_gap, cand.mean_gap = member.worst, member.mean
        current = island.best.worst
        improves = member.worst < current - EPS_LP
        ties = abs(member.worst - current) <= EPS_LP and is_diverse(member.program, island)
        accepted = improves or ties
        if accepted:
            island.members.append(member)
        prefix = "fixed_then_" if cand.fix_rounds else ""
        cand.status = prefix + ("accepted" if accepted else "rejected")
        return cand

    # barrier work

    def prune(self, state: SearchState) -> None:
        cap = self.config.island_cap
        for island in state.islands:
            island.members = sorted(island.members, key=Member.rank)[:cap]
        pool: dict[str, Member] = {}
        for m in sorted([*state.archive, *(m for i in state.islands for m in i.members)], key=Member.rank):
            pool.setdefault(m.program.behavior_key(), m)
        state.archive = sorted(pool.values(), key=Member.rank)[: self.config.archive]
        kept = {m.program.behavior_key() for m in state.archive}
        best = state.archive[0]
        for island in state.islands:
            island.members = [m for m in island.members if m.program.behavior_key() in kept]
            if not island.members:
                # respawn an emptied island from the global best
                island.members = [best]

    def record_curve(self, state: SearchState) -> None:
        best = state.best
        held = self.heldout_gap(best.program)
        if state.curve:
            prev_train, prev_held = state.curve[-1][1], state.curve[-1][2]
            train = min(prev_train, best.worst)
            if held is not None and prev_held is not None:
                held = min(prev_held, held)
        else:
            train = best.worst
        state.curve.append((state.iteration, train, held))

    # artifacts

    def sync_io(self, state: SearchState) -> None:
        state.transcript_index = getattr(getattr(self.backend, "transcript", None), "index", 0) or 0
        getter = getattr(self.backend, "get_state", None)
        state.backend_state = getter() if callable(getter) else None

    def write_curves(self, state: SearchState) -> None:
        buf = io.StringIO()
        buf.write(f"# config_hash={self.hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "best_train_gap", "best_heldout_gap"])
        for it, train, held in state.curve:
            w.writerow([it, f"{train:.6f}", "" if held is None else f"{held:.6f}"])
        (self.run_dir / "curves.csv").write_text(buf.getvalue(), encoding="utf-8")

    def append_candidates(self, cands: list[Candidate]) -> None:
        with open(self.run_dir / "candidates.jsonl", "a", encoding="utf-8") as fh:
            for c in cands:
                fh.write(json.dumps({"config_hash": self.hash, **c.to_dict()}, sort_keys=True) + "\n")

    def persist(self, state: SearchState, cands: list[Candidate]) -> None:
        if self.run_dir is None:
            return
        try:
            if cands:
                self.append_candidates(cands)
            self.write_curves(state)
            checkpoint(state, self.run_dir)
        except OSError as exc:
            raise SearchAborted(f"could not write run artifacts at iteration {state.iteration}: {exc}") from exc


def _truncate_lines(path: FsPath, keep: int) -> None:
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    path.write_text("".join(lines[:keep]), encoding="utf-8")


def run_search(
    config: WriterConfig,
    base: HeuristicProgram,
    train: Sequence[DemandMatrix],
    held_out: Sequence[DemandMatrix],
    suggestions: Sequence,
    backend: LlmBackend,
    topology: Topology,
    paths: PathSet,
    run_dir: str | FsPath | None = None,
    resume: SearchState | None = None,
    run_hash: str | None = None,
) -> SearchState:
    """Evolve ``base`` against the training batch; see the module docstring.

    With ``run_dir`` the run writes config.json, curves.csv, candidates.jsonl
    and one checkpoint per iteration (iteration 0 is the seeded state).
    ``resume`` continues from a restored checkpoint; the backend's script
    position and transcript numbering are restored from it as well.
    """
    if not train:
        raise ValueError("training batch must not be empty")
    problems = validate(base)
    if problems:
        raise ProgramError(problems)
    run_hash = run_hash or config_hash({
        "writer": config.to_dict(),
        "base": base.to_dict(),
        "train": [dm.to_list() for dm in train],
        "held_out": [dm.to_list() for dm in held_out],
        "suggestions": [getattr(s, "idea", str(s)) for s in suggestions],
    })
    train_scorer = GapScorer(topology, paths, train)
    held_scorer = GapScorer(topology, paths, held_out) if held_out else None
    search = _Search(config, train_scorer, held_scorer, suggestions, backend, train, run_dir, run_hash)
    rng = np.random.default_rng(config.seed)

    if search.run_dir is not None:
        search.run_dir.mkdir(parents=True, exist_ok=True)
        (search.run_dir / "config.json").write_text(
            json.dumps({"config_hash": run_hash, "writer": config.to_dict(), "base": base.to_dict()},
                       indent=2, sort_keys=True) + "\n", encoding="utf-8")

    if resume is not None:
        if resume.config_hash and resume.config_hash != run_hash:
            raise RestoreError("config_hash", f"checkpoint was written by config {resume.config_hash}, "
                                              f"this run is {run_hash}")
        state = resume
        rng.bit_generator.state = state.rng_state
        if state.backend_state is not None and callable(getattr(backend, "set_state", None)):
            backend.set_state(state.backend_state)
        transcript = getattr(backend, "transcript", None)
        if transcript is not None:
            transcript.index = state.transcript_index
        if search.run_dir is not None:
            _truncate_lines(search.run_dir / "candidates.jsonl", state.candidates)
        if state.stop_reason is not None:
            return state
    else:
        seed_member = Member(base, train_scorer.gaps(base))
        state = SearchState(
            islands=[Island(i, [seed_member]) for i in range(config.islands)],
            archive=[seed_member],
            config_hash=run_hash,
            config=config.to_dict(),
        )
        if search.run_dir is not None:
            (search.run_dir / "candidates.jsonl").write_text("", encoding="utf-8")
        search.record_curve(state)
        state.rng_state = rng.bit_generator.state
        search.sync_io(state)
        search.persist(state, [])
        if state.best.worst <= EPS_LP:
            state.stop_reason = "zero_gap"
            return state

    while state.iteration < config.iterations:
        state.iteration += 1
        before = state.best_train_gap
        cands = [search.step_island(state, island, rng) for island in sorted(state.islands, key=lambda i: i.id)]
        search.prune(state)
        search.record_curve(state)
        state.candidates += len(cands)
        state.stale = 0 if state.best_train_gap < before - EPS_LP else state.stale + 1
        if state.best_train_gap <= EPS_LP:
            state.stop_reason = "zero_gap"
        elif state.iteration >= config.iterations:
            state.stop_reason = "max_iterations"
        elif state.stale >= config.patience:
            state.stop_reason = "patience"
        state.rng_state = rng.bit_generator.state
        search.sync_io(state)
        logger.info("iteration %d: best train gap %.6g (%s)", state.iteration, state.best_train_gap,
                    ", ".join(c.status for c in cands))
        search.persist(state, cands)
        if state.stop_reason is not None:
            break
    return state


def read_candidates(run_dir: str | FsPath) -> list[dict]:
    path = FsPath(run_dir) / "candidates.jsonl"
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def latest_checkpoint(run_dir: str | FsPath) -> FsPath | None:
    found = sorted((FsPath(run_dir) / "checkpoints").glob("iter_*.json"))
    return found[-1] if found else None
