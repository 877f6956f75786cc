"""Black-box heuristic analysis: adversarial search, regions and explanations."""

from __future__ import annotations

import logging
import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import (
    EPS_LP,
    DemandMatrix,
    FlowAssignment,
    Pair,
    Path,
    PathSet,
    Topology,
    build_path_set,
    solve_optimal,
    throughput_gap,
)
from .dsl import HeuristicProgram, ProgramError, RoutingOutcome, dominant_paths, interpret, validate

logger = logging.getLogger(__name__)


def _pair_str(pair: Pair) -> str:
    return f"{pair[0]}->{pair[1]}"


@dataclass(frozen=True)
class DemandSpace:
    """Per-pair volume box, with an optional cap on total volume."""

    pairs: tuple[Pair, ...]
    bounds: tuple[tuple[float, float], ...]
    total_cap: float | None = None

    def __post_init__(self) -> None:
        if len(self.pairs) != len(self.bounds):
            raise ValueError("one (lo, hi) bound is required per pair")
        for pair, (lo, hi) in zip(self.pairs, self.bounds):
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi or lo < 0:
                raise ValueError(f"bad bounds [{lo}, {hi}] for pair {_pair_str(pair)}")

    @classmethod
    def box(cls, pairs: Iterable[Pair], lo: float, hi: float, total_cap: float | None = None) -> "DemandSpace":
        pairs = tuple((str(s), str(t)) for s, t in pairs)
        return cls(pairs, tuple((float(lo), float(hi)) for _ in pairs), total_cap)

    def check_topology(self, topology: Topology) -> None:
        for s, t in self.pairs:
            if not (topology.has_node(s) and topology.has_node(t)) or s == t:
                raise ValueError(f"pair {s}->{t} is not a pair of distinct topology nodes")

    def contains(self, demands: DemandMatrix, tol: float = 1e-9) -> bool:
        vols = demands.volumes()
        if set(vols) - set(self.pairs):
            return False
        for pair, (lo, hi) in zip(self.pairs, self.bounds):
            v = vols.get(pair, 0.0)
            if v < lo - tol or v > hi + tol:
                return False
        return self.total_cap is None or demands.total_volume <= self.total_cap + tol

    def matrix(self, point: Sequence[float]) -> DemandMatrix:
        return DemandMatrix.from_volumes({p: float(v) for p, v in zip(self.pairs, point)})

    def to_dict(self) -> dict:
        return {
            "pairs": [list(p) for p in self.pairs],
            "bounds": [list(b) for b in self.bounds],
            "total_cap": self.total_cap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DemandSpace":
        return cls(
            tuple((str(a), str(b)) for a, b in d["pairs"]),
            tuple((float(lo), float(hi)) for lo, hi in d["bounds"]),
            d.get("total_cap"),
        )


@dataclass(frozen=True)
class Difference:
    pair: Pair
    heuristic_path: Path | None
    optimal_path: Path | None
    heuristic_flow: float
    optimal_flow: float
    demand: float
    occurrences: int = 1

    @property
    def weight(self) -> float:
        return max(self.heuristic_flow, self.optimal_flow)

    def describe(self) -> str:
        def side(path: Path | None, flow: float) -> str:
            return f"routes {flow:g} via {path}" if path is not None else "leaves it unrouted"

        text = (
            f"demand {_pair_str(self.pair)} (volume {self.demand:g}): heuristic "
            f"{side(self.heuristic_path, self.heuristic_flow)}, optimal "
            f"{side(self.optimal_path, self.optimal_flow)}"
        )
        if self.occurrences > 1:
            text += f" [seen in {self.occurrences} samples]"
        return text

    def to_dict(self) -> dict:
        return {
            "pair": list(self.pair),
            "heuristic_path": list(self.heuristic_path.nodes) if self.heuristic_path else None,
            "optimal_path": list(self.optimal_path.nodes) if self.optimal_path else None,
            "heuristic_flow": self.heuristic_flow,
            "optimal_flow": self.optimal_flow,
            "demand": self.demand,
            "occurrences": self.occurrences,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Difference":
        return cls(
            (d["pair"][0], d["pair"][1]),
            Path(tuple(d["heuristic_path"])) if d["heuristic_path"] else None,
            Path(tuple(d["optimal_path"])) if d["optimal_path"] else None,
            d["heuristic_flow"],
            d["optimal_flow"],
            d["demand"],
            d.get("occurrences", 1),
        )


@dataclass(frozen=True)
class Explanation:
    differences: tuple[Difference, ...]
    pairs_compared: int = 0

    @property
    def signature(self) -> tuple[Pair, ...]:
        return tuple(sorted({d.pair for d in self.differences}))

    @property
    def summary(self) -> dict:
        return {
            "pairs_compared": self.pairs_compared,
            "differences": len(self.differences),
            "heuristic_unrouted": sum(1 for d in self.differences if d.heuristic_path is None),
            "optimal_unrouted": sum(1 for d in self.differences if d.optimal_path is None),
        }

    def to_dict(self) -> dict:
        return {"differences": [d.to_dict() for d in self.differences], "summary": self.summary}

    @classmethod
    def from_dict(cls, d: dict) -> "Explanation":
        return cls(tuple(Difference.from_dict(x) for x in d["differences"]), d["summary"]["pairs_compared"])


def _flows(outcome: RoutingOutcome | FlowAssignment) -> FlowAssignment:
    return outcome.assignment if isinstance(outcome, RoutingOutcome) else outcome


def explain(
    heuristic_out: RoutingOutcome | FlowAssignment,
    optimal_out: RoutingOutcome | FlowAssignment,
    demands: DemandMatrix | None = None,
) -> Explanation:
    """List the demands whose dominant path differs between two assignments."""
    h, o = _flows(heuristic_out), _flows(optimal_out)
    volumes = demands.volumes() if demands is not None else {**o.demand_volumes, **h.demand_volumes}
    h_dom, o_dom = dominant_paths(h), dominant_paths(o)
    h_pf, o_pf = h.pair_flows(), o.pair_flows()
    diffs = []
    for pair in sorted(volumes):
        hp, op = h_dom.get(pair), o_dom.get(pair)
        if hp == op:
            continue
        diffs.append(
            Difference(
                pair,
                hp,
                op,
                h_pf.get(pair, 0.0),
                o_pf.get(pair, 0.0),
                volumes[pair],
            )
        )
    return Explanation(tuple(diffs), len(volumes))


def merge_explanations(explanations: Iterable[Explanation]) -> Explanation:
    """Aggregate identical decision differences across samples."""
    merged: dict[tuple, Difference] = {}
    compared = 0
    for exp in explanations:
        compared = max(compared, exp.pairs_compared)
        for d in exp.differences:
            key = (d.pair, d.heuristic_path, d.optimal_path)
            cur = merged.get(key)
            if cur is None:
                merged[key] = d
            else:
                merged[key] = Difference(
                    d.pair,
                    d.heuristic_path,
                    d.optimal_path,
                    max(cur.heuristic_flow, d.heuristic_flow),
                    max(cur.optimal_flow, d.optimal_flow),
                    max(cur.demand, d.demand),
                    cur.occurrences + d.occurrences,
                )
    ordered = sorted(merged.values(), key=lambda d: (-d.occurrences, -d.weight, d.pair))
    return Explanation(tuple(ordered), compared)


@dataclass(frozen=True)
class AdversarialSample:
    demands: DemandMatrix
    gap: float
    normalized_gap: float = 0.0
    signature: tuple[Pair, ...] = ()
    heuristic_met: float = 0.0
    optimal_met: float = 0.0

    def to_dict(self) -> dict:
        return {
            "demands": self.demands.to_list(),
            "gap": self.gap,
            "normalized_gap": self.normalized_gap,
            "signature": [list(p) for p in self.signature],
            "heuristic_met": self.heuristic_met,
            "optimal_met": self.optimal_met,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdversarialSample":
        return cls(
            DemandMatrix.from_list(d["demands"]),
            d["gap"],
            d.get("normalized_gap", 0.0),
            tuple((a, b) for a, b in d.get("signature", [])),
            d.get("heuristic_met", 0.0),
            d.get("optimal_met", 0.0),
        )


@dataclass(frozen=True)
class Evaluation:
    gap: float
    heuristic_met: float
    optimal_met: float
    explanation: Explanation


def evaluate_gap(
    program: HeuristicProgram, topology: Topology, demands: DemandMatrix, paths: PathSet
) -> Evaluation:
    """Optimal minus heuristic throughput on one instance, with the explanation."""
    opt = solve_optimal(topology, demands, paths)
    heur = interpret(program, topology, demands, paths)
    gap = throughput_gap(opt.total_met, heur.total_met)
    return Evaluation(gap, heur.total_met, opt.total_met, explain(heur, opt, demands))


def evaluate_samples(
    program: HeuristicProgram,
    topology: Topology,
    matrices: Sequence[DemandMatrix],
    paths: PathSet,
    base_worst: float | None = None,
) -> list[AdversarialSample]:
    """Score arbitrary demand matrices (e.g. normal samples) like adversarial ones."""
    out = []
    for dm in matrices:
        ev = evaluate_gap(program, topology, dm, paths)
        out.append(
            AdversarialSample(dm, ev.gap, _normalize(ev.gap, base_worst), ev.explanation.signature,
                              ev.heuristic_met, ev.optimal_met)
        )
    return out


def _normalize(gap: float, base_worst: float | None) -> float:
    if not base_worst or base_worst <= 0:
        return 0.0
    return gap / base_worst


class _GridSearch:
    """Restart hill climbing on the grid-quantized demand space."""

    def __init__(self, program, topology, space, paths, budget, rng, grid, step_frac, executor):
        self.program = program
        self.topology = topology
        self.space = space
        self.paths = paths
        self.budget = budget
        self.rng = rng
        self.grid = grid
        self.executor = executor
        self.lo = np.array([b[0] for b in space.bounds])
        self.hi = np.array([b[1] for b in space.bounds])
        # highest grid point inside each upper bound
        self.top = np.floor((self.hi - self.lo) / grid + 1e-9).astype(int)
        self.steps = np.maximum(1, np.round(step_frac * (self.hi - self.lo) / grid)).astype(int)
        self.cache: dict[tuple[int, ...], Evaluation] = {}
        self.proposals = 0

    def point(self, key: tuple[int, ...]) -> np.ndarray:
        return self.lo + np.asarray(key) * self.grid

    def feasible(self, key: tuple[int, ...]) -> bool:
        if self.space.total_cap is None:
            return True
        return float(self.point(key).sum()) <= self.space.total_cap + 1e-9

    @property
    def exhausted(self) -> bool:
        return len(self.cache) >= self.budget or self.proposals > 50 * self.budget

    def evaluate(self, keys: list[tuple[int, ...]]) -> list[Evaluation | None]:
        self.proposals += len(keys)
        fresh: list[tuple[int, ...]] = []
        for k in keys:
            if k not in self.cache and k not in fresh:
                fresh.append(k)
        fresh = fresh[: max(0, self.budget - len(self.cache))]
        matrices = [self.space.matrix(self.point(k)) for k in fresh]
        fn = lambda dm: evaluate_gap(self.program, self.topology, dm, self.paths)  # noqa: E731
        results = list(self.executor.map(fn, matrices)) if self.executor else [fn(dm) for dm in matrices]
        for k, ev in zip(fresh, results):
            self.cache[k] = ev
        return [self.cache.get(k) for k in keys]

    def random_key(self) -> tuple[int, ...]:
        for _ in range(100):
            key = tuple(int(self.rng.integers(0, t + 1)) for t in self.top)
            if self.feasible(key):
                return key
        return tuple(0 for _ in self.top)

    def climb(self) -> None:
        cur = self.random_key()
        (cur_ev,) = self.evaluate([cur])
        if cur_ev is None:
            return
        scale = 1.0
        while not self.exhausted:
            steps = np.maximum(1, np.floor(self.steps * scale)).astype(int)
            neighbors = []
            for d in range(len(cur)):
                for sign in (1, -1):
                    v = min(self.top[d], max(0, cur[d] + sign * int(steps[d])))
                    key = cur[:d] + (v,) + cur[d + 1 :]
                    if key != cur and self.feasible(key):
                        neighbors.append(key)
            evals = self.evaluate(neighbors)
            best_key, best_ev = None, None
            for key, ev in zip(neighbors, evals):
                if ev is not None and (best_ev is None or ev.gap > best_ev.gap):
                    best_key, best_ev = key, ev
            if best_ev is not None and best_ev.gap > cur_ev.gap + 1e-12:
                cur, cur_ev = best_key, best_ev
            elif np.all(steps <= 1):
                return
            else:
                scale /= 2

    def run(self) -> None:
        while not self.exhausted:
            self.climb()


def find_adversarial(
    program: HeuristicProgram,
    topology: Topology,
    space: DemandSpace,
    budget: int,
    seed: int,
    paths: PathSet | None = None,
    grid: float = 1.0,
    step_frac: float = 0.1,
    keep: int | None = None,
    base_worst: float | None = None,
    workers: int = 1,
) -> list[AdversarialSample]:
    """Search the demand space for matrices where ``program`` trails the optimum.

    Seeded restart hill climbing over volumes quantized to ``grid``: moves
    perturb one pair by a step of ``step_frac`` of its range, halving down to
    one grid unit before restarting. ``budget`` counts distinct gap
    evaluations. Evaluations inside one neighborhood may run on ``workers``
    threads; the climb only advances after the whole batch is scored, so the
    result does not depend on the worker count.

    Returns distinct evaluated samples by decreasing gap (at most ``keep``).
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    problems = validate(program)
    if problems:
        raise ProgramError(problems)
    space.check_topology(topology)
    if paths is None:
        paths = build_path_set(topology, space.pairs)
    rng = np.random.default_rng(seed)
    executor: Executor | None = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        search = _GridSearch(program, topology, space, paths, budget, rng, grid, step_frac, executor)
        search.run()
    finally:
        if executor is not None:
            executor.shutdown()

    ranked = sorted(search.cache.items(), key=lambda kv: (-kv[1].gap, kv[0]))
    if keep is not None:
        ranked = ranked[:keep]
    worst = base_worst if base_worst is not None else (ranked[0][1].gap if ranked else 0.0)
    samples = []
    for key, ev in ranked:
        samples.append(
            AdversarialSample(
                space.matrix(search.point(key)),
                ev.gap,
                _normalize(ev.gap, worst),
                ev.explanation.signature,
                ev.heuristic_met,
                ev.optimal_met,
            )
        )
    logger.debug("adversarial search: %d evaluations, best gap %s", len(search.cache),
                 samples[0].gap if samples else None)
    return samples


def sample_normal(space: DemandSpace, n: int, seed: int) -> list[DemandMatrix]:
    """Uniform samples from the box (rejection against ``total_cap`` when set)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = np.random.default_rng(seed)
    lo = np.array([b[0] for b in space.bounds])
    hi = np.array([b[1] for b in space.bounds])
    out = []
    while len(out) < n:
        x = rng.uniform(lo, hi)
        if space.total_cap is not None and x.sum() > space.total_cap:
            # shrink toward the lower corner rather than looping forever
            excess = x.sum() - space.total_cap
            slack = (x - lo).sum()
            if slack > 0:
                x = x - (x - lo) * min(1.0, excess / slack)
        out.append(space.matrix(x))
    return out


@dataclass(frozen=True)
class LinearConstraint:
    """sum(coeffs[pair] * volume[pair]) <= bound"""

    coeffs: tuple[tuple[Pair, float], ...]
    bound: float

    def holds(self, vols: dict[Pair, float], tol: float = 1e-9) -> bool:
        return sum(c * vols.get(p, 0.0) for p, c in self.coeffs) <= self.bound + tol

    def to_dict(self) -> dict:
        return {"coeffs": [[list(p), c] for p, c in self.coeffs], "bound": self.bound}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearConstraint":
        return cls(tuple(((p[0], p[1]), c) for p, c in d["coeffs"]), d["bound"])


@dataclass
class Region:
    id: str
    box: dict[Pair, tuple[float, float]]
    description: str
    signature: tuple[Pair, ...] = ()
    linear: tuple[LinearConstraint, ...] = ()
    members: list[AdversarialSample] = field(default_factory=list)

    def contains(self, demands: DemandMatrix, tol: float = 1e-9) -> bool:
        vols = demands.volumes()
        for pair, v in vols.items():
            if pair not in self.box and v > tol:
                return False
        for pair, (lo, hi) in self.box.items():
            v = vols.get(pair, 0.0)
            if v < lo - tol or v > hi + tol:
                return False
        return all(c.holds(vols, tol) for c in self.linear)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "description": self.description,
            "signature": [list(p) for p in self.signature],
            "box": [{"pair": list(p), "lo": lo, "hi": hi} for p, (lo, hi) in self.box.items()],
            "linear": [c.to_dict() for c in self.linear],
            "members": [m.to_dict() for m in self.members],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Region":
        return cls(
            d["id"],
            {(b["pair"][0], b["pair"][1]): (b["lo"], b["hi"]) for b in d["box"]},
            d["description"],
            tuple((a, b) for a, b in d.get("signature", [])),
            tuple(LinearConstraint.from_dict(c) for c in d.get("linear", [])),
            [AdversarialSample.from_dict(m) for m in d.get("members", [])],
        )


def _jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def _describe_region(signature: Sequence[Pair], box: dict, members: list[AdversarialSample]) -> str:
    if signature:
        who = ", ".join(_pair_str(p) for p in signature)
        head = f"The heuristic and the optimal route demand(s) {who} on different paths"
    else:
        head = "The heuristic and the optimal route every demand on the same dominant paths"
    worst = max((m.gap for m in members), default=0.0)
    bounds = "; ".join(f"{_pair_str(p)} in [{lo:g}, {hi:g}]" for p, (lo, hi) in box.items())
    return f"{head} ({len(members)} samples, worst gap {worst:g}). Volume box: {bounds}."


def partition_regions(
    samples: Sequence[AdversarialSample],
    max_regions: int,
    linear: bool = False,
) -> list[Region]:
    """Group samples by which demands get rerouted, then fit a box per group.

    Groups beyond ``max_regions`` are merged smallest-first into the group
    with the most similar signature. With ``linear`` set, each region also
    bounds the total volume by its members' range.
    """
    if not samples:
        raise ValueError("partition_regions needs at least one sample")
    if max_regions < 1:
        raise ValueError("max_regions must be >= 1")
    groups: dict[frozenset, list[AdversarialSample]] = {}
    for s in samples:
        groups.setdefault(frozenset(s.signature), []).append(s)

    def order(item):
        sig, members = item
        return (-len(members), sorted(sig))

    items = sorted(groups.items(), key=order)
    while len(items) > max_regions:
        sig, members = items.pop()  # smallest, last in order
        best = max(range(len(items)), key=lambda i: (_jaccard(sig, items[i][0]), len(items[i][1]), -i))
        tsig, tmembers = items[best]
        items[best] = (tsig | sig, tmembers + members)
        items = sorted(items, key=order)

    all_pairs = sorted({p for s in samples for p in s.demands.pairs})
    regions = []
    for i, (sig, members) in enumerate(items):
        box = {}
        for pair in all_pairs:
            vals = [m.demands.volume(pair) for m in members]
            box[pair] = (min(vals), max(vals))
        constraints: tuple[LinearConstraint, ...] = ()
        if linear:
            totals = [m.demands.total_volume for m in members]
            constraints = (
                LinearConstraint(tuple((p, 1.0) for p in all_pairs), max(totals)),
                LinearConstraint(tuple((p, -1.0) for p in all_pairs), -min(totals)),
            )
        signature = tuple(sorted(sig))
        regions.append(
            Region(f"R{i}", box, _describe_region(signature, box, members), signature, constraints,
                   sorted(members, key=lambda m: -m.gap))
        )
    return regions


def balanced_batch(
    adversarial: Sequence[AdversarialSample],
    normal: Sequence[AdversarialSample],
    m: int,
) -> tuple[list[AdversarialSample], list[AdversarialSample]]:
    """Top-``m`` adversarial samples by gap and the ``m`` normal samples closest to them."""
    adv = sorted(adversarial, key=lambda s: -s.gap)[:m]
    if not adv:
        return [], list(normal[:m])
    pairs = sorted({p for s in list(adv) + list(normal) for p in s.demands.pairs})

    def vec(s: AdversarialSample) -> np.ndarray:
        return np.array([s.demands.volume(p) for p in pairs])

    anchors = np.stack([vec(s) for s in adv])
    scored = []
    for idx, s in enumerate(normal):
        d = float(np.min(np.linalg.norm(anchors - vec(s), axis=1)))
        scored.append((d, idx))
    scored.sort()
    return adv, [normal[i] for _, i in scored[:m]]


def check_gap(sample: AdversarialSample, program: HeuristicProgram, topology: Topology, paths: PathSet) -> bool:
    """Recompute a sample's gap from scratch and compare within tolerance."""
    ev = evaluate_gap(program, topology, sample.demands, paths)
    return abs(ev.gap - sample.gap) <= EPS_LP * max(1.0, ev.optimal_met)

