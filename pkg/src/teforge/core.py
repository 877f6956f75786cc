"""Traffic-engineering problem model: topologies, demands, paths and flows.

The optimal router here is the path-formulation maximum-throughput LP,
restricted to a shared candidate ``PathSet`` so that heuristics and the
optimum choose from the same paths.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy.optimize import linprog

logger = logging.getLogger(__name__)

EPS_CAP = 1e-6
EPS_LP = 1e-6
# flows below this are treated as numerical noise and dropped
FLOW_FLOOR = 1e-9
DEFAULT_K_OPT = 8

Pair = tuple[str, str]
EdgeKey = tuple[str, str]


class InstanceError(ValueError):
    """Raised for malformed topologies, demands or unknown node ids."""


class SolverError(RuntimeError):
    """Raised when the LP backend fails to return an optimal solution."""


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    capacity: float

    @property
    def key(self) -> EdgeKey:
        return (self.src, self.dst)


@dataclass(frozen=True)
class Topology:
    """Capacitated directed graph. Build via ``Topology.build`` for validation."""

    nodes: tuple[str, ...]
    edges: tuple[Edge, ...]
    _succ: Mapping[str, tuple[str, ...]] = field(repr=False, compare=False, default=None)  # type: ignore[assignment]
    _cap: Mapping[EdgeKey, float] = field(repr=False, compare=False, default=None)  # type: ignore[assignment]

    @classmethod
    def build(cls, nodes: Iterable, edges: Iterable) -> "Topology":
        """Validate and construct a topology.

        ``edges`` items may be ``Edge`` objects or ``(src, dst, capacity)`` tuples.
        """
        node_list = tuple(str(n) for n in nodes)
        if len(set(node_list)) != len(node_list):
            raise InstanceError("duplicate node identifiers")
        known = set(node_list)
        edge_list: list[Edge] = []
        seen: set[EdgeKey] = set()
        for item in edges:
            e = item if isinstance(item, Edge) else Edge(str(item[0]), str(item[1]), float(item[2]))
            if e.src not in known or e.dst not in known:
                raise InstanceError(f"edge {e.src}->{e.dst} references an unknown node")
            if e.src == e.dst:
                raise InstanceError(f"self-loop on node {e.src}")
            if not e.capacity >= 0 or e.capacity == float("inf"):
                raise InstanceError(f"edge {e.src}->{e.dst} has invalid capacity {e.capacity}")
            if e.key in seen:
                raise InstanceError(f"duplicate edge {e.src}->{e.dst}")
            seen.add(e.key)
            edge_list.append(e)
        return cls(node_list, tuple(edge_list))

    def __post_init__(self) -> None:
        succ: dict[str, list[str]] = {n: [] for n in self.nodes}
        cap: dict[EdgeKey, float] = {}
        for e in self.edges:
            succ[e.src].append(e.dst)
            cap[e.key] = e.capacity
        object.__setattr__(self, "_succ", {n: tuple(sorted(v)) for n, v in succ.items()})
        object.__setattr__(self, "_cap", cap)

    def successors(self, node: str) -> tuple[str, ...]:
        return self._succ[node]

    def capacity(self, src: str, dst: str) -> float:
        return self._cap[(src, dst)]

    @property
    def capacities(self) -> dict[EdgeKey, float]:
        return dict(self._cap)

    def has_node(self, node: str) -> bool:
        return node in self._succ

    def has_edge(self, src: str, dst: str) -> bool:
        return (src, dst) in self._cap

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "edges": [{"src": e.src, "dst": e.dst, "capacity": e.capacity} for e in self.edges],
        }


@dataclass(frozen=True)
class Demand:
    source: str
    target: str
    volume: float

    def __post_init__(self) -> None:
        if self.source == self.target:
            raise InstanceError(f"demand {self.source}->{self.target} has source == target")
        if not self.volume >= 0:
            raise InstanceError(f"demand {self.source}->{self.target} has negative volume")

    @property
    def pair(self) -> Pair:
        return (self.source, self.target)


@dataclass(frozen=True)
class DemandMatrix:
    demands: tuple[Demand, ...]

    def __post_init__(self) -> None:
        pairs = [d.pair for d in self.demands]
        if len(set(pairs)) != len(pairs):
            raise InstanceError("duplicate (source, target) pair in demand matrix")

    @classmethod
    def from_volumes(cls, volumes: Mapping[Pair, float]) -> "DemandMatrix":
        return cls(tuple(Demand(s, t, float(v)) for (s, t), v in volumes.items()))

    @property
    def pairs(self) -> list[Pair]:
        return [d.pair for d in self.demands]

    def volumes(self) -> dict[Pair, float]:
        return {d.pair: d.volume for d in self.demands}

    def volume(self, pair: Pair) -> float:
        for d in self.demands:
            if d.pair == pair:
                return d.volume
        return 0.0

    @property
    def total_volume(self) -> float:
        return float(sum(d.volume for d in self.demands))

    def __iter__(self) -> Iterator[Demand]:
        return iter(self.demands)

    def __len__(self) -> int:
        return len(self.demands)

    def to_list(self) -> list[dict]:
        return [{"src": d.source, "dst": d.target, "volume": d.volume} for d in self.demands]

    @classmethod
    def from_list(cls, items: Iterable[Mapping]) -> "DemandMatrix":
        return cls(tuple(Demand(str(i["src"]), str(i["dst"]), float(i["volume"])) for i in items))


@dataclass(frozen=True, order=True)
class Path:
    """A simple directed path, stored as its node sequence."""

    nodes: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.nodes) < 2:
            raise InstanceError("a path needs at least one edge")
        if len(set(self.nodes)) != len(self.nodes):
            raise InstanceError(f"path {'-'.join(self.nodes)} repeats a node")

    @property
    def edges(self) -> tuple[EdgeKey, ...]:
        return tuple(zip(self.nodes[:-1], self.nodes[1:]))

    @property
    def hops(self) -> int:
        return len(self.nodes) - 1

    @property
    def source(self) -> str:
        return self.nodes[0]

    @property
    def target(self) -> str:
        return self.nodes[-1]

    @property
    def sort_key(self) -> tuple[int, tuple[str, ...]]:
        """Tie-break rule: hop count first, then lexicographic node sequence."""
        return (self.hops, self.nodes)

    def __str__(self) -> str:
        return "-".join(self.nodes)


PathSet = dict[Pair, list[Path]]


def _hops_to(topology: Topology, target: str) -> dict[str, int]:
    pred: dict[str, list[str]] = {n: [] for n in topology.nodes}
    for e in topology.edges:
        pred[e.dst].append(e.src)
    dist = {target: 0}
    queue = deque([target])
    while queue:
        v = queue.popleft()
        for u in pred[v]:
            if u not in dist:
                dist[u] = dist[v] + 1
                queue.append(u)
    return dist


def k_shortest_paths(topology: Topology, source: str, target: str, k: int) -> list[Path]:
    """Return up to ``k`` loop-free paths ordered by (hop count, node sequence).

    Zero-capacity edges are kept; they simply cannot carry flow. Paths are
    enumerated one hop length at a time by a depth-first search over sorted
    successors, pruned by the hop distance to ``target``.
    """
    for node in (source, target):
        if not topology.has_node(node):
            raise InstanceError(f"unknown node id {node!r}")
    if source == target:
        raise InstanceError("source and target must differ")
    if k < 1:
        raise InstanceError("k must be >= 1")

    dist = _hops_to(topology, target)
    if source not in dist:
        return []

    found: list[Path] = []
    n = len(topology.nodes)
    for length in range(dist[source], n):
        stack: list[str] = [source]
        on_path = {source}

        def extend(node: str, remaining: int) -> bool:
            # returns True once k paths have been collected
            if remaining == 0:
                if node == target:
                    found.append(Path(tuple(stack)))
                    return len(found) >= k
                return False
            for nxt in topology.successors(node):
                if nxt in on_path or dist.get(nxt, n) > remaining - 1:
                    continue
                if nxt == target and remaining - 1 > 0:
                    continue
                stack.append(nxt)
                on_path.add(nxt)
                done = extend(nxt, remaining - 1)
                stack.pop()
                on_path.discard(nxt)
                if done:
                    return True
            return False

        if extend(source, length):
            break
    return found


def build_path_set(topology: Topology, pairs: Iterable[Pair], k: int = DEFAULT_K_OPT) -> PathSet:
    """Compute the shared candidate paths for every requested pair."""
    if k < 1:
        raise InstanceError("k must be >= 1")
    path_set: PathSet = {}
    for pair in pairs:
        pair = (str(pair[0]), str(pair[1]))
        if pair not in path_set:
            path_set[pair] = k_shortest_paths(topology, pair[0], pair[1], k)
    return path_set


@dataclass
class FlowAssignment:
    """Path flows plus the demand volumes they were routed against."""

    flows: dict[Path, float]
    demand_volumes: dict[Pair, float]

    @property
    def total_met(self) -> float:
        return total_met(self)

    @property
    def total_demand(self) -> float:
        return float(sum(self.demand_volumes.values()))

    @property
    def total_unmet(self) -> float:
        return self.total_demand - self.total_met

    def edge_flows(self) -> dict[EdgeKey, float]:
        out: dict[EdgeKey, float] = {}
        for path, f in self.flows.items():
            for e in path.edges:
                out[e] = out.get(e, 0.0) + f
        return out

    def pair_flows(self) -> dict[Pair, float]:
        out: dict[Pair, float] = {}
        for path, f in self.flows.items():
            pair = (path.source, path.target)
            out[pair] = out.get(pair, 0.0) + f
        return out

    def paths_for(self, pair: Pair) -> dict[Path, float]:
        return {p: f for p, f in self.flows.items() if (p.source, p.target) == pair}

    def violations(self, topology: Topology, tol: float = EPS_CAP) -> list[str]:
        """List every capacity, demand or conservation violation."""
        problems = []
        for e, f in self.edge_flows().items():
            if not topology.has_edge(*e):
                problems.append(f"flow on missing edge {e[0]}->{e[1]}")
            elif f > topology.capacity(*e) + tol:
                problems.append(f"edge {e[0]}->{e[1]} carries {f} > capacity {topology.capacity(*e)}")
        for path, f in self.flows.items():
            if f < 0:
                problems.append(f"negative flow {f} on {path}")
        for pair, f in self.pair_flows().items():
            vol = self.demand_volumes.get(pair, 0.0)
            if f > vol + tol:
                problems.append(f"pair {pair[0]}->{pair[1]} routes {f} > demand {vol}")
        if abs(self.total_met + self.total_unmet - self.total_demand) > tol:
            problems.append("met + unmet does not equal total demand")
        return problems


def total_met(assignment: FlowAssignment) -> float:
    return float(sum(assignment.flows.values()))


def throughput_gap(optimal_met: float, heuristic_met: float) -> float:
    """``optimal - heuristic``, floored at 0 with solver round-off snapped to exactly 0."""
    gap = optimal_met - heuristic_met
    return gap if gap > FLOW_FLOOR * max(1.0, abs(optimal_met)) else 0.0


@dataclass(frozen=True)
class Commodity:
    pair: Pair
    volume: float
    paths: Sequence[Path]


def solve_path_lp(capacities: Mapping[EdgeKey, float], commodities: Sequence[Commodity]) -> dict[Path, float]:
    """Maximize total routed flow over the given candidate paths.

    Constraints: per-edge flow <= ``capacities[edge]`` and per-commodity flow
    <= its volume. Returns positive path flows only.
    """
    columns: list[Path] = []
    owner: list[int] = []
    for ci, com in enumerate(commodities):
        if com.volume <= FLOW_FLOOR:
            continue
        for p in com.paths:
            if all(capacities.get(e, 0.0) > FLOW_FLOOR for e in p.edges):
                columns.append(p)
                owner.append(ci)
    if not columns:
        return {}

    edge_index: dict[EdgeKey, int] = {}
    for p in columns:
        for e in p.edges:
            edge_index.setdefault(e, len(edge_index))
    used_coms = sorted(set(owner))
    com_row = {ci: len(edge_index) + r for r, ci in enumerate(used_coms)}

    n_rows = len(edge_index) + len(used_coms)
    a_ub = np.zeros((n_rows, len(columns)))
    b_ub = np.zeros(n_rows)
    for j, p in enumerate(columns):
        for e in p.edges:
            a_ub[edge_index[e], j] = 1.0
        a_ub[com_row[owner[j]], j] = 1.0
    for e, i in edge_index.items():
        b_ub[i] = max(0.0, float(capacities.get(e, 0.0)))
    for ci, r in com_row.items():
        b_ub[r] = float(commodities[ci].volume)

    res = linprog(-np.ones(len(columns)), A_ub=a_ub, b_ub=b_ub, bounds=(0, None), method="highs")
    if res.status != 0:
        raise SolverError(
            f"LP failed (status {res.status}: {res.message}); "
            f"{len(columns)} path variables, {n_rows} constraints"
        )

    flows: dict[Path, float] = {}
    for p, x in zip(columns, res.x):
        if x > FLOW_FLOOR:
            flows[p] = flows.get(p, 0.0) + float(x)
    return _repair(flows, capacities)


def _repair(flows: dict[Path, float], capacities: Mapping[EdgeKey, float]) -> dict[Path, float]:
    # scale down paths on edges the solver overfilled by its feasibility tolerance
    usage: dict[EdgeKey, float] = {}
    for p, f in flows.items():
        for e in p.edges:
            usage[e] = usage.get(e, 0.0) + f
    over = {e: capacities.get(e, 0.0) / u for e, u in usage.items() if u > capacities.get(e, 0.0)}
    if not over:
        return flows
    fixed = {}
    for p, f in flows.items():
        scale = min((over[e] for e in p.edges if e in over), default=1.0)
        if f * scale > FLOW_FLOOR:
            fixed[p] = f * scale
    return fixed


def solve_optimal(topology: Topology, demands: DemandMatrix, paths: PathSet) -> FlowAssignment:
    """Maximum total met demand over the candidate paths in ``paths``."""
    commodities = []
    for d in demands:
        if d.pair not in paths:
            raise InstanceError(f"pair {d.source}->{d.target} missing from the path set")
        commodities.append(Commodity(d.pair, d.volume, paths[d.pair]))
    flows = solve_path_lp(topology.capacities, commodities)
    return FlowAssignment(flows, demands.volumes())
