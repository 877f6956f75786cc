"""Readers and writers for topology and demand-matrix files."""

from __future__ import annotations

import json
from pathlib import Path as FsPath

import networkx as nx

from .core import DemandMatrix, Edge, InstanceError, Topology


def load_topology_json(path: str | FsPath) -> Topology:
    data = json.loads(FsPath(path).read_text(encoding="utf-8"))
    return topology_from_dict(data)


def topology_from_dict(data: dict) -> Topology:
    try:
        edges = [(e["src"], e["dst"], e["capacity"]) for e in data["edges"]]
        return Topology.build(data["nodes"], edges)
    except (KeyError, TypeError) as exc:
        raise InstanceError(f"malformed topology object: {exc!r}") from exc


def save_topology_json(topology: Topology, path: str | FsPath) -> None:
    FsPath(path).write_text(json.dumps(topology.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_topology_graphml(
    path: str | FsPath,
    capacity_attr: str = "capacity",
    default_capacity: float | None = None,
    node_label_attr: str | None = None,
) -> Topology:
    """Read a GraphML file (e.g. from the Internet Topology Zoo).

    Undirected graphs expand every link into two directed edges with equal
    capacity. Parallel links between the same ordered pair are merged by
    summing their capacities. Links without ``capacity_attr`` get
    ``default_capacity``; if that is None they are an error.
    """
    graph = nx.read_graphml(str(path))

    def name(n) -> str:
        if node_label_attr is not None and node_label_attr in graph.nodes[n]:
            return str(graph.nodes[n][node_label_attr])
        return str(n)

    nodes = [name(n) for n in graph.nodes]
    if len(set(nodes)) != len(nodes):
        raise InstanceError(f"node labels from {node_label_attr!r} are not unique")

    caps: dict[tuple[str, str], float] = {}
    for u, v, attrs in graph.edges(data=True):
        if u == v:
            continue
        raw = attrs.get(capacity_attr, default_capacity)
        if raw is None:
            raise InstanceError(f"link {u}-{v} has no {capacity_attr!r} attribute")
        cap = float(raw)
        pairs = [(name(u), name(v))]
        if not graph.is_directed():
            pairs.append((name(v), name(u)))
        for pair in pairs:
            caps[pair] = caps.get(pair, 0.0) + cap
    return Topology.build(nodes, [Edge(s, t, c) for (s, t), c in caps.items()])


def load_topology(path: str | FsPath, **graphml_kwargs) -> Topology:
    """Dispatch on file suffix: ``.graphml``/``.xml`` or JSON."""
    suffix = FsPath(path).suffix.lower()
    if suffix in (".graphml", ".xml"):
        return load_topology_graphml(path, **graphml_kwargs)
    return load_topology_json(path)


def load_demands_json(path: str | FsPath) -> DemandMatrix:
    data = json.loads(FsPath(path).read_text(encoding="utf-8"))
    try:
        return DemandMatrix.from_list(data)
    except (KeyError, TypeError) as exc:
        raise InstanceError(f"malformed demand list: {exc!r}") from exc


def save_demands_json(demands: DemandMatrix, path: str | FsPath) -> None:
    FsPath(path).write_text(json.dumps(demands.to_list(), indent=2) + "\n", encoding="utf-8")
