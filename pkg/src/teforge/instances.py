"""Reference and randomly generated problem instances."""

from __future__ import annotations

import numpy as np

from .core import DemandMatrix, Topology


def counterexample_topology() -> Topology:
    """Five-node graph where pinning a small 1->3 demand starves two large ones.

    The direct route 1-2-3 has capacity 100 per link; the detour 1-4-5-3 has
    capacity 50 per link.
    """
    return Topology.build(
        ["1", "2", "3", "4", "5"],
        [("1", "2", 100), ("2", "3", 100), ("1", "4", 50), ("4", "5", 50), ("5", "3", 50)],
    )


def counterexample_demands() -> DemandMatrix:
    return DemandMatrix.from_volumes({("1", "3"): 50, ("1", "2"): 100, ("2", "3"): 100})


def twin_counterexample_topology() -> Topology:
    """Two disjoint copies of the counterexample gadget (nodes 1-5 and 6-10)."""
    a = counterexample_topology()
    nodes = list(a.nodes) + [str(int(n) + 5) for n in a.nodes]
    edges = [(e.src, e.dst, e.capacity) for e in a.edges]
    edges += [(str(int(e.src) + 5), str(int(e.dst) + 5), e.capacity) for e in a.edges]
    return Topology.build(nodes, edges)


def random_topology(
    n_nodes: int,
    n_edges: int,
    rng: np.random.Generator,
    capacity_choices: tuple[float, ...] = (1, 2, 3, 4),
) -> Topology:
    """Random directed graph: a bidirectional ring backbone plus random chords.

    ``n_edges`` counts directed edges beyond the ring; capacities are drawn
    from ``capacity_choices``.
    """
    nodes = [str(i) for i in range(n_nodes)]
    keys: list[tuple[str, str]] = []
    for i in range(n_nodes):
        j = (i + 1) % n_nodes
        if n_nodes > 1:
            keys.append((nodes[i], nodes[j]))
            if n_nodes > 2:
                keys.append((nodes[j], nodes[i]))
    keys = list(dict.fromkeys(keys))
    candidates = [(a, b) for a in nodes for b in nodes if a != b and (a, b) not in keys]
    if candidates and n_edges > 0:
        pick = rng.choice(len(candidates), size=min(n_edges, len(candidates)), replace=False)
        keys += [candidates[i] for i in sorted(pick)]
    caps = rng.choice(np.asarray(capacity_choices, dtype=float), size=len(keys))
    return Topology.build(nodes, [(a, b, float(c)) for (a, b), c in zip(keys, caps)])


def random_demands(
    topology: Topology,
    n_demands: int,
    rng: np.random.Generator,
    volume_choices: tuple[float, ...] = (0, 1, 2, 3),
) -> DemandMatrix:
    """Random demand matrix over distinct ordered pairs with grid volumes."""
    pairs = [(a, b) for a in topology.nodes for b in topology.nodes if a != b]
    idx = rng.choice(len(pairs), size=min(n_demands, len(pairs)), replace=False)
    vols = rng.choice(np.asarray(volume_choices, dtype=float), size=len(idx))
    return DemandMatrix.from_volumes({pairs[i]: float(v) for i, v in zip(sorted(idx), vols)})
