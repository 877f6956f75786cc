"""Random program generator shared by the fuzz tests."""

from __future__ import annotations

import numpy as np

from teforge.dsl import ORDERINGS, GreedyTopK, HeuristicProgram, HotspotReopt, LpResidual, PinSmall


def random_stage(rng: np.random.Generator):
    kind = int(rng.integers(4))
    if kind == 0:
        return PinSmall(float(rng.choice([0.0, 0.5, 1.0, 2.0, 3.5, 60.0])))
    if kind == 1:
        return GreedyTopK(int(rng.integers(1, 5)), bool(rng.integers(2)))
    if kind == 2:
        if rng.integers(2):
            return LpResidual("heavy_subset", int(rng.integers(1, 4)))
        return LpResidual()
    return HotspotReopt(float(rng.choice([0.1, 0.5, 0.8, 1.0])), int(rng.integers(1, 4)), int(rng.integers(1, 3)))


def random_program(rng: np.random.Generator, max_stages: int = 4) -> HeuristicProgram:
    stages = tuple(random_stage(rng) for _ in range(int(rng.integers(1, max_stages + 1))))
    return HeuristicProgram(stages, ordering=str(rng.choice(ORDERINGS)), name="fuzz")
