from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from generators import random_program
from oracles import pin_then_grid
from teforge.core import EPS_LP, build_path_set
from teforge.dsl import (
    GreedyTopK,
    HeuristicProgram,
    LpResidual,
    PinSmall,
    ProgramError,
    base_heuristic,
    interpret,
    optimal_program,
    parse_program,
    specialist_program,
    validate,
)
from teforge.instances import random_demands, random_topology


def test_base_on_counterexample(topo, demands, paths):
    # 150 from pinning by hand plus grid search (tests/oracles.py)
    assert pin_then_grid(topo, demands, paths, 60, 5.0) == 150
    out = interpret(base_heuristic(), topo, demands, paths)
    assert abs(out.total_met - 150) <= EPS_LP
    assert out.chosen_paths[("1", "3")].nodes == ("1", "2", "3")
    assert out.assignment.violations(topo) == []


def test_specialist_and_lp_reach_optimum(topo, demands, paths):
    for prog in (specialist_program(), optimal_program()):
        out = interpret(prog, topo, demands, paths)
        assert abs(out.total_met - 250) <= EPS_LP
    assert interpret(specialist_program(), topo, demands, paths).chosen_paths[("1", "3")].nodes == (
        "1", "4", "5", "3")


def test_threshold_is_strict(topo, demands, paths):
    # 50 < 50 is false, so nothing is pinned and the LP finds the optimum
    assert abs(interpret(base_heuristic(50), topo, demands, paths).total_met - 250) <= EPS_LP
    assert abs(interpret(base_heuristic(50.5), topo, demands, paths).total_met - 150) <= EPS_LP


def test_round_trip_json():
    prog = specialist_program()
    again = parse_program(prog.to_json())
    assert again == prog
    assert parse_program(prog.to_dict()) == prog
    lp = HeuristicProgram((LpResidual("heavy_subset", 2),), name="x", lineage=("a", "b"))
    assert parse_program(lp.to_json()) == lp


def test_behavior_key_ignores_name_and_lineage():
    a = HeuristicProgram((GreedyTopK(2),), name="a", lineage=("p",))
    b = HeuristicProgram((GreedyTopK(2),), name="b")
    c = HeuristicProgram((GreedyTopK(3),), name="a")
    assert a.behavior_key() == b.behavior_key() != c.behavior_key()


@pytest.mark.parametrize(
    "raw, fragment",
    [
        ("{not json", "invalid JSON"),
        ([1, 2], "must be a JSON object"),
        ({"stages": []}, "non-empty list"),
        ({"stages": [{"type": "shortest_first"}]}, "unknown stage type 'shortest_first'"),
        ({"stages": [{"type": "pin_small"}]}, "missing field 'threshold'"),
        ({"stages": [{"type": "pin_small", "threshold": "60"}]}, "must be number"),
        ({"stages": [{"type": "pin_small", "threshold": -1}]}, "threshold must be >= 0"),
        ({"stages": [{"type": "greedy_top_k", "k": 0, "split": True}]}, "k must be"),
        ({"stages": [{"type": "greedy_top_k", "k": 2.5, "split": True}]}, "must be int"),
        ({"stages": [{"type": "lp_residual", "scope": "some"}]}, "scope must be one of"),
        ({"stages": [{"type": "lp_residual", "scope": "heavy_subset"}]}, "missing field 'count'"),
        ({"stages": [{"type": "hotspot_reopt", "util_threshold": 1.5, "max_hotspots": 1, "radius": 1}]},
         "util_threshold must be in (0, 1]"),
        ({"stages": [{"type": "lp_residual", "scope": "all_remaining", "x": 1}]}, "unexpected field 'x'"),
        ({"ordering": "random", "stages": [{"type": "lp_residual", "scope": "all_remaining"}]},
         "unknown ordering"),
        ({"budget_ms": 0, "stages": [{"type": "lp_residual", "scope": "all_remaining"}]}, "budget_ms"),
        ({"code": 1, "stages": [{"type": "lp_residual", "scope": "all_remaining"}]}, "unexpected top-level"),
    ],
)
def test_validate_messages(raw, fragment):
    text = raw if isinstance(raw, str) else json.dumps(raw)
    problems = validate(text)
    assert any(fragment in p for p in problems), problems
    with pytest.raises(ProgramError) as exc:
        parse_program(text)
    assert exc.value.violations == problems


def test_validate_reports_every_problem():
    raw = {"ordering": "x", "stages": [{"type": "pin_small"}, {"type": "nope"}]}
    assert len(validate(raw)) == 3


def test_interpret_rejects_invalid_program(topo, demands, paths):
    with pytest.raises(ProgramError):
        interpret(HeuristicProgram((PinSmall(-1.0),)), topo, demands, paths)


def test_timeout_returns_feasible_partial(topo, demands, paths):
    # each clock read advances 0.4 s, so the 1 s budget expires after the first stage
    ticks = iter(np.arange(0, 100, 0.4))
    prog = HeuristicProgram((PinSmall(60.0), LpResidual()), budget_ms=1000)
    out = interpret(prog, topo, demands, paths, clock=lambda: float(next(ticks)))
    assert out.timed_out
    assert out.assignment.violations(topo) == []
    assert out.total_met < 150


def test_missing_paths_leave_demand_unrouted(topo, demands):
    out = interpret(specialist_program(), topo, demands, {})
    assert out.total_met == 0


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_fuzz_programs_stay_feasible(seed):
    rng = np.random.default_rng(seed)
    topo = random_topology(int(rng.integers(2, 7)), int(rng.integers(0, 8)), rng)
    dm = random_demands(topo, int(rng.integers(1, 6)), rng, volume_choices=(0, 0.5, 1, 2.5, 4, 9))
    paths = build_path_set(topo, dm.pairs, int(rng.integers(1, 5)))
    prog = random_program(rng)
    out = interpret(prog, topo, dm, paths)
    assert out.assignment.violations(topo) == []
    assert out.total_met <= dm.total_volume + EPS_LP


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_interpret_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    topo = random_topology(5, 4, rng)
    dm = random_demands(topo, 4, rng)
    paths = build_path_set(topo, dm.pairs, 3)
    prog = random_program(rng)
    a = interpret(prog, topo, dm, paths)
    b = interpret(prog, topo, dm, paths)
    assert a.assignment.flows == b.assignment.flows


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_lp_program_matches_optimum(seed):
    from teforge.core import solve_optimal

    rng = np.random.default_rng(seed)
    topo = random_topology(int(rng.integers(3, 7)), int(rng.integers(0, 6)), rng)
    dm = random_demands(topo, int(rng.integers(1, 5)), rng)
    paths = build_path_set(topo, dm.pairs)
    opt = solve_optimal(topo, dm, paths).total_met
    assert abs(interpret(optimal_program(), topo, dm, paths).total_met - opt) <= EPS_LP * max(1, opt)
