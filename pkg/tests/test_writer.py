from __future__ import annotations

import filecmp
import json
import shutil

import numpy as np
import pytest

from scripts import ladder_script, mutation_reply
from teforge.core import EPS_LP, DemandMatrix
from teforge.dsl import GreedyTopK, HeuristicProgram, base_heuristic, specialist_program
from teforge.mock import Script, ScriptedBackend, ScriptEntry, builtin_script
from teforge.writer import (
    Island,
    Member,
    RestoreError,
    WriterConfig,
    candidate_program_text,
    checkpoint,
    is_diverse,
    latest_checkpoint,
    read_candidates,
    restore,
    run_search,
    tournament_select,
)

OTHER = DemandMatrix.from_volumes({("1", "3"): 30, ("1", "2"): 90, ("2", "3"): 100})


def _run(topo, demands, paths, script, run_dir=None, resume=None, **cfg):
    config = WriterConfig(**cfg)
    backend = ScriptedBackend(script)
    state = run_search(config, base_heuristic(), [demands, OTHER], [demands], [], backend, topo, paths,
                       run_dir=run_dir, resume=resume)
    return state


def _nonincreasing(curve):
    train = [r[1] for r in curve]
    held = [r[2] for r in curve if r[2] is not None]
    return all(a >= b for a, b in zip(train, train[1:])) and all(a >= b for a, b in zip(held, held[1:]))


def test_specialist_stops_on_zero_gap(topo, demands, paths, tmp_path):
    state = _run(topo, demands, paths, builtin_script("emit_specialist"), tmp_path)
    assert state.stop_reason == "zero_gap" and state.iteration == 1
    assert state.best_train_gap <= EPS_LP
    assert state.curve[0][1] == pytest.approx(100.0)
    assert _nonincreasing(state.curve)
    cands = read_candidates(tmp_path)
    assert cands[0]["status"] == "accepted" and cands[0]["train_gap"] == 0.0


def test_always_invalid_keeps_base(topo, demands, paths, tmp_path):
    state = _run(topo, demands, paths, builtin_script("always_invalid"), tmp_path, fix_rounds=2)
    base_gap = state.curve[0][1]
    assert state.best_train_gap == base_gap == 100.0
    assert state.best.program.name == "H0"
    cands = read_candidates(tmp_path)
    assert len(cands) == 2 * state.iteration
    assert all(c["status"] == "failed" and c["fix_rounds"] == 2 for c in cands)
    assert state.stop_reason == "patience"
    assert _nonincreasing(state.curve)


def test_fixes_are_counted(topo, demands, paths, tmp_path):
    state = _run(topo, demands, paths, builtin_script("end_to_end"), tmp_path, islands=1)
    assert state.stop_reason == "zero_gap" and state.iteration == 2
    statuses = [(c["status"], c["fix_rounds"]) for c in read_candidates(tmp_path)]
    assert statuses == [("accepted", 0), ("fixed_then_accepted", 1)]


def test_same_seed_same_curve(topo, demands, paths, tmp_path):
    a = _run(topo, demands, paths, ladder_script(), tmp_path / "a", patience=6, seed=5)
    b = _run(topo, demands, paths, ladder_script(), tmp_path / "b", patience=6, seed=5)
    assert a.curve == b.curve
    assert (tmp_path / "a" / "curves.csv").read_bytes() == (tmp_path / "b" / "curves.csv").read_bytes()


def test_archive_and_island_caps(topo, demands, paths):
    state = _run(topo, demands, paths, ladder_script(specialist_at=99, total=12), patience=6, archive=3,
                 island_cap=2)
    assert len(state.archive) <= 3
    assert all(len(i.members) <= 2 for i in state.islands)
    assert state.stop_reason == "max_iterations"


def test_accepted_candidates_are_sound(topo, demands, paths, tmp_path):
    _run(topo, demands, paths, ladder_script(specialist_at=99), tmp_path, patience=6)
    for c in read_candidates(tmp_path):
        if c["status"].endswith("accepted"):
            assert c["train_gap"] <= 100.0 + EPS_LP


def test_resume_matches_uninterrupted(topo, demands, paths, tmp_path):
    full = tmp_path / "full"
    _run(topo, demands, paths, ladder_script(), full, patience=6)
    part = tmp_path / "part"
    shutil.copytree(full, part)
    for p in (part / "checkpoints").glob("iter_*.json"):
        if int(p.stem[5:]) > 3:
            p.unlink()
    state = restore(latest_checkpoint(part))
    assert state.iteration == 3
    _run(topo, demands, paths, ladder_script(), part, resume=state, patience=6)
    cmp = filecmp.dircmp(full, part)
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert filecmp.cmpfiles(full / "checkpoints", part / "checkpoints",
                            sorted(p.name for p in (full / "checkpoints").iterdir()), shallow=False)[1:] == ([], [])


def test_resume_rejects_other_config(topo, demands, paths, tmp_path):
    _run(topo, demands, paths, ladder_script(), tmp_path, patience=6)
    state = restore(tmp_path / "checkpoints" / "iter_0002.json")
    with pytest.raises(RestoreError) as exc:
        _run(topo, demands, paths, ladder_script(), tmp_path, resume=state, patience=6, seed=9)
    assert exc.value.section == "config_hash"


def test_checkpoint_round_trip_is_byte_equal(topo, demands, paths, tmp_path):
    _run(topo, demands, paths, ladder_script(), tmp_path / "run", patience=6)
    for src in sorted((tmp_path / "run" / "checkpoints").iterdir()):
        out = checkpoint(restore(src), tmp_path / "again")
        assert out.read_bytes() == src.read_bytes()


@pytest.mark.parametrize(
    "damage, section",
    [
        (lambda t: t[: len(t) // 2], "file"),
        (lambda t: json.dumps({**json.loads(t), "version": 7}), "version"),
        (lambda t: json.dumps({k: v for k, v in json.loads(t).items() if k != "archive"}), "archive"),
        (lambda t: json.dumps({**json.loads(t), "rng": {"bit_generator": "nope"}}), "rng"),
        (lambda t: json.dumps({**json.loads(t), "curve": [[0]]}), "curve"),
        (lambda t: json.dumps({**json.loads(t), "progress": {}}), "progress"),
    ],
)
def test_damaged_checkpoint_names_section(topo, demands, paths, tmp_path, damage, section):
    _run(topo, demands, paths, builtin_script("emit_specialist"), tmp_path)
    path = tmp_path / "checkpoints" / "iter_0001.json"
    path.write_text(damage(path.read_text()))
    with pytest.raises(RestoreError) as exc:
        restore(path)
    assert exc.value.section == section


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(RestoreError) as exc:
        restore(tmp_path / "nope.json")
    assert exc.value.section == "file"


def test_tournament_prefers_better_member():
    good = Member(base_heuristic(10.0), (1.0,))
    bad = Member(base_heuristic(20.0), (5.0,))
    island = Island(0, [bad, good])
    rng = np.random.default_rng(0)
    wins = sum(tournament_select(island, rng)[0] is good for _ in range(10_000))
    # with replacement the better of two wins with probability 3/4
    assert wins / 10_000 >= 0.74


def test_diversity_uses_behavior():
    island = Island(0, [Member(base_heuristic(), (1.0,))])
    twin = HeuristicProgram(base_heuristic().stages, name="renamed", lineage=("x",))
    assert not is_diverse(twin, island)
    assert is_diverse(base_heuristic(61.0), island)
    assert is_diverse(HeuristicProgram((GreedyTopK(1),)), island)


def test_candidate_program_text_shapes():
    prog = specialist_program()
    for reply in (mutation_reply(prog), f"```json\n{prog.to_json()}\n```",
                  json.dumps([{"code": prog.to_json(), "reasoning": ""}])):
        assert json.loads(candidate_program_text(reply)) == prog.to_dict()
    with pytest.raises(ValueError):
        candidate_program_text("[]")


def test_writer_config_validation():
    with pytest.raises(ValueError):
        WriterConfig(islands=0)
    with pytest.raises(ValueError):
        WriterConfig(iterations=2, patience=3)
    with pytest.raises(ValueError, match="bogus"):
        WriterConfig.from_dict({"bogus": 1})


def test_backend_failure_marks_skipped(topo, demands, paths):
    script = Script((ScriptEntry("x", "fix"),), exhaustion="error")
    state = _run(topo, demands, paths, script, iterations=1, patience=1)
    assert state.best_train_gap == 100.0 and state.stop_reason == "max_iterations"
