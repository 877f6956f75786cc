"""Acceptance criteria. Each test prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (lines show up in the
terminal even without ``-s``) or ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import filecmp
import json
import shutil
import sys
import time
from pathlib import Path as FsPath

import numpy as np
import pytest

sys.path.insert(0, str(FsPath(__file__).parent))

from generators import random_program  # noqa: E402
from oracles import grid_max_throughput  # noqa: E402
from prompt_cases import golden_mismatches  # noqa: E402
from teforge.analyzer import DemandSpace, Region, explain, find_adversarial  # noqa: E402
from teforge.cli import run as cli  # noqa: E402
from teforge.core import EPS_LP, build_path_set, solve_optimal  # noqa: E402
from teforge.dsl import base_heuristic, interpret, parse_program  # noqa: E402
from teforge.ensemble import load_ensemble, route  # noqa: E402
from teforge.instances import (  # noqa: E402
    counterexample_demands,
    counterexample_topology,
    random_demands,
    random_topology,
)
from teforge.loaders import load_topology  # noqa: E402
from teforge.mock import ScriptedBackend, builtin_script  # noqa: E402
from teforge.pipeline import heldout_set, load_context  # noqa: E402
from teforge.config import load_config  # noqa: E402
from teforge.core import DemandMatrix  # noqa: E402
from teforge.writer import WriterConfig, read_candidates, restore, run_search  # noqa: E402

REPO = FsPath(__file__).resolve().parents[1]
RESULTS: list[str] = []


def report(number: int, title: str, ok: bool, detail: str, capsys=None) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({detail})"
    RESULTS.append(line)
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    assert ok, line


def _twin_config(tmp: FsPath, out: str) -> FsPath:
    raw = json.loads((REPO / "configs" / "end_to_end.json").read_text())
    raw["topology"] = str(REPO / "configs" / raw["topology"])
    raw["output_dir"] = str(tmp / out)
    path = tmp / f"{out}.json"
    path.write_text(json.dumps(raw))
    return path


def _pipeline(cfg: FsPath) -> None:
    for step in ("analyze", "search", "ensemble"):
        code = cli([step, "--config", str(cfg)])
        if code != 0:
            raise RuntimeError(f"{step} exited with {code}")


@pytest.fixture(scope="module")
def twin(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("twin")
    cfg = _twin_config(tmp, "first")
    start = time.perf_counter()
    _pipeline(cfg)
    return {"tmp": tmp, "cfg": cfg, "out": tmp / "first", "seconds": time.perf_counter() - start}


def test_criterion_1_counterexample(capsys):
    start = time.perf_counter()
    topo, dm = counterexample_topology(), counterexample_demands()
    paths = build_path_set(topo, dm.pairs)
    opt = solve_optimal(topo, dm, paths)
    h0 = interpret(base_heuristic(60), topo, dm, paths)
    diffs = explain(h0, opt, dm).differences
    elapsed = time.perf_counter() - start
    ok_diff = (len(diffs) == 1 and diffs[0].pair == ("1", "3") and str(diffs[0].heuristic_path) == "1-2-3"
               and str(diffs[0].optimal_path) == "1-4-5-3")
    ok = abs(opt.total_met - 250) <= EPS_LP and abs(h0.total_met - 150) <= EPS_LP and ok_diff and elapsed < 1
    report(1, "canonical counterexample", ok,
           f"optimal={opt.total_met:g}, H0={h0.total_met:g}, differences={[d.describe() for d in diffs]}, "
           f"{elapsed:.3f}s", capsys)


def test_criterion_2_lp_oracle(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    bad = []
    for i in range(200):
        n = int(rng.integers(2, 7))
        topo = random_topology(n, int(rng.integers(0, 2 * n)), rng)
        dm = random_demands(topo, int(rng.integers(1, 5)), rng)
        paths = build_path_set(topo, dm.pairs)
        lp = solve_optimal(topo, dm, paths).total_met
        grid = grid_max_throughput(topo, dm, paths, 1.0)
        n_paths = sum(len(v) for v in paths.values())
        if not (grid - EPS_LP <= lp <= grid + 1.0 * n_paths + EPS_LP):
            bad.append((i, lp, grid))
    elapsed = time.perf_counter() - start
    report(2, "LP oracle equivalence", not bad and elapsed < 300,
           f"200 instances, {len(bad)} mismatches, {elapsed:.1f}s", capsys)


def test_criterion_3_finder_floor(capsys):
    start = time.perf_counter()
    topo = counterexample_topology()
    space = DemandSpace.box([("1", "3"), ("1", "2"), ("2", "3")], 0, 100)
    best = [find_adversarial(base_heuristic(60), topo, space, budget=2000, seed=s)[0].gap for s in range(5)]
    elapsed = time.perf_counter() - start
    ok = min(best) >= 100 * (1 - 1e-6) and elapsed < 120
    report(3, "adversarial finder floor", ok, f"best gaps per seed {best}, {elapsed:.1f}s", capsys)


def test_criterion_4_feasibility_fuzz(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    violations = crashes = 0
    for _ in range(10_000):
        topo = random_topology(int(rng.integers(2, 8)), int(rng.integers(0, 10)), rng,
                               capacity_choices=(0, 1, 2.5, 4, 10))
        dm = random_demands(topo, int(rng.integers(1, 7)), rng, volume_choices=(0, 0.5, 1, 3, 7, 20))
        paths = build_path_set(topo, dm.pairs, int(rng.integers(1, 6)))
        try:
            out = interpret(random_program(rng), topo, dm, paths)
        except Exception:  # any crash counts
            crashes += 1
            continue
        if out.assignment.violations(topo):
            violations += 1
    elapsed = time.perf_counter() - start
    report(4, "feasibility fuzz", violations == 0 and crashes == 0,
           f"10000 interpretations, {violations} with violations, {crashes} crashes, {elapsed:.1f}s", capsys)


def _nonincreasing(curve) -> bool:
    cols = [[r[1] for r in curve], [r[2] for r in curve if r[2] is not None]]
    return all(a >= b for col in cols for a, b in zip(col, col[1:]))


def test_criterion_5_writer_conformance(tmp_path, capsys):
    topo, dm = counterexample_topology(), counterexample_demands()
    paths = build_path_set(topo, dm.pairs)
    other = DemandMatrix.from_volumes({("1", "3"): 30, ("1", "2"): 90, ("2", "3"): 100})
    config = WriterConfig(islands=2, iterations=6, fix_rounds=3, patience=3)

    def go(script, name):
        state = run_search(config, base_heuristic(60), [dm, other], [dm], [], ScriptedBackend(builtin_script(script)),
                           topo, paths, run_dir=tmp_path / name)
        return state, read_candidates(tmp_path / name)

    spec, _ = go("emit_specialist", "specialist")
    inv, cands = go("always_invalid", "invalid")
    first_improvement = next(r[0] for r in spec.curve if r[1] <= EPS_LP)
    ok_spec = first_improvement == 1 and spec.best_train_gap <= EPS_LP and spec.stop_reason == "zero_gap"
    ok_inv = (inv.best_train_gap == inv.curve[0][1] and inv.best.program.name == "H0"
              and all(c["fix_rounds"] <= config.fix_rounds for c in cands))
    ok = ok_spec and ok_inv and _nonincreasing(spec.curve) and _nonincreasing(inv.curve)
    report(5, "writer loop conformance", ok,
           f"specialist run: gap {spec.best_train_gap:g} at iteration {spec.iteration} ({spec.stop_reason}); "
           f"invalid run: best {inv.best_train_gap:g} = base {inv.curve[0][1]:g}, "
           f"max fix rounds {max(c['fix_rounds'] for c in cands)}", capsys)


def test_criterion_6_end_to_end(twin, capsys):
    out = twin["out"]
    regions = [Region.from_dict(r) for r in json.loads((out / "analyze" / "regions.json").read_text())["regions"]]
    rep = json.loads((out / "ensemble" / "report.json").read_text())["reports"]
    ens = next(r for r in rep if r["label"] == "ensemble")
    ctx = load_context(load_config(twin["cfg"]))
    strict, checked = True, 0
    for region in regions:
        sugg = json.loads((out / "search" / region.id / "suggestions.json").read_text())
        names = [p["pattern_name"] for p in sugg["patterns"]["patterns"]]
        if "Elephant‑and‑Mice Mix" not in names:
            continue
        best = parse_program(json.loads((out / "search" / region.id / "best.json").read_text())["program"])
        for m in region.members:
            checked += 1
            s = interpret(best, ctx.topology, m.demands, ctx.paths).total_met
            h = interpret(ctx.base, ctx.topology, m.demands, ctx.paths).total_met
            strict &= s > h + EPS_LP
    ok = len(regions) >= 2 and ens["overall"]["normalized_max"] < 1.0 and strict and checked > 0 \
        and twin["seconds"] < 600
    report(6, "end-to-end replication", ok,
           f"{len(regions)} regions, ensemble normalized max {100 * ens['overall']['normalized_max']:.2f}% of base, "
           f"specialist strictly better on {checked} elephant-and-mice samples: {strict}, "
           f"{twin['seconds']:.1f}s", capsys)


def _artifacts(root: FsPath) -> dict[str, bytes]:
    keep = ("curves.csv", "report.json")
    return {str(p.relative_to(root)): p.read_bytes() for p in root.rglob("*")
            if p.is_file() and (p.name in keep or p.parent.name == "checkpoints")}


def test_criterion_7_reproducibility(twin, capsys):
    tmp = twin["tmp"]
    second = _twin_config(tmp, "second")
    _pipeline(second)
    a, b = _artifacts(twin["out"]), _artifacts(tmp / "second")
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)

    # resume every region from every checkpoint and compare the finished run
    resumed_ok, resumes = True, 0
    ref = twin["out"] / "search"
    for region_dir in sorted(ref.iterdir()):
        for ck in sorted((region_dir / "checkpoints").glob("iter_*.json")):
            copy = tmp / "resume" / f"{region_dir.name}_{ck.stem}"
            if copy.exists():
                shutil.rmtree(copy)
            shutil.copytree(twin["out"], copy)
            rd = copy / "search" / region_dir.name
            for later in (rd / "checkpoints").glob("iter_*.json"):
                if later.name > ck.name:
                    later.unlink()
            restore(rd / "checkpoints" / ck.name)
            cfg = _twin_config(tmp, "resume_cfg")
            raw = json.loads(cfg.read_text())
            raw["output_dir"] = str(copy)
            cfg.write_text(json.dumps(raw))
            code = cli(["search", "--config", str(cfg), "--region", region_dir.name, "--resume"])
            cmp = filecmp.dircmp(region_dir, rd, ignore=["transcripts"])
            files = [p.name for p in (region_dir / "checkpoints").iterdir()]
            _, mismatch, errors = filecmp.cmpfiles(region_dir / "checkpoints", rd / "checkpoints", files,
                                                   shallow=False)
            resumed_ok &= code == 0 and not cmp.diff_files and not mismatch and not errors
            resumes += 1
    report(7, "reproducibility", same and resumed_ok and resumes > 0,
           f"{len(a)} artifacts byte-identical: {same}; {resumes} resumes match: {resumed_ok}", capsys)


def test_criterion_8_prompt_fidelity(capsys):
    bad = golden_mismatches()
    report(8, "prompt fidelity", not bad, f"mismatched goldens: {bad or 'none'}", capsys)


def test_criterion_9_ensemble_dominance(twin, capsys):
    ctx = load_context(load_config(twin["cfg"]))
    spec = load_ensemble(twin["out"] / "ensemble" / "ensemble.json")
    held = heldout_set(ctx)
    checked = failures = 0
    for dm in held:
        disp = route(spec, ctx.topology, dm, ctx.paths, "dispatch")
        if disp.region_id == "fallback":
            continue
        par = route(spec, ctx.topology, dm, ctx.paths, "parallel").total_met
        h0 = interpret(spec.fallback, ctx.topology, dm, ctx.paths).total_met
        checked += 1
        if not (par >= disp.total_met - EPS_LP and disp.total_met >= h0 - EPS_LP):
            failures += 1
    report(9, "ensemble dominance", failures == 0 and checked > 0,
           f"{checked} held-out instances dispatched to a specialist, {failures} violations", capsys)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
