"""End-to-end stages: analyze, search, oneshot, ensemble and plot data.

Every artifact is JSON (or CSV with a comment header) stamped with the
config hash; stages refuse artifacts written under a different config.

Layout under ``output_dir``::

    analyze/samples.json, regions.json, explanations.json
    heldout.json
    search/<region>/   (writer run dir + suggestions.json + best.json)
    oneshot/<region>/oneshot.json
    ensemble/ensemble.json, report.json, report.md, runtime.json
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path as FsPath
from typing import Any, Sequence

import numpy as np

from .analyzer import (
    AdversarialSample,
    Explanation,
    Region,
    balanced_batch,
    evaluate_gap,
    evaluate_samples,
    find_adversarial,
    merge_explanations,
    partition_regions,
    sample_normal,
)
from .config import ConfigError, RunConfig
from .core import EPS_LP, DemandMatrix, PathSet, Topology, build_path_set
from .dsl import HeuristicProgram, base_heuristic, parse_program
from .ensemble import EnsembleSpec, evaluate_heldout, save_ensemble, write_reports
from .llm import BackendError, LlmBackend, RemoteBackend, TranscriptLog
from .loaders import load_topology
from .mock import ScriptedBackend, builtin_script, load_script
from .prompts import ParentView, build_mutation_prompt
from .suggester import Suggestion, suggest
from .writer import (
    GapScorer,
    SearchState,
    candidate_program_text,
    latest_checkpoint,
    restore,
    run_search,
)

logger = logging.getLogger(__name__)

ONESHOT_VARIANTS = ("vanilla", "samples", "samples_explanations", "suggestions")


class ArtifactError(OSError):
    """A required artifact is missing or unreadable."""


@dataclass
class Context:
    cfg: RunConfig
    hash: str
    topology: Topology
    paths: PathSet
    base: HeuristicProgram

    @property
    def out(self) -> FsPath:
        return self.cfg.output_dir


def load_context(cfg: RunConfig) -> Context:
    try:
        topology = load_topology(cfg.topology, **cfg.topology_options)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load topology {cfg.topology}: {exc}") from exc
    try:
        cfg.demand_space.check_topology(topology)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    paths = build_path_set(topology, cfg.demand_space.pairs, cfg.k_paths)
    return Context(cfg, cfg.hash(), topology, paths, base_heuristic(cfg.base_threshold))


# artifact helpers

def write_json(path: FsPath, payload: dict, run_hash: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"config_hash": run_hash, **payload}, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def read_json(path: FsPath, run_hash: str | None = None) -> dict:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ArtifactError(f"missing artifact {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"unreadable artifact {path}: {exc}") from exc
    if run_hash is not None and data.get("config_hash") != run_hash:
        raise ConfigError(f"{path} was produced by config {data.get('config_hash')}, current config is {run_hash}")
    return data


def make_backend(cfg: RunConfig, transcript: TranscriptLog | None) -> LlmBackend:
    s = cfg.suggester
    if s.backend == "mock":
        if s.script is None:
            raise ConfigError("mock backend needs suggester.script (a fixture name or a file)")
        script = load_script(cfg.script_path) if cfg.script_path is not None else builtin_script(s.script)
        return ScriptedBackend(script, backend_id=f"mock:{s.script}", transcript=transcript)
    import os

    if not os.environ.get(s.api_key_env):
        raise BackendError(f"environment variable {s.api_key_env} is not set")
    return RemoteBackend(s.endpoint, s.model, s.api_key_env, s.temperature, s.max_tokens, transcript=transcript)


# analyze

def cmd_analyze(ctx: Context) -> dict[str, FsPath]:
    cfg, a = ctx.cfg, ctx.cfg.analyzer
    found = find_adversarial(ctx.base, ctx.topology, cfg.demand_space, a.budget, cfg.seed, ctx.paths,
                             grid=a.grid, keep=a.keep, workers=a.workers)
    positive = [s for s in found if s.gap > EPS_LP]
    base_worst = found[0].gap if found else 0.0
    normal = evaluate_samples(ctx.base, ctx.topology, sample_normal(cfg.demand_space, a.normal_samples, cfg.seed + 1),
                              ctx.paths, base_worst)
    regions = partition_regions(positive, cfg.max_regions, a.linear_regions) if positive else []
    explanations = {}
    for r in regions:
        per_member = [evaluate_gap(ctx.base, ctx.topology, m.demands, ctx.paths).explanation for m in r.members]
        explanations[r.id] = merge_explanations(per_member).to_dict()
    worst = evaluate_gap(ctx.base, ctx.topology, found[0].demands, ctx.paths).explanation if found else None

    folder = ctx.out / "analyze"
    out = {
        "samples": folder / "samples.json",
        "regions": folder / "regions.json",
        "explanations": folder / "explanations.json",
    }
    write_json(out["samples"], {"adversarial": [s.to_dict() for s in found],
                                "normal": [s.to_dict() for s in normal]}, ctx.hash)
    write_json(out["regions"], {"base_worst": base_worst, "regions": [r.to_dict() for r in regions]}, ctx.hash)
    write_json(out["explanations"], {"worst_sample": worst.to_dict() if worst else None,
                                     "regions": explanations}, ctx.hash)
    logger.info("analyze: %d samples (%d with a gap), %d regions, worst gap %g",
                len(found), len(positive), len(regions), base_worst)
    return out


def load_regions(ctx: Context) -> list[Region]:
    data = read_json(ctx.out / "analyze" / "regions.json", ctx.hash)
    return [Region.from_dict(r) for r in data["regions"]]


def load_normal(ctx: Context) -> list[AdversarialSample]:
    data = read_json(ctx.out / "analyze" / "samples.json", ctx.hash)
    return [AdversarialSample.from_dict(s) for s in data["normal"]]


def load_region_explanation(ctx: Context, region_id: str) -> Explanation | None:
    data = read_json(ctx.out / "analyze" / "explanations.json", ctx.hash)
    raw = data["regions"].get(region_id)
    return Explanation.from_dict(raw) if raw else None


def pick_region(ctx: Context, region_id: str) -> Region:
    regions = load_regions(ctx)
    for r in regions:
        if r.id == region_id:
            return r
    known = ", ".join(r.id for r in regions) or "(none)"
    raise ConfigError(f"unknown region {region_id!r}; known regions: {known}")


def heldout_set(ctx: Context) -> list[DemandMatrix]:
    """Seeded held-out matrices (adversarial against the base plus uniform), cached on disk."""
    path = ctx.out / "heldout.json"
    if path.exists():
        return [DemandMatrix.from_list(m) for m in read_json(path, ctx.hash)["matrices"]]
    h, seed = ctx.cfg.held_out, ctx.cfg.heldout_seed
    adv: list[DemandMatrix] = []
    if h.adversarial:
        found = find_adversarial(ctx.base, ctx.topology, ctx.cfg.demand_space, h.budget, seed, ctx.paths,
                                 grid=ctx.cfg.analyzer.grid, keep=h.adversarial)
        adv = [s.demands for s in found]
    normal = sample_normal(ctx.cfg.demand_space, h.size - len(adv), seed)
    matrices = adv + normal
    write_json(path, {"seed": seed, "matrices": [m.to_list() for m in matrices]}, ctx.hash)
    return matrices


def train_batch(ctx: Context, region: Region) -> list[DemandMatrix]:
    adv, normal = balanced_batch(region.members, load_normal(ctx), ctx.cfg.train.adversarial)
    return [s.demands for s in adv] + [s.demands for s in normal[: ctx.cfg.train.normal]]


# search

def cmd_search(ctx: Context, region_id: str, resume: bool = False) -> SearchState:
    region = pick_region(ctx, region_id)
    run_dir = ctx.out / "search" / region_id
    run_dir.mkdir(parents=True, exist_ok=True)
    transcript = TranscriptLog(run_dir / "transcripts")
    backend = make_backend(ctx.cfg, transcript)
    train = train_batch(ctx, region)
    held = heldout_set(ctx)

    state = None
    sugg_path = run_dir / "suggestions.json"
    ckpt = latest_checkpoint(run_dir) if resume else None
    if ckpt is not None and sugg_path.exists():
        state = restore(ckpt)
        if state.config_hash != ctx.hash:
            raise ConfigError(f"checkpoint {ckpt} belongs to config {state.config_hash}, not {ctx.hash}")
        suggestions = [Suggestion.from_dict(s) for s in read_json(sugg_path, ctx.hash)["suggestions"]]
        logger.info("resuming %s from %s", region_id, ckpt.name)
    else:
        if resume:
            logger.info("nothing to resume for %s; starting fresh", region_id)
        normal = [s for s in load_normal(ctx)]
        adv, nrm = balanced_batch(region.members, normal, ctx.cfg.suggester.samples_per_class)
        report, suggestions = suggest(backend, region, adv, nrm, load_region_explanation(ctx, region_id),
                                      ctx.base, ctx.cfg.suggester.n, ctx.cfg.suggester.samples_per_class)
        write_json(sugg_path, {"region": region_id, "patterns": report.to_dict(),
                               "suggestions": [s.to_dict() for s in suggestions]}, ctx.hash)

    state = run_search(ctx.cfg.writer, ctx.base, train, held, suggestions, backend, ctx.topology, ctx.paths,
                       run_dir=run_dir, resume=state, run_hash=ctx.hash)
    best = state.best
    write_json(run_dir / "best.json", {
        "region": region_id,
        "program": best.program.to_dict(),
        "train_gap": best.worst,
        "heldout_gap": state.best_heldout_gap,
        "stop_reason": state.stop_reason,
        "iterations": state.iteration,
    }, ctx.hash)
    return state


def search_all_skipped(run_dir: FsPath) -> bool:
    """True when every candidate of a run failed on the backend (nothing reached the model)."""
    path = run_dir / "candidates.jsonl"
    if not path.exists():
        return False
    rows = [json.loads(x) for x in path.read_text(encoding="utf-8").splitlines() if x.strip()]
    return bool(rows) and all(r["status"] == "skipped" for r in rows)


# ensemble

def build_ensemble(ctx: Context) -> EnsembleSpec:
    entries = []
    bests = []
    for region in load_regions(ctx):
        path = ctx.out / "search" / region.id / "best.json"
        if not path.exists():
            raise ArtifactError(f"no search result for region {region.id} (expected {path})")
        best = read_json(path, ctx.hash)
        prog = parse_program(best["program"])
        entries.append((region, prog))
        bests.append((best.get("heldout_gap") if best.get("heldout_gap") is not None else float("inf"),
                      region.id, prog))
    fallback = ctx.base
    if ctx.cfg.ensemble.fallback == "global_best" and bests:
        fallback = min(bests, key=lambda t: (t[0], t[1]))[2]
    return EnsembleSpec(tuple(entries), fallback)


def cmd_ensemble(ctx: Context) -> dict[str, Any]:
    spec = build_ensemble(ctx)
    held = heldout_set(ctx)
    mode = ctx.cfg.ensemble.mode
    reports = [
        evaluate_heldout(spec, held, ctx.topology, ctx.paths, ctx.base, mode=mode, label="ensemble"),
        evaluate_heldout(ctx.base, held, ctx.topology, ctx.paths, ctx.base, label="base"),
    ]
    if mode == "dispatch" and spec.entries:
        reports.append(evaluate_heldout(spec, held, ctx.topology, ctx.paths, ctx.base, mode="parallel",
                                        label="ensemble-parallel"))
    folder = _mkdir(ctx.out / "ensemble")
    save_ensemble(spec, folder / "ensemble.json", ctx.hash)
    write_reports(reports, folder, ctx.hash)
    return {"spec": spec, "reports": reports}


def _mkdir(p: FsPath) -> FsPath:
    p.mkdir(parents=True, exist_ok=True)
    return p


# one-shot prompt comparison

def cmd_oneshot(ctx: Context, region_id: str) -> dict[str, Any]:
    """Ask for ``oneshot_samples`` programs per prompt variant; score each on the held-out set."""
    region = pick_region(ctx, region_id)
    folder = _mkdir(ctx.out / "oneshot" / region_id)
    backend = make_backend(ctx.cfg, TranscriptLog(folder / "transcripts"))
    held = heldout_set(ctx)
    scorer = GapScorer(ctx.topology, ctx.paths, held)
    base_max = max(scorer.gaps(ctx.base))
    worst = tuple(sorted(region.members, key=lambda s: -s.gap)[: ctx.cfg.writer.m])
    explanation = load_region_explanation(ctx, region_id)
    sugg_path = ctx.out / "search" / region_id / "suggestions.json"
    if sugg_path.exists():
        suggestions = [Suggestion.from_dict(s) for s in read_json(sugg_path, ctx.hash)["suggestions"]]
    else:
        adv, nrm = balanced_batch(region.members, load_normal(ctx), ctx.cfg.suggester.samples_per_class)
        _, suggestions = suggest(backend, region, adv, nrm, explanation, ctx.base, ctx.cfg.suggester.n,
                                 ctx.cfg.suggester.samples_per_class)

    prompts = {
        "vanilla": build_mutation_prompt([ParentView(ctx.base, ())], [], ctx.cfg.writer.m,
                                         include_samples=False, include_suggestions=False),
        "samples": build_mutation_prompt([ParentView(ctx.base, worst)], [], ctx.cfg.writer.m,
                                         include_suggestions=False),
        "samples_explanations": build_mutation_prompt([ParentView(ctx.base, worst, explanation)], [],
                                                      ctx.cfg.writer.m, include_suggestions=False),
        "suggestions": build_mutation_prompt([ParentView(ctx.base, ())], suggestions, ctx.cfg.writer.m,
                                             include_samples=False),
    }
    results: dict[str, Any] = {}
    for variant in ONESHOT_VARIANTS:
        bundle = prompts[variant]
        scores: list[float | None] = []
        for _ in range(ctx.cfg.oneshot_samples):
            try:
                reply = backend.generate(list(bundle.messages), template_id=bundle.template_id)
                prog = parse_program(candidate_program_text(reply))
                gap = max(scorer.gaps(prog))
                scores.append(gap / base_max if base_max > EPS_LP else 0.0)
            except BackendError as exc:
                logger.error("oneshot %s: backend error: %s", variant, exc)
                scores.append(None)
            except ValueError:
                scores.append(None)
        valid = [s for s in scores if s is not None]
        results[variant] = {"normalized": scores, "best": min(valid) if valid else None}
    write_json(folder / "oneshot.json", {"region": region_id, "base_max_gap": base_max, "variants": results},
               ctx.hash)
    return results


# plot data

def _quartiles(values: Sequence[float]) -> tuple[float, float, float, float, float]:
    q = np.percentile(np.asarray(values, dtype=float), [0, 25, 50, 75, 100])
    return tuple(float(x) for x in q)  # type: ignore[return-value]


def cmd_plotdata(run_dir: str | FsPath, out_dir: str | FsPath | None = None) -> list[FsPath]:
    """Plot-ready CSVs from a search run dir and/or a oneshot dir.

    Everything is computed before anything is written, so a failure leaves
    no partial output.
    """
    run_dir = FsPath(run_dir)
    out_dir = FsPath(out_dir) if out_dir is not None else run_dir
    outputs: dict[str, str] = {}
    curves = run_dir / "curves.csv"
    if curves.exists():
        lines = curves.read_text(encoding="utf-8").splitlines()
        header = lines[0] if lines and lines[0].startswith("#") else ""
        rows = list(csv.DictReader([x for x in lines if not x.startswith("#")]))
        buf = io.StringIO()
        if header:
            buf.write(header + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "train_gap", "heldout_gap"])
        for r in rows:
            w.writerow([r["iteration"], r["best_train_gap"], r["best_heldout_gap"]])
        outputs["curves_plot.csv"] = buf.getvalue()
    oneshot = run_dir / "oneshot.json"
    if oneshot.exists():
        data = read_json(oneshot)
        buf = io.StringIO()
        buf.write(f"# config_hash={data.get('config_hash', '')}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "count", "failed", "min", "q1", "median", "q3", "max"])
        for variant in ONESHOT_VARIANTS:
            scores = data["variants"].get(variant, {}).get("normalized", [])
            valid = [s for s in scores if s is not None]
            stats = [f"{x:.6f}" for x in _quartiles(valid)] if valid else [""] * 5
            w.writerow([variant, len(valid), len(scores) - len(valid), *stats])
        outputs["oneshot_box.csv"] = buf.getvalue()
    if not outputs:
        raise ArtifactError(f"{run_dir} holds neither curves.csv nor oneshot.json")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in outputs.items():
        (out_dir / name).write_text(text, encoding="utf-8")
        written.append(out_dir / name)
    return written


def region_ids(ctx: Context) -> list[str]:
    return [r.id for r in load_regions(ctx)]

