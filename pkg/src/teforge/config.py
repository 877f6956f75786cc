"""Run configuration: one JSON or TOML file describing a whole pipeline run."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .analyzer import DemandSpace
from .writer import WriterConfig

BACKENDS = ("mock", "remote")
FALLBACKS = ("base", "global_best")


class ConfigError(ValueError):
    pass


def _pick(d: dict, cls, section: str):
    known = set(cls.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


@dataclass(frozen=True)
class AnalyzerConfig:
    budget: int = 2000
    grid: float = 1.0
    keep: int = 200
    normal_samples: int = 50
    linear_regions: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.grid <= 0:
            raise ValueError("grid must be > 0")
        if self.keep < 1 or self.normal_samples < 1 or self.workers < 1:
            raise ValueError("keep, normal_samples and workers must be >= 1")


@dataclass(frozen=True)
class SuggesterConfig:
    backend: str = "mock"
    script: str | None = None
    endpoint: str | None = None
    model: str = "o4-mini"
    api_key_env: str = "TEFORGE_API_KEY"
    temperature: float = 1.0
    max_tokens: int = 4096
    n: int = 2
    samples_per_class: int = 5

    def __post_init__(self) -> None:
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.n < 1 or self.samples_per_class < 1 or self.max_tokens < 1:
            raise ValueError("n, samples_per_class and max_tokens must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    adversarial: int = 5
    normal: int = 5

    def __post_init__(self) -> None:
        if self.adversarial < 1 or self.normal < 0:
            raise ValueError("adversarial must be >= 1 and normal >= 0")


@dataclass(frozen=True)
class HeldOutConfig:
    size: int = 40
    adversarial: int = 20
    budget: int = 500
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.size < 1 or not 0 <= self.adversarial <= self.size or self.budget < 1:
            raise ValueError("need size >= 1, 0 <= adversarial <= size, budget >= 1")


@dataclass(frozen=True)
class EnsembleConfig:
    mode: str = "dispatch"
    fallback: str = "base"

    def __post_init__(self) -> None:
        if self.mode not in ("dispatch", "parallel"):
            raise ValueError("mode must be dispatch or parallel")
        if self.fallback not in FALLBACKS:
            raise ValueError(f"fallback must be one of {FALLBACKS}")


@dataclass(frozen=True)
class RunConfig:
    topology: FsPath
    demand_space: DemandSpace
    output_dir: FsPath
    seed: int = 0
    k_paths: int = 8
    base_threshold: float = 60.0
    max_regions: int = 5
    oneshot_samples: int = 10
    analyzer: AnalyzerConfig = field(default_factory=AnalyzerConfig)
    suggester: SuggesterConfig = field(default_factory=SuggesterConfig)
    writer: WriterConfig = field(default_factory=WriterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    held_out: HeldOutConfig = field(default_factory=HeldOutConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    topology_options: dict = field(default_factory=dict)
    source: FsPath | None = None

    @property
    def heldout_seed(self) -> int:
        # kept apart from the analysis (seed) and normal-sample (seed + 1) streams
        return self.held_out.seed if self.held_out.seed is not None else self.seed + 100_003

    @property
    def script_path(self) -> FsPath | None:
        s = self.suggester.script
        if s is None or "/" not in s and not s.endswith(".json"):
            return None
        return _resolve(self.source, s)

    def to_dict(self) -> dict:
        """Canonical form; paths are kept as written in the file."""
        return {
            "topology": str(self.topology),
            "topology_options": self.topology_options,
            "demand_space": self.demand_space.to_dict(),
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "k_paths": self.k_paths,
            "base_threshold": self.base_threshold,
            "max_regions": self.max_regions,
            "oneshot_samples": self.oneshot_samples,
            "analyzer": asdict(self.analyzer),
            "suggester": asdict(self.suggester),
            "writer": self.writer.to_dict(),
            "train": asdict(self.train),
            "held_out": asdict(self.held_out),
            "ensemble": asdict(self.ensemble),
        }

    def hash(self) -> str:
        """Short digest of the configuration plus the topology file contents.

        The output directory does not take part, so the same run written to
        two places carries the same hash.
        """
        d = self.to_dict()
        d.pop("output_dir")
        d["topology"] = hashlib.sha256(self.topology.read_bytes()).hexdigest() if self.topology.exists() else d["topology"]
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _resolve(base: FsPath | None, value: str) -> FsPath:
    p = FsPath(value)
    if p.is_absolute() or base is None:
        return p
    return (base.parent / p).resolve()


def _demand_space(raw: Any) -> DemandSpace:
    if not isinstance(raw, dict):
        raise ConfigError("[demand_space] must be a table")
    try:
        if "bounds" in raw:
            return DemandSpace.from_dict(raw)
        pairs = [(str(a), str(b)) for a, b in raw["pairs"]]
        return DemandSpace.box(pairs, float(raw.get("lo", 0.0)), float(raw["hi"]), raw.get("total_cap"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"[demand_space]: {exc}") from exc


def config_from_dict(raw: dict, source: FsPath | None = None) -> RunConfig:
    raw = dict(raw)
    for key in ("topology", "demand_space", "output_dir"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
    allowed = set(RunConfig.__dataclass_fields__) - {"source"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
    seed = int(raw.get("seed", 0))
    writer_raw = dict(raw.get("writer", {}))
    writer_raw.setdefault("seed", seed)
    try:
        writer = WriterConfig.from_dict(writer_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[writer]: {exc}") from exc
    cfg = RunConfig(
        topology=_resolve(source, raw["topology"]),
        demand_space=_demand_space(raw["demand_space"]),
        output_dir=_resolve(source, raw["output_dir"]),
        seed=seed,
        k_paths=int(raw.get("k_paths", 8)),
        base_threshold=float(raw.get("base_threshold", 60.0)),
        max_regions=int(raw.get("max_regions", 5)),
        oneshot_samples=int(raw.get("oneshot_samples", 10)),
        analyzer=_pick(raw.get("analyzer", {}), AnalyzerConfig, "analyzer"),
        suggester=_pick(raw.get("suggester", {}), SuggesterConfig, "suggester"),
        writer=writer,
        train=_pick(raw.get("train", {}), TrainConfig, "train"),
        held_out=_pick(raw.get("held_out", {}), HeldOutConfig, "held_out"),
        ensemble=_pick(raw.get("ensemble", {}), EnsembleConfig, "ensemble"),
        topology_options=dict(raw.get("topology_options", {})),
        source=source,
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if cfg.k_paths < 1 or cfg.max_regions < 1 or cfg.oneshot_samples < 1:
        raise ConfigError("k_paths, max_regions and oneshot_samples must be >= 1")
    if cfg.base_threshold < 0:
        raise ConfigError("base_threshold must be >= 0")
    if not cfg.topology.exists():
        raise ConfigError(f"topology file not found: {cfg.topology}")
    if cfg.suggester.backend == "remote" and not cfg.suggester.endpoint:
        raise ConfigError("remote backend needs suggester.endpoint")
    sp = cfg.script_path
    if sp is not None and not sp.exists():
        raise ConfigError(f"mock script not found: {sp}")


def load_config(path: str | FsPath, overrides: dict | None = None) -> RunConfig:
    path = FsPath(path).resolve()
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path.name}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a table/object at top level")
    for key, value in (overrides or {}).items():
        section, _, leaf = key.rpartition(".")
        target = raw
        if section:
            target = raw.setdefault(section, {})
        target[leaf] = value
    return config_from_dict(raw, path)
