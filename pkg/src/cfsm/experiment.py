"""JSON experiment configs and the pretrain -> joint-train pipeline.

A config is one JSON object::

    {
      "scenario": {"kind": "UnsupDLSTL", "k": 0},
      "variant": "CFSM",
      "seed": 0,
      "arch": {"hidden": [64], "feature_dim": 32, "cfs_dim": 8},
      "weights": "auto" | {"beta_c": 0.1, "beta_m": 0.01, ...},
      "optimizer": {"kind": "adam", "lr": 0.001, "epochs": 10, "batch_size": 64},
      "pretrain": {"epochs": 10, ...},
      "graph": {"k": 8, "sigma": null, "normalized": false},
      "data": {"synthetic": {...}} | {"pool": {...}, "source_classes": [...], ...},
      "output_dir": "runs/example"
    }

``scenario``, ``variant`` and ``seed`` are mandatory; every other section
falls back to the dataclass defaults.  Relative data paths resolve against
the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (Dataset, SynthSpec, holdout_split, kshot_sample, load_csv, load_idx,
                   named_rng, split_label_space, synth_two_domain)
from .errors import CFSMError, ConfigError
from .graph import GraphSpec
from .losses import LossWeights
from .model import ArchSpec, ModelParams, init_params
from .scenario import Scenario, ScenarioKind, Variant, plan_for
from .training import (ExperimentData, OptimizerConfig, TrainLog, pretrain_source,
                       required_arch, train)


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")
    try:
        return cls(**raw)
    except CFSMError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class ArchConfig:
    hidden: tuple[int, ...] = (64,)
    feature_dim: int = 32
    cfs_dim: int = 10

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class DataConfig:
    synthetic: SynthSpec | None = None
    pool: dict | None = None
    source: dict | None = None
    target: dict | None = None
    source_classes: tuple[int, ...] | None = None
    target_classes: tuple[int, ...] | None = None
    test_fraction: float = 0.3
    labelled_per_batch: int = 8

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            object.__setattr__(self, "synthetic", _build(SynthSpec, self.synthetic, "data.synthetic"))
        for name in ("source_classes", "target_classes"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(int(c) for c in v))
        sources = [self.synthetic is not None, self.pool is not None,
                   self.source is not None or self.target is not None]
        if sum(sources) != 1:
            raise ConfigError("data: give exactly one of 'synthetic', 'pool' or 'source'+'target'")
        if (self.source is None) != (self.target is None):
            raise ConfigError("data: 'source' and 'target' must be given together")
        if self.pool is not None and (self.source_classes is None or self.target_classes is None):
            raise ConfigError("data: a 'pool' needs both 'source_classes' and 'target_classes'")
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"data.test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.labelled_per_batch < 0:
            raise ConfigError("data.labelled_per_batch must be >= 0")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, SynthSpec):
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario
    variant: Variant
    seed: int
    data: DataConfig
    arch: ArchConfig = ArchConfig()
    weights: LossWeights = LossWeights()
    auto_weights: bool = False
    optimizer: OptimizerConfig = OptimizerConfig()
    pretrain: OptimizerConfig = OptimizerConfig()
    graph: GraphSpec = GraphSpec()
    output_dir: str | None = None
    base_dir: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        plan_for(self.scenario, self.variant)
        if self.scenario.disjoint and self.data.source_classes and self.data.target_classes:
            overlap = set(self.data.source_classes) & set(self.data.target_classes)
            if overlap:
                raise ConfigError(f"data: {self.scenario.kind.value} needs disjoint classes, "
                                  f"both contain {sorted(overlap)}")
        if self.scenario.kind is ScenarioKind.UDA and self.data.synthetic is not None \
                and not self.data.synthetic.shared:
            raise ConfigError("data.synthetic: UDA needs 'shared': true (one label space)")
        if self.scenario.disjoint and self.data.synthetic is not None and self.data.synthetic.shared:
            raise ConfigError(f"data.synthetic: {self.scenario.kind.value} needs disjoint classes")

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | Path = ".") -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be an object")
        for required in ("scenario", "variant", "seed", "data"):
            if required not in raw:
                raise ConfigError(f"config: missing required field '{required}'")
        allowed = {"scenario", "variant", "seed", "data", "arch", "weights", "optimizer",
                   "pretrain", "graph", "output_dir"}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ConfigError(f"config: unknown field(s) {unknown}")
        try:
            variant = Variant(raw["variant"])
        except ValueError:
            raise ConfigError(f"variant: unknown variant {raw['variant']!r}; "
                              f"choose from {[v.value for v in Variant]}") from None
        scen = raw["scenario"]
        if isinstance(scen, str):
            scen = {"kind": scen}
        try:
            scen = dict(scen)
            scen["kind"] = ScenarioKind(scen.get("kind"))
        except (ValueError, TypeError):
            raise ConfigError(f"scenario.kind: must be one of {[k.value for k in ScenarioKind]}") from None
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigError(f"seed: expected an integer, got {raw['seed']!r}")
        weights = raw.get("weights", {})
        auto = weights == "auto"
        kwargs = dict(
            scenario=_build(Scenario, scen, "scenario"),
            variant=variant,
            seed=raw["seed"],
            data=_build(DataConfig, raw["data"], "data"),
            arch=_build(ArchConfig, raw.get("arch", {}), "arch"),
            weights=LossWeights() if auto else _build(LossWeights, weights, "weights"),
            auto_weights=auto,
            optimizer=_build(OptimizerConfig, raw.get("optimizer", {}), "optimizer"),
            pretrain=_build(OptimizerConfig, raw.get("pretrain", {}), "pretrain"),
            graph=_build(GraphSpec, raw.get("graph", {}), "graph"),
            output_dir=raw.get("output_dir"),
            base_dir=Path(base_dir),
        )
        try:
            return cls(**kwargs)
        except CFSMError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        g = self.graph
        out = {
            "scenario": {"kind": self.scenario.kind.value, "k": self.scenario.k},
            "variant": self.variant.value,
            "seed": self.seed,
            "data": self.data.to_dict(),
            "arch": {"hidden": list(self.arch.hidden), "feature_dim": self.arch.feature_dim,
                     "cfs_dim": self.arch.cfs_dim},
            "weights": "auto" if self.auto_weights else self.weights.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "graph": {"k": g.k, "sigma": g.sigma, "normalized": g.normalized,
                      "normalize_by_n": g.normalize_by_n},
        }
        if self.output_dir is not None:
            out["output_dir"] = self.output_dir
        return out

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.replace(seed=seed)

    def replace(self, **changes) -> "ExperimentConfig":
        from dataclasses import replace as _replace
        return _replace(self, **changes)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)


# -- data preparation ------------------------------------------------------------

def _load_file(spec: dict, base: Path, domain: str) -> Dataset:
    spec = dict(spec)
    fmt = spec.pop("format", "idx")
    try:
        if fmt == "idx":
            return load_idx(base / spec["images"], base / spec["labels"], domain)
        if fmt == "csv":
            return load_csv(base / spec["path"], domain, spec.get("scale"))
    except KeyError as exc:
        raise ConfigError(f"data.{domain}: missing field {exc}") from None
    raise ConfigError(f"data.{domain}.format must be 'idx' or 'csv', got {fmt!r}")


def _relabel(d: Dataset, classes: list[int]) -> Dataset:
    lookup = {c: i for i, c in enumerate(classes)}
    labels = np.array([lookup[int(c)] for c in d.labels], dtype=np.int64)
    return Dataset(d.x, labels, frozenset(range(len(classes))), d.domain, d.factors)


def _filter(d: Dataset, classes) -> Dataset:
    if classes is None:
        return d
    sub = d.subset(np.flatnonzero(np.isin(d.labels, list(classes))))
    sub.label_space = frozenset(classes)
    return sub


def prepare_data(config: ExperimentConfig) -> ExperimentData:
    """Load or generate both domains, hold out target test rows, draw k-shot labels."""
    dc, seed = config.data, config.seed
    if dc.synthetic is not None:
        synth = synth_two_domain(dc.synthetic, seed)
        source, target = synth.source, synth.target
    elif dc.pool is not None:
        pool = _load_file(dc.pool, config.base_dir, "pool")
        source, target = split_label_space(pool, dc.source_classes, dc.target_classes,
                                           disjoint=config.scenario.disjoint)
    else:
        source = _filter(_load_file(dc.source, config.base_dir, "source"), dc.source_classes)
        target = _filter(_load_file(dc.target, config.base_dir, "target"), dc.target_classes)
        target.domain = "target"
    if config.scenario.disjoint and source.label_space & target.label_space:
        raise ConfigError(f"{config.scenario.kind.value}: source and target label spaces overlap on "
                          f"{sorted(source.label_space & target.label_space)}")
    if source.x.shape[1] != target.x.shape[1]:
        raise ConfigError(f"source has {source.x.shape[1]} input columns, target {target.x.shape[1]}")

    src_classes = sorted(source.label_space)
    tgt_classes = src_classes if config.scenario.kind is ScenarioKind.UDA else sorted(target.label_space)
    source = _relabel(source, src_classes)
    target = _relabel(target, tgt_classes)
    target_train, target_test = holdout_split(target, dc.test_fraction, named_rng(seed, "split"))
    labelled = kshot_sample(target_train, config.scenario.k, named_rng(seed, "kshot"))
    return ExperimentData(source, target_train, target_test, labelled)


def build_arch(config: ExperimentConfig, data: ExperimentData) -> ArchSpec:
    base = ArchSpec(
        input_dim=data.source.x.shape[1],
        hidden=config.arch.hidden,
        feature_dim=config.arch.feature_dim,
        cfs_dim=config.arch.cfs_dim,
        source_classes=len(data.source.label_space),
    )
    return required_arch(base, config.scenario, config.variant, len(data.target.label_space))


@dataclass
class RunResult:
    params: ModelParams
    pretrain_log: TrainLog
    train_log: TrainLog
    data: ExperimentData

    @property
    def final_metrics(self) -> dict:
        return self.train_log.epochs[-1]


def run_pretrain(config: ExperimentConfig, data: ExperimentData | None = None) -> tuple[ModelParams, TrainLog]:
    data = data or prepare_data(config)
    arch = build_arch(config, data)
    return pretrain_source(arch, config.scenario, data, config.pretrain, config.weights, config.seed)


def run_experiment(config: ExperimentConfig, data: ExperimentData | None = None,
                   init: ModelParams | None = None) -> RunResult:
    """Pretrain on source (unless the variant trains from scratch), then joint-train."""
    data = data or prepare_data(config)
    plan = plan_for(config.scenario, config.variant)
    pre_log = TrainLog()
    if init is None:
        if plan.pretrained_init:
            init, pre_log = run_pretrain(config, data)
        else:
            init = init_params(build_arch(config, data), named_rng(config.seed, "init"))
    params, tlog = train(config.scenario, config.variant, config.optimizer, init, data,
                         config.weights, config.auto_weights, config.graph, config.seed,
                         config.data.labelled_per_batch)
    return RunResult(params, pre_log, tlog, data)
