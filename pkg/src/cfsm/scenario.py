"""Transfer scenarios, ablation variants and the fixed term table that links them."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import ConfigError


class ScenarioKind(str, Enum):
    UDA = "UDA"
    SEMI = "SemiDLSTL"
    UNSUP = "UnsupDLSTL"


class Variant(str, Enum):
    CFSM = "CFSM"
    SOURCE_ONLY = "SourceOnly"
    SOURCE_PLUS_REGS = "SourcePlusRegs"
    AE = "AE"
    MINUS_GRAPH = "CFSMMinusGraph"
    CLASSIC_GRAPH = "CFSMClassicGraph"
    JOINT_FT = "JointFT"
    TRAIN_TARGET = "TrainTarget"
    FT_TARGET = "FTTarget"


TERMS = ("supervised", "factorisation", "graph", "target_entropy", "triplet", "ae")


@dataclass(frozen=True)
class Scenario:
    kind: ScenarioKind
    k: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScenarioKind(self.kind))
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        if self.kind is not ScenarioKind.SEMI and self.k:
            raise ConfigError(f"k-shot labels only exist in SemiDLSTL, got k={self.k} for {self.kind.value}")

    @property
    def evaluation(self) -> str:
        return "retrieval" if self.kind is ScenarioKind.UNSUP else "classification"

    @property
    def disjoint(self) -> bool:
        return self.kind is not ScenarioKind.UDA

    @property
    def has_target_classifier(self) -> bool:
        return self.kind is ScenarioKind.SEMI


@dataclass(frozen=True)
class Plan:
    """What one (scenario, variant) pair trains on and which loss terms it uses."""

    source_rows: bool
    target_rows: bool
    target_labelled_only: bool
    terms: frozenset[str]
    pretrained_init: bool
    classic_graph: bool = False


_ALLOWED = {
    Variant.CFSM: set(ScenarioKind),
    Variant.AE: set(ScenarioKind),
    Variant.MINUS_GRAPH: set(ScenarioKind),
    Variant.CLASSIC_GRAPH: set(ScenarioKind),
    Variant.SOURCE_ONLY: {ScenarioKind.UDA, ScenarioKind.UNSUP},
    Variant.SOURCE_PLUS_REGS: {ScenarioKind.UDA, ScenarioKind.UNSUP},
    Variant.JOINT_FT: {ScenarioKind.UDA},
    Variant.TRAIN_TARGET: {ScenarioKind.SEMI},
    Variant.FT_TARGET: {ScenarioKind.SEMI},
}


def plan_for(scenario: Scenario, variant: Variant | str) -> Plan:
    variant = Variant(variant)
    kind = scenario.kind
    if kind not in _ALLOWED[variant]:
        raise ConfigError(f"variant {variant.value} is not defined for scenario {kind.value}")

    if variant in (Variant.TRAIN_TARGET, Variant.FT_TARGET):
        if scenario.k < 1:
            raise ConfigError(f"{variant.value} needs k >= 1 labelled target samples per class")
        return Plan(False, True, True, frozenset({"supervised"}),
                    pretrained_init=variant is Variant.FT_TARGET)

    source_only = variant in (Variant.SOURCE_ONLY, Variant.SOURCE_PLUS_REGS)
    terms = {"supervised"}
    if variant in (Variant.CFSM, Variant.SOURCE_PLUS_REGS, Variant.MINUS_GRAPH, Variant.CLASSIC_GRAPH):
        terms.add("factorisation")
    if variant in (Variant.CFSM, Variant.SOURCE_PLUS_REGS, Variant.CLASSIC_GRAPH):
        terms.add("graph")
    if variant is Variant.AE:
        terms.add("ae")
    if kind is ScenarioKind.UNSUP:
        terms.add("triplet")
    if kind is ScenarioKind.UDA and not source_only:
        terms.add("target_entropy")
    if variant is Variant.JOINT_FT:
        terms = {"supervised", "target_entropy"}
    return Plan(
        source_rows=True,
        target_rows=not source_only,
        target_labelled_only=False,
        terms=frozenset(terms),
        pretrained_init=True,
        classic_graph=variant is Variant.CLASSIC_GRAPH,
    )
