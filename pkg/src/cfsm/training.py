"""Source pre-training, joint regularised training and the optimizers."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset, MixedStream, Stream, epoch_batches, make_minibatch, named_rng
from .errors import ConfigError, NumericError
from .evaluation import classification_accuracy, mid_mass, retrieval_metrics
from .graph import GraphSpec
from .losses import LossReport, LossWeights, auto_balance, build_objective
from .model import ArchSpec, ModelParams, embed, forward, init_params
from .scenario import Plan, Scenario, ScenarioKind, Variant, plan_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 64
    warmup: int = 50

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.epochs < 0 or self.warmup < 1:
            raise ConfigError("epochs must be >= 0 and warmup >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: OptimizerState, config: OptimizerConfig) -> None:
    """In-place SGD or bias-corrected Adam update of ``arrays``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    if config.kind == "sgd":
        for name, g in grads.items():
            arrays[name] -= config.lr * g
        return
    state.t += 1
    bc1 = 1.0 - config.beta1 ** state.t
    bc2 = 1.0 - config.beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        arrays[name] -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)


@dataclass
class ExperimentData:
    """Everything one run trains and evaluates on.

    Labels are contiguous class indices per classifier head.  ``target``
    labels are only ever read at ``labelled_idx`` (SemiDLSTL) or by evaluation.
    """

    source: Dataset
    target: Dataset
    target_test: Dataset
    labelled_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)


def required_arch(arch: ArchSpec, scenario: Scenario, variant: Variant, n_target_classes: int) -> ArchSpec:
    return replace(
        arch,
        target_classes=n_target_classes if scenario.has_target_classifier else 0,
        autoencoder=Variant(variant) is Variant.AE,
    )


def evaluate(params: ModelParams, scenario: Scenario, test: Dataset) -> dict:
    """Per-scenario metric on the target test split plus its CFS mid-mass."""
    emb = embed(params, test.x)
    out = {}
    if scenario.kind is ScenarioKind.UNSUP:
        res = retrieval_metrics(emb.F, test.labels, emb.F, test.labels, exclude_self=True)
        out.update(rank1=res.rank1, mAP=res.mAP)
    elif scenario.kind is ScenarioKind.SEMI:
        out["accuracy"] = classification_accuracy(emb.target_logits, test.labels)
    else:
        out["accuracy"] = classification_accuracy(emb.source_logits, test.labels)
    out["target_mid_mass"] = mid_mass(emb.F_C)
    return out


def _streams(plan: Plan, scenario: Scenario, data: ExperimentData, rng: np.random.Generator,
             labelled_per_batch: int):
    src = Stream(data.source, rng, labelled=True, domain=0) if plan.source_rows else None
    if not plan.target_rows:
        return src, None
    if plan.target_labelled_only:
        return src, Stream(data.target, rng, data.labelled_idx, labelled=True, domain=1)
    if scenario.kind is ScenarioKind.SEMI and len(data.labelled_idx):
        rest = np.setdiff1d(np.arange(len(data.target)), data.labelled_idx)
        return src, MixedStream(
            Stream(data.target, rng, data.labelled_idx, labelled=True, domain=1),
            Stream(data.target, rng, rest, labelled=False, domain=1),
            labelled_per_batch,
        )
    return src, Stream(data.target, rng, labelled=False, domain=1)


def _step(params: ModelParams, batch, weights: LossWeights, scenario: Scenario, plan: Plan,
          graph_spec: GraphSpec, state: OptimizerState, opt: OptimizerConfig):
    fw = forward(params, batch.x)
    total, terms, lap = build_objective(fw, batch, weights, scenario, plan, graph_spec)
    grads = fw.tape.backward(total)
    optimizer_step(params.arrays, grads, state, opt)
    report = LossReport(total.item(), {k: v.item() for k, v in terms.items()},
                        {k: weights.term_weight(k) for k in terms})
    return report, lap


def _record(stage, step, epoch, report, weights, opt, batch, lap) -> dict:
    return {
        "stage": stage, "step": step, "epoch": epoch,
        "total": report.total, **{f"loss_{k}": v for k, v in report.terms.items()},
        "beta_c": weights.beta_c, "beta_m": weights.beta_m, "lr": opt.lr,
        "n_source": int(len(batch.source_rows)), "n_target": int(len(batch.target_rows)),
        "graph_n": None if lap is None else int(lap.n),
    }


def warmup_weights(params: ModelParams, plan: Plan, scenario: Scenario, data: ExperimentData,
                   opt: OptimizerConfig, weights: LossWeights, graph_spec: GraphSpec, seed: int,
                   labelled_per_batch: int, tlog: TrainLog) -> LossWeights:
    """Probe ``opt.warmup`` steps with beta_c = beta_m = 1 on a copy of ``params``.

    The probe's updates are discarded; only the balanced weights survive.
    """
    probe = params.copy()
    ones = replace(weights, beta_c=1.0, beta_m=1.0)
    src, tgt = _streams(plan, scenario, data, named_rng(seed, "shuffle/warmup"), labelled_per_batch)
    state = OptimizerState()
    reports = []
    for step in range(opt.warmup):
        batch = make_minibatch(src, tgt, opt.batch_size)
        try:
            report, lap = _step(probe, batch, ones, scenario, plan, graph_spec, state, opt)
        except NumericError as exc:
            raise NumericError(f"warmup diverged at step {step}: {exc}") from exc
        reports.append(report)
        tlog.steps.append(_record("warmup", step, 0, report, ones, opt, batch, lap))
    balanced = auto_balance(reports, weights)
    log.info("auto-balanced beta_c=%g beta_m=%g", balanced.beta_c, balanced.beta_m)
    return balanced


def _run_loop(params: ModelParams, plan: Plan, scenario: Scenario, data: ExperimentData,
              opt: OptimizerConfig, weights: LossWeights, auto: bool, graph_spec: GraphSpec,
              seed: int, stage: str, labelled_per_batch: int, evaluate_epochs: bool) -> TrainLog:
    tlog = TrainLog()
    if auto:
        weights = warmup_weights(params, plan, scenario, data, opt, weights, graph_spec, seed,
                                 labelled_per_batch, tlog)
    src, tgt = _streams(plan, scenario, data, named_rng(seed, f"shuffle/{stage}"), labelled_per_batch)
    state = OptimizerState()
    if evaluate_epochs:
        tlog.epochs.append({"stage": stage, "epoch": 0, **evaluate(params, scenario, data.target_test)})
    step = 0
    for epoch in range(1, opt.epochs + 1):
        for batch in epoch_batches(src, tgt, opt.batch_size):
            try:
                report, lap = _step(params, batch, weights, scenario, plan, graph_spec, state, opt)
            except NumericError as exc:
                raise NumericError(f"{stage} diverged at step {step} (epoch {epoch}): {exc}") from exc
            tlog.steps.append(_record(stage, step, epoch, report, weights, opt, batch, lap))
            step += 1
        if evaluate_epochs:
            tlog.epochs.append({"stage": stage, "epoch": epoch, **evaluate(params, scenario, data.target_test)})
    return tlog


def pretrain_source(arch: ArchSpec, scenario: Scenario, data: ExperimentData, opt: OptimizerConfig,
                    weights: LossWeights = LossWeights(), seed: int = 0,
                    init: ModelParams | None = None) -> tuple[ModelParams, TrainLog]:
    """Supervised training on labelled source rows only (plus triplet in retrieval)."""
    params = (init or init_params(arch, named_rng(seed, "init"))).copy()
    terms = {"supervised", "triplet"} if scenario.kind is ScenarioKind.UNSUP else {"supervised"}
    plan = Plan(True, False, False, frozenset(terms), pretrained_init=False)
    tlog = _run_loop(params, plan, scenario, data, opt, weights, False, GraphSpec(), seed, "pretrain", 0, False)
    return params, tlog


def train(scenario: Scenario, variant: Variant | str, opt: OptimizerConfig, init: ModelParams,
          data: ExperimentData, weights: LossWeights = LossWeights(), auto: bool = False,
          graph_spec: GraphSpec = GraphSpec(), seed: int = 0,
          labelled_per_batch: int = 8) -> tuple[ModelParams, TrainLog]:
    """Joint training of one (scenario, variant) starting from ``init``.

    With ``auto``, beta_c and beta_m come from :func:`warmup_weights` and stay
    fixed for the whole run.
    """
    variant = Variant(variant)
    plan = plan_for(scenario, variant)
    n_tc = len(data.target.label_space)
    arch = required_arch(init.arch, scenario, variant, n_tc)
    params = init.with_arch(arch, named_rng(seed, "init/heads")) if arch != init.arch else init.copy()
    return params, _run_loop(params, plan, scenario, data, opt, weights, auto, graph_spec, seed,
                             "train", labelled_per_batch, True)
