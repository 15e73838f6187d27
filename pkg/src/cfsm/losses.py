"""Loss terms of the joint objective and the warm-up weight balancing rule.

The total minimised per batch is::

    supervised + triplet
      + beta_m * graph          (Laplacian of one layer smoothing another)
      + beta_c * factorisation  (-1/N sum <F_C, log F_C>)
      + beta_tgt_ent * target_entropy + beta_ae * ae

with each term present only when the (scenario, variant) plan enables it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .data import Batch
from .errors import ConfigError, ContractError, DataError
from .graph import GraphSpec, Laplacian, batch_laplacian, graph_loss
from .model import ModelParams, Forward, ae_reconstruct, classify, forward
from .scenario import Plan, Scenario, ScenarioKind, Variant, plan_for

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    beta_c: float = 0.01
    beta_m: float = 0.01
    beta_tgt_ent: float = 0.1
    beta_ae: float = 1.0
    label_smoothing: float = 0.0
    margin: float = 0.3
    binary_entropy: bool = False

    def __post_init__(self):
        for name in ("beta_c", "beta_m", "beta_tgt_ent", "beta_ae", "label_smoothing"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not self.label_smoothing < 1:
            raise ConfigError(f"label_smoothing must be < 1, got {self.label_smoothing}")
        if not self.margin > 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")

    def term_weight(self, term: str) -> float:
        return {
            "supervised": 1.0,
            "triplet": 1.0,
            "factorisation": self.beta_c,
            "graph": self.beta_m,
            "target_entropy": self.beta_tgt_ent,
            "ae": self.beta_ae,
        }[term]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    total: float
    terms: dict[str, float]
    weights: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"total": self.total, "terms": dict(self.terms), "weights": dict(self.weights)}


# -- individual terms ------------------------------------------------------------

def supervised_xent(logits: nx.Node, labels, smoothing: float = 0.0) -> nx.Node:
    """Mean cross-entropy against ``(1 - eps) * onehot + eps / C`` targets."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if len(labels) != n:
        raise DataError(f"{len(labels)} labels for {n} rows of logits")
    if n == 0:
        raise ContractError("supervised_xent needs at least one row")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    q = np.full((n, c), smoothing / c)
    q[np.arange(n), labels] += 1.0 - smoothing
    return nx.scale(nx.sum_(nx.mul(logits.tape.const(q), nx.log_softmax(logits))), -1.0 / n)


def factorisation_entropy(F_C: nx.Node, binary: bool = False) -> nx.Node:
    """``-(1/N) sum_i <F_C,i, log F_C,i>``; ``binary`` adds the ``(1-p) log(1-p)`` part."""
    v = F_C.value
    if np.any(v < 0.0) or np.any(v > 1.0):
        raise ContractError("factorisation_entropy: activations must lie in [0, 1]")
    n = F_C.shape[0]
    total = nx.sum_(nx.mul(F_C, nx.log(F_C)))
    if binary:
        comp = 1.0 - F_C
        total = total + nx.sum_(nx.mul(comp, nx.log(comp)))
    return nx.scale(total, -1.0 / n)


def target_prediction_entropy(logits: nx.Node) -> nx.Node:
    """Mean Shannon entropy of the row softmax."""
    n = logits.shape[0]
    if n == 0:
        raise ContractError("target_prediction_entropy needs at least one row")
    logp = nx.log_softmax(logits)
    return nx.scale(nx.sum_(nx.mul(nx.exp(logp), logp)), -1.0 / n)


def triplet_loss(F: nx.Node, labels, margin: float = 0.3) -> nx.Node:
    """Batch-hard triplet hinge averaged over anchors with a positive and a negative."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    anchors = np.flatnonzero(same.any(axis=1) & diff.any(axis=1))
    if len(anchors) == 0:
        log.warning("triplet_loss: batch has no anchor with both a positive and a negative")
        return F.tape.const(np.zeros((1, 1)))
    dist = nx.sqrt(nx.add_scalar(nx.pairwise_sqdist(F), 1e-12))
    dist = nx.take_rows(dist, anchors)
    hardest_pos = nx.masked_row_max(dist, same[anchors])
    hardest_neg = nx.masked_row_min(dist, diff[anchors])
    hinge = nx.relu(nx.add_scalar(nx.sub(hardest_pos, hardest_neg), margin))
    return nx.mean(hinge)


def reconstruction_loss(F_hat: nx.Node, F: nx.Node) -> nx.Node:
    """Mean squared error against a stop-gradient copy of ``F``."""
    err = nx.sub(F_hat, F.tape.const(F.value))
    return nx.mean(nx.mul(err, err))


# -- composite -----------------------------------------------------------------------

class Objective(NamedTuple):
    total: float
    report: LossReport
    grads: dict[str, np.ndarray]
    laplacian: Laplacian | None


def check_batch(batch: Batch, scenario: Scenario, plan: Plan) -> None:
    tgt = batch.target_rows
    if len(tgt) and not plan.target_rows:
        raise ConfigError("batch carries target rows but the variant trains on source only")
    if len(batch.source_rows) and not plan.source_rows:
        raise ConfigError("batch carries source rows but the variant trains on target only")
    if scenario.kind is not ScenarioKind.SEMI and np.any(batch.labels[tgt] >= 0):
        raise ConfigError(f"{scenario.kind.value} batches must not carry target labels")
    if np.any(batch.labels[batch.source_rows] < 0):
        raise ConfigError("every source row must be labelled")


def build_objective(fw: Forward, batch: Batch, weights: LossWeights, scenario: Scenario,
                    plan: Plan, graph_spec: GraphSpec = GraphSpec(),
                    laplacian: Laplacian | None = None,
                    ae_target: np.ndarray | None = None) -> tuple[nx.Node, dict[str, nx.Node], Laplacian | None]:
    """Assemble the weighted total on ``fw.tape``.

    ``laplacian`` pins the graph (used by gradient checks); otherwise it is
    rebuilt from the batch, on ``F_C`` or, for the classic-graph variant, on ``F``.
    ``ae_target`` likewise pins the stop-gradient reconstruction target.
    """
    check_batch(batch, scenario, plan)
    p = fw.leaves
    src, tgt = batch.source_rows, batch.target_rows
    terms: dict[str, nx.Node] = {}

    sup = []
    if len(src):
        logits = classify(nx.take_rows(fw.Z, src), p["S.W"], p["S.b"])
        sup.append(supervised_xent(logits, batch.labels[src], weights.label_smoothing))
    lab_tgt = tgt[batch.labels[tgt] >= 0]
    if len(lab_tgt):
        logits = classify(nx.take_rows(fw.Z, lab_tgt), p["T.W"], p["T.b"])
        sup.append(supervised_xent(logits, batch.labels[lab_tgt], weights.label_smoothing))
    if not sup:
        raise ConfigError("batch has no labelled rows for the supervised term")
    terms["supervised"] = sup[0] if len(sup) == 1 else nx.add(*sup)

    if "triplet" in plan.terms:
        terms["triplet"] = triplet_loss(nx.take_rows(fw.F, src), batch.labels[src], weights.margin)

    if "factorisation" in plan.terms:
        terms["factorisation"] = factorisation_entropy(fw.F_C, weights.binary_entropy)

    if "graph" in plan.terms:
        if plan.classic_graph:
            if laplacian is None:
                laplacian = batch_laplacian(fw.F.value, graph_spec)
            terms["graph"] = graph_loss(fw.F_C, laplacian, graph_spec.normalize_by_n)
        else:
            if laplacian is None:
                laplacian = batch_laplacian(fw.F_C.value, graph_spec)
            terms["graph"] = graph_loss(fw.F, laplacian, graph_spec.normalize_by_n)

    if "target_entropy" in plan.terms and len(tgt):
        logits = classify(nx.take_rows(fw.Z, tgt), p["S.W"], p["S.b"])
        terms["target_entropy"] = target_prediction_entropy(logits)

    if "ae" in plan.terms:
        target = fw.F if ae_target is None else fw.tape.const(ae_target)
        terms["ae"] = reconstruction_loss(ae_reconstruct(fw.F_C, p), target)

    total = None
    for name, node in terms.items():
        w = weights.term_weight(name)
        part = node if w == 1.0 else nx.scale(node, w)
        total = part if total is None else nx.add(total, part)
    return total, terms, laplacian


def composite_objective(params: ModelParams, batch: Batch, weights: LossWeights,
                        scenario: Scenario, variant: Variant | str,
                        graph_spec: GraphSpec = GraphSpec(),
                        laplacian: Laplacian | None = None) -> Objective:
    """Forward, assemble every active term, backpropagate."""
    plan = plan_for(scenario, variant)
    fw = forward(params, batch.x)
    total, terms, lap = build_objective(fw, batch, weights, scenario, plan, graph_spec, laplacian)
    grads = fw.tape.backward(total)
    report = LossReport(
        total=total.item(),
        terms={name: node.item() for name, node in terms.items()},
        weights={name: weights.term_weight(name) for name in terms},
    )
    return Objective(report.total, report, grads, lap)


# -- weight balancing ----------------------------------------------------------------

def snap_power_of_ten(x: float) -> float:
    return 10.0 ** round(math.log10(x))


def auto_balance(reports: list[LossReport], base: LossWeights = LossWeights()) -> LossWeights:
    """Pick beta_c and beta_m so each regulariser's median matches the supervised median.

    Ratios are snapped to the nearest power of ten.  A regulariser whose median
    is zero gets weight 0 (with a warning); one absent from every report gets 0.
    """
    if not reports:
        raise ContractError("auto_balance needs at least one warm-up report")

    def median(term):
        vals = [r.terms[term] for r in reports if term in r.terms]
        return float(np.median(vals)) if vals else None

    sup = median("supervised")
    betas = {}
    for term, key in (("factorisation", "beta_c"), ("graph", "beta_m")):
        m = median(term)
        if m is None:
            betas[key] = 0.0
        elif m <= 0 or sup <= 0:
            log.warning("auto_balance: median %s loss is %g; setting %s = 0", term, m, key)
            betas[key] = 0.0
        else:
            betas[key] = snap_power_of_ten(sup / m)
    return replace(base, **betas)
