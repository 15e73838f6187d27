"""Finite-difference self-check of every differentiable op and every composite objective.

Each op is probed as ``sum(R * op(inputs))`` with a fixed random ``R`` so that
every output entry contributes.  Inputs are drawn away from kinks (ReLU at 0,
ties in masked max/min, the sigmoid clamp) so central differences are valid.
Composite objectives are checked with the batch Laplacian pinned, since the
graph is a stop-gradient constant by construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import Batch
from .errors import ConfigError
from .graph import GraphSpec, Laplacian, batch_laplacian, graph_loss
from .losses import (LossWeights, build_objective, factorisation_entropy, reconstruction_loss,
                     supervised_xent, target_prediction_entropy, triplet_loss)
from .model import ArchSpec, forward, forward_leaves, init_params
from .scenario import Scenario, ScenarioKind, Variant, plan_for

TOLERANCE = 1e-4


@dataclass
class GradcheckReport:
    max_error: dict[str, float] = field(default_factory=dict)
    instances: dict[str, int] = field(default_factory=dict)
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_error.items() if not v < self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        out = []
        for name, err in self.max_error.items():
            status = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{name:<40s} {err:.3e}  n={self.instances[name]}  {status}")
        return out


def _probe(op: Callable[..., nx.Node], R: np.ndarray):
    def build(tape, leaves):
        out = op(tape, leaves)
        return nx.sum_(nx.mul(out, tape.const(R)))
    return build


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _op_cases(rng: np.random.Generator):
    """Yield ``(name, build, arrays)`` for one random instance of every op."""
    n, m, p = rng.integers(2, 6, size=3)
    a = rng.normal(size=(n, m))
    b = rng.normal(size=(n, m))
    pos = rng.uniform(0.2, 2.0, size=(n, m))

    def unary(name, fn, x):
        R = rng.normal(size=x.shape)
        return name, _probe(lambda t, l: fn(l["a"]), R), {"a": x}

    def binary(name, fn, x, y, out_shape):
        R = rng.normal(size=out_shape)
        return name, _probe(lambda t, l: fn(l["a"], l["b"]), R), {"a": x, "b": y}

    yield binary("add", nx.add, a, b, (n, m))
    yield binary("sub", nx.sub, a, b, (n, m))
    yield binary("mul", nx.mul, a, b, (n, m))
    yield unary("scale", lambda x: nx.scale(x, 1.7), a)
    yield unary("add_scalar", lambda x: nx.add_scalar(x, -0.3), a)
    yield binary("add_row", nx.add_row, a, rng.normal(size=(1, m)), (n, m))
    yield unary("log", nx.log, pos)
    yield unary("exp", nx.exp, a)
    yield unary("sqrt", nx.sqrt, pos)
    yield unary("relu", nx.relu, _away_from_zero(rng, (n, m)))
    yield unary("sigmoid", nx.sigmoid, rng.uniform(-4, 4, size=(n, m)))
    yield binary("matmul", nx.matmul, a, rng.normal(size=(m, p)), (n, p))
    yield ("transpose", _probe(lambda t, l: nx.transpose(l["a"]), rng.normal(size=(m, n))), {"a": a})
    for axis in (None, 0, 1):
        shape = {None: (1, 1), 0: (1, m), 1: (n, 1)}[axis]
        R = rng.normal(size=shape)
        yield (f"sum(axis={axis})", _probe(lambda t, l, ax=axis: nx.sum_(l["a"], ax), R), {"a": a})
    yield ("mean", _probe(lambda t, l: nx.mean(l["a"]), rng.normal(size=(1, 1))), {"a": a})
    idx = rng.integers(0, n, size=n + 1)
    yield ("take_rows", _probe(lambda t, l: nx.take_rows(l["a"], idx), rng.normal(size=(n + 1, m))),
           {"a": a})
    yield unary("log_softmax", nx.log_softmax, a)
    yield ("pairwise_sqdist", _probe(lambda t, l: nx.pairwise_sqdist(l["a"]), rng.normal(size=(n, n))),
           {"a": a})
    mask = rng.random((n, m)) < 0.6
    mask[np.arange(n), rng.integers(0, m, size=n)] = True
    for name, fn in (("masked_row_max", nx.masked_row_max), ("masked_row_min", nx.masked_row_min)):
        yield (name, _probe(lambda t, l, f=fn: f(l["a"], mask), rng.normal(size=(n, 1))), {"a": a})

    # loss terms as standalone ops
    c = int(rng.integers(2, 5))
    labels = rng.integers(0, c, size=n)
    yield ("supervised_xent", lambda t, l: supervised_xent(l["a"], labels, 0.1),
           {"a": rng.normal(size=(n, c))})
    yield ("factorisation_entropy", lambda t, l: factorisation_entropy(nx.sigmoid(l["a"])),
           {"a": rng.uniform(-3, 3, size=(n, m))})
    yield ("factorisation_entropy(binary)",
           lambda t, l: factorisation_entropy(nx.sigmoid(l["a"]), binary=True),
           {"a": rng.uniform(-3, 3, size=(n, m))})
    yield ("target_prediction_entropy", lambda t, l: target_prediction_entropy(l["a"]),
           {"a": rng.normal(size=(n, c))})
    tl = rng.permutation(np.repeat(np.arange(3), 3))
    yield ("triplet_loss", lambda t, l: triplet_loss(l["a"], tl, margin=5.0),
           {"a": rng.normal(size=(len(tl), m))})
    yield ("reconstruction_loss", lambda t, l: reconstruction_loss(l["a"], t.const(b)), {"a": a})
    lap = batch_laplacian(rng.random((n + 2, 3)), GraphSpec(k=2))
    yield ("graph_loss", lambda t, l: graph_loss(l["a"], lap), {"a": rng.normal(size=(n + 2, m))})
    nlap = batch_laplacian(rng.random((n + 2, 3)), GraphSpec(k=2, normalized=True))
    yield ("graph_loss(normalized)", lambda t, l: graph_loss(l["a"], nlap, normalize_by_n=True),
           {"a": rng.normal(size=(n + 2, m))})


def scenario_variants() -> list[tuple[Scenario, Variant]]:
    """Every valid (scenario, variant) pair."""
    out = []
    for kind in ScenarioKind:
        scen = Scenario(kind, k=2 if kind is ScenarioKind.SEMI else 0)
        for v in Variant:
            try:
                plan_for(scen, v)
            except ConfigError:
                continue
            out.append((scen, v))
    return out


_KINK_GAP = 1e-3


def _relu_margin(arrays: dict[str, np.ndarray], x: np.ndarray) -> float:
    """Smallest |pre-activation| over the extractor's ReLUs; near 0 breaks a central difference."""
    margin, h, i = np.inf, x, 0
    while f"M{i}.W" in arrays:
        pre = h @ arrays[f"M{i}.W"].T + arrays[f"M{i}.b"]
        margin = min(margin, float(np.abs(pre).min()))
        h, i = np.maximum(pre, 0.0), i + 1
    return margin


def _composite_case(scenario: Scenario, variant: Variant, rng: np.random.Generator):
    plan = plan_for(scenario, variant)
    n_src_cls, n_tgt_cls = 3, 3
    arch = ArchSpec(
        input_dim=3, hidden=(4,), feature_dim=4, cfs_dim=3, source_classes=n_src_cls,
        target_classes=n_tgt_cls if scenario.has_target_classifier else 0,
        autoencoder=variant is Variant.AE,
    )
    params = init_params(arch, rng)
    # biases away from zero keep ReLU pre-activations off their kink
    for name in params.arrays:
        if name.endswith(".b"):
            params.arrays[name] = rng.uniform(0.1, 0.5, size=params.arrays[name].shape)

    labels, domain = [], []
    if plan.source_rows:
        n_s = 6
        labels += list(np.arange(n_s) % n_src_cls)
        domain += [0] * n_s
    if plan.target_rows:
        n_t = 6
        if plan.target_labelled_only:
            tl = list(np.arange(n_t) % n_tgt_cls)
        elif scenario.kind is ScenarioKind.SEMI:
            tl = [0, 1, 2] + [-1] * (n_t - 3)
        else:
            tl = [-1] * n_t
        labels += tl
        domain += [1] * n_t
    x = rng.normal(size=(len(labels), arch.input_dim))
    while _relu_margin(params.arrays, x) < _KINK_GAP:
        x = rng.normal(size=x.shape)
    batch = Batch(x, np.asarray(labels, dtype=np.int64), np.asarray(domain, dtype=np.int64))
    weights = LossWeights(beta_c=0.7, beta_m=0.3, beta_tgt_ent=0.5, beta_ae=0.9,
                          label_smoothing=0.1, margin=10.0)
    fw = forward(params, batch.x)
    lap: Laplacian | None = None
    if "graph" in plan.terms:
        basis = fw.F.value if plan.classic_graph else fw.F_C.value
        lap = batch_laplacian(basis, GraphSpec(k=3))
    ae_target = fw.F.value if "ae" in plan.terms else None

    def build(tape, leaves):
        fwd = forward_leaves(tape, leaves, batch.x)
        return build_objective(fwd, batch, weights, scenario, plan, GraphSpec(k=3), lap, ae_target)[0]

    return build, params.arrays


def run_gradcheck(instances: int = 20, seed: int = 0, h: float = 1e-5,
                  composites: bool = True) -> GradcheckReport:
    """Run every op and composite ``instances`` times; return per-entry max error."""
    t0 = time.perf_counter()
    report = GradcheckReport()
    rng = np.random.default_rng(seed)

    def note(name, errs):
        err = max(errs.values()) if errs else 0.0
        report.max_error[name] = max(report.max_error.get(name, 0.0), err)
        report.instances[name] = report.instances.get(name, 0) + 1

    for _ in range(instances):
        for name, build, arrays in _op_cases(rng):
            note(name, nx.check_gradients(build, arrays, h))
    if composites:
        for scenario, variant in scenario_variants():
            name = f"composite/{scenario.kind.value}/{variant.value}"
            for _ in range(instances):
                build, arrays = _composite_case(scenario, variant, rng)
                note(name, nx.check_gradients(build, arrays, h))
    report.seconds = time.perf_counter() - t0
    return report
