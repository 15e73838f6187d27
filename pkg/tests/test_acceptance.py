"""Acceptance criteria, each run at its stated tolerance.

Every test prints one ``[criterion N] PASS|FAIL ...`` line (also repeated in
the terminal summary).  Criteria that the method does not reach at desk scale
are left to fail rather than tuned until they pass.
"""

import json
import math
import time

import numpy as np
import pytest

from cfsm import numerics as nx
from cfsm.cli import main
from cfsm.data import write_idx
from cfsm.evaluation import average_precision, retrieval_metrics
from cfsm.experiment import ExperimentConfig, prepare_data, run_experiment, run_pretrain
from cfsm.gradcheck import TOLERANCE, run_gradcheck
from cfsm.graph import GraphSpec, batch_laplacian, graph_loss
from cfsm.losses import LossReport, auto_balance, factorisation_entropy

from test_evaluation import brute_force_retrieval

RESULTS: list[str] = []


def report(capsys, n: int, ok: bool, detail: str) -> None:
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)


def _mean(xs):
    return float(np.mean(xs))


# 1 -------------------------------------------------------------------------------

def test_criterion_1_gradient_suite(capsys):
    t0 = time.perf_counter()
    rep = run_gradcheck(instances=20, seed=0, h=1e-5)
    secs = time.perf_counter() - t0
    worst = max(rep.max_error, key=rep.max_error.get)
    enough = min(rep.instances.values()) >= 20
    ok = rep.ok and enough and secs < 120
    report(capsys, 1, ok, f"{len(rep.max_error)} ops/composites, worst {worst} "
                          f"{rep.max_error[worst]:.2e} < {TOLERANCE:g}, {secs:.0f}s < 120s")
    assert rep.ok, rep.failures
    assert enough
    assert secs < 120


# 2 -------------------------------------------------------------------------------

def test_criterion_2_graph_energy_identity(capsys):
    rng = np.random.default_rng(2)
    worst_id = worst_row = 0.0
    min_quad = np.inf
    for _ in range(100):
        n = int(rng.integers(2, 33))
        F_C = rng.random((n, int(rng.integers(1, 9))))
        lap = batch_laplacian(F_C, GraphSpec(k=int(rng.integers(1, n))))
        F = rng.normal(size=(n, int(rng.integers(1, 6))))
        lhs = graph_loss(nx.Tape().const(F), lap).item()
        diff = F[:, None, :] - F[None, :, :]
        rhs = 0.5 * float(np.sum(lap.W * np.einsum("ijk,ijk->ij", diff, diff)))
        worst_id = max(worst_id, abs(lhs - rhs))
        worst_row = max(worst_row, float(np.max(np.abs(lap.L.sum(axis=1)))))
        x = rng.normal(size=n)
        min_quad = min(min_quad, float(x @ lap.L @ x))
    ok = worst_id < 1e-9 and worst_row < 1e-10 and min_quad >= -1e-10
    report(capsys, 2, ok, f"max |Tr - energy| {worst_id:.1e}, max |row sum| {worst_row:.1e}, "
                          f"min x'Lx {min_quad:.2e} over 100 instances")
    assert ok


# 3 -------------------------------------------------------------------------------

def test_criterion_3_entropy_bounds_and_monotonicity(capsys):
    rng = np.random.default_rng(3)
    bound_ok = mono_ok = True
    for _ in range(200):
        n, d = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        P = rng.uniform(nx.EPS_CLIP, 1 - nx.EPS_CLIP, size=(n, d))
        v = factorisation_entropy(nx.Tape().const(P)).item()
        bound_ok &= 0.0 <= v <= d / math.e + 1e-12
        # random monotone path for one entry, starting at 1/e
        i, j = int(rng.integers(n)), int(rng.integers(d))
        end = nx.EPS_CLIP if rng.random() < 0.5 else 1 - nx.EPS_CLIP
        steps = np.sort(rng.random(12))
        path = 1 / math.e + (end - 1 / math.e) * np.concatenate([[0.0], steps, [1.0]])
        vals = []
        for p in path:
            Q = P.copy()
            Q[i, j] = p
            vals.append(factorisation_entropy(nx.Tape().const(Q)).item())
        mono_ok &= all(b < a for a, b in zip(vals, vals[1:]))
    ok = bool(bound_ok and mono_ok)
    report(capsys, 3, ok, f"bounds [0, d_C/e] held: {bound_ok}; strictly decreasing along 200 random paths: {mono_ok}")
    assert ok


# 4 -------------------------------------------------------------------------------

SHARPENING = {
    "scenario": {"kind": "SemiDLSTL", "k": 5},
    "variant": "CFSM",
    "data": {"synthetic": {"n_factors": 6, "source_classes": 4, "target_classes": 4,
                           "samples_per_class": 200, "noise": 0.3, "shift": 0.5}},
    "arch": {"hidden": [64], "feature_dim": 32, "cfs_dim": 6},
    "weights": "auto",
    "optimizer": {"epochs": 10, "batch_size": 64},
    "pretrain": {"epochs": 10, "batch_size": 64},
}


def test_criterion_4_activation_distribution(capsys):
    t0 = time.perf_counter()
    cfsm, control = [], []
    for seed in range(3):
        cfg = ExperimentConfig.from_dict({**SHARPENING, "seed": seed})
        data = prepare_data(cfg)
        init, _ = run_pretrain(cfg, data)
        res = run_experiment(cfg, data, init)
        cfsm.append(res.final_metrics["target_mid_mass"])
        # the control differs only in beta_C; beta_M stays at the balanced value
        beta_m = res.train_log.steps[-1]["beta_m"]
        ctl = ExperimentConfig.from_dict({**SHARPENING, "seed": seed, "weights": {"beta_c": 0.0, "beta_m": beta_m}})
        control.append(run_experiment(ctl, data, init).final_metrics["target_mid_mass"])
    secs = time.perf_counter() - t0
    ok = all(m < 0.25 for m in cfsm) and all(m > 0.6 for m in control) and secs < 300
    report(capsys, 4, ok, f"CFSM mid-mass {[round(m, 3) for m in cfsm]} < 0.25, "
                          f"beta_C=0 control {[round(m, 3) for m in control]} > 0.6, {secs:.0f}s")
    assert ok


# 5 -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mnist_idx(tmp_path_factory):
    mlx = pytest.importorskip("mlxtend.data")
    X, y = mlx.mnist_data()
    d = tmp_path_factory.mktemp("mnist")
    write_idx(X.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8), d / "images.idx", d / "labels.idx")
    return d


def test_criterion_5_semi_supervised_digits(capsys, mnist_idx):
    t0 = time.perf_counter()
    acc = {"TrainTarget": [], "FTTarget": [], "CFSM": []}
    for seed in range(5):
        base = {
            "scenario": {"kind": "SemiDLSTL", "k": 5}, "variant": "CFSM", "seed": seed,
            "data": {"pool": {"format": "idx", "images": str(mnist_idx / "images.idx"),
                              "labels": str(mnist_idx / "labels.idx")},
                     "source_classes": [0, 1, 2, 3, 4], "target_classes": [5, 6, 7, 8, 9],
                     "labelled_per_batch": 8},
            "arch": {"hidden": [128], "feature_dim": 64, "cfs_dim": 10},
            "weights": {"beta_c": 0.01, "beta_m": 0.01},
            "optimizer": {"epochs": 5, "lr": 1e-3},
            "pretrain": {"epochs": 5},
        }
        cfg = ExperimentConfig.from_dict(base)
        data = prepare_data(cfg)
        init, _ = run_pretrain(cfg, data)
        # the k-shot baselines see 25 rows per epoch, so their budget is given in steps
        baseline_opt = {"epochs": 300, "lr": 1e-3}
        for variant in acc:
            opt = base["optimizer"] if variant == "CFSM" else baseline_opt
            c = ExperimentConfig.from_dict({**base, "variant": variant, "optimizer": opt})
            r = run_experiment(c, data, None if variant == "TrainTarget" else init)
            acc[variant].append(r.final_metrics["accuracy"])
    secs = time.perf_counter() - t0
    m = {k: 100 * _mean(v) for k, v in acc.items()}
    ok = (m["CFSM"] >= m["FTTarget"] + 3 and m["CFSM"] >= m["TrainTarget"] + 3
          and m["FTTarget"] > m["TrainTarget"] and secs < 1200)
    report(capsys, 5, ok, f"mean accuracy over 5 seeds: CFSM {m['CFSM']:.1f}, FT Target {m['FTTarget']:.1f}, "
                          f"Train Target {m['TrainTarget']:.1f} (need CFSM >= both + 3 and FT > Train), "
                          f"{secs:.0f}s")
    assert m["CFSM"] >= m["FTTarget"] + 3
    assert m["CFSM"] >= m["TrainTarget"] + 3
    assert m["FTTarget"] > m["TrainTarget"]
    assert secs < 1200


# 6 -------------------------------------------------------------------------------

ABLATION = {
    "scenario": {"kind": "UnsupDLSTL"},
    "variant": "CFSM",
    "data": {"synthetic": {"n_factors": 6, "source_classes": 8, "target_classes": 8,
                           "samples_per_class": 100, "input_dim": 32, "noise": 1.0, "shift": 1.0}},
    "arch": {"hidden": [64], "feature_dim": 32, "cfs_dim": 8},
    "weights": "auto",
    "optimizer": {"epochs": 15, "batch_size": 64},
    "pretrain": {"epochs": 15, "batch_size": 64},
}


def test_criterion_6_ablation_ordering(capsys):
    t0 = time.perf_counter()
    r1 = {"SourceOnly": [], "CFSMMinusGraph": [], "CFSM": [], "CFSMClassicGraph": []}
    for seed in range(5):
        base = {**ABLATION, "seed": seed}
        cfg = ExperimentConfig.from_dict(base)
        data = prepare_data(cfg)
        init, _ = run_pretrain(cfg, data)
        for variant in r1:
            c = ExperimentConfig.from_dict({**base, "variant": variant})
            r1[variant].append(run_experiment(c, data, init).final_metrics["rank1"])
    secs = time.perf_counter() - t0
    m = {k: 100 * _mean(v) for k, v in r1.items()}
    slack = 0.5
    checks = {
        "CFSM >= CFSM-Graph": m["CFSM"] + slack >= m["CFSMMinusGraph"],
        "CFSM-Graph >= SourceOnly": m["CFSMMinusGraph"] + slack >= m["SourceOnly"],
        "CFSM >= CFSM+ClassicGraph": m["CFSM"] + slack >= m["CFSMClassicGraph"],
    }
    ok = all(checks.values()) and secs < 900
    means = ", ".join(f"{k} {v:.1f}" for k, v in m.items())
    report(capsys, 6, ok, f"mean R1 over 5 seeds: {means}; "
                          + "; ".join(f"{k}: {'ok' if v else 'violated'}" for k, v in checks.items())
                          + f"; {secs:.0f}s")
    for name, held in checks.items():
        assert held, f"{name} violated: {means}"
    assert secs < 900


# 7 -------------------------------------------------------------------------------

def test_criterion_7_retrieval_oracle(capsys):
    rng = np.random.default_rng(7)
    exact = True
    for _ in range(50):
        nq, ng, d = int(rng.integers(1, 21)), int(rng.integers(1, 51)), int(rng.integers(1, 5))
        gid = rng.integers(0, max(1, min(ng, 6)), size=ng)
        qid = rng.choice(gid, size=nq)
        qF, gF = rng.normal(size=(nq, d)), rng.normal(size=(ng, d))
        res = retrieval_metrics(qF, qid, gF, gid)
        r1, m = brute_force_retrieval(qF, qid, gF, gid)
        exact &= res.rank1 == r1 and abs(res.mAP - m) < 1e-12
    hand_a = average_precision([True, False, True])
    hand_b = average_precision([False, True, True])
    hand = round(hand_a, 4) == 0.8333 and round(hand_b, 4) == 0.5833
    ok = bool(exact and hand)
    report(capsys, 7, ok, f"50 random instances match brute force: {exact}; "
                          f"hand APs {hand_a:.4f} and {hand_b:.4f}")
    assert ok


# 8 -------------------------------------------------------------------------------

def test_criterion_8_determinism(capsys, tmp_path):
    cfg = {**SHARPENING, "seed": 11, "optimizer": {"epochs": 2, "batch_size": 64},
           "pretrain": {"epochs": 2, "batch_size": 64}}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    codes = [main(["train", "--config", str(path), "--out", str(tmp_path / name)]) for name in ("a", "b")]
    capsys.readouterr()
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    ok = codes == [0, 0] and a == b and len(a) > 0
    report(capsys, 8, ok, f"two CLI runs, seed 11: metrics.jsonl byte-identical ({len(a)} bytes)")
    assert ok


# 9 -------------------------------------------------------------------------------

def test_criterion_9_auto_balance(capsys):
    def reports(sup, ent, graph):
        return [LossReport(0.0, {"supervised": sup * f, "factorisation": ent * f, "graph": graph * f})
                for f in (0.8, 0.9, 1.0, 1.1, 1.2)]

    a = auto_balance(reports(2.0, 0.5, 0.02))
    b = auto_balance(reports(1.0, 1.0, 1.0))
    ok = (a.beta_c, a.beta_m) == (10.0, 100.0) and (b.beta_c, b.beta_m) == (1.0, 1.0)
    report(capsys, 9, ok, f"medians (2, 0.5, 0.02) -> ({a.beta_c:g}, {a.beta_m:g}); "
                          f"equal medians -> ({b.beta_c:g}, {b.beta_m:g})")
    assert ok
