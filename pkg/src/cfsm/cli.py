"""Command-line entry points: gradcheck | pretrain | train | eval | inspect.

Exit codes are 0 on success, 1 on validation failures (bad config, data or
checkpoint, failed gradient check) and 2 on numeric failures (NaN/divergence).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import numerics as nx
from .errors import CFSMError, ConfigError, DimensionError, NumericError
from .evaluation import activation_histogram, classification_accuracy, retrieval_metrics, top_k_by_factor
from .experiment import ExperimentConfig, load_config, prepare_data, run_experiment, run_pretrain
from .gradcheck import run_gradcheck
from .model import ModelParams, embed, load_checkpoint, save_checkpoint
from .scenario import ScenarioKind
from .training import ExperimentData, evaluate

log = logging.getLogger("cfsm")

CHECKPOINT = "checkpoint.npz"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, default=_json_default, allow_nan=False)


def write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(_dumps(rec) + "\n")


def write_histogram(path: Path, F_C: np.ndarray, bins: int = 10) -> float:
    hist = activation_histogram(F_C, bins)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in hist.rows():
            w.writerow([f"{lo:.6g}", f"{hi:.6g}", c])
    return hist.mid_mass


def write_topk(path: Path, params: ModelParams, data: ExperimentData, k: int = 10) -> None:
    """Top-``k`` source and target training rows per CFS unit."""
    F_C = np.concatenate([embed(params, data.source.x).F_C, embed(params, data.target.x).F_C])
    domains = ["source"] * len(data.source) + ["target"] * len(data.target)
    # indices are reported within their own domain
    local = np.concatenate([np.arange(len(data.source)), np.arange(len(data.target))])
    k = min(k, len(F_C))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["factor", "rank", "index", "domain", "activation"])
        for factor, ranked in enumerate(top_k_by_factor(F_C, k, domains)):
            for rank, (idx, dom, act) in enumerate(ranked):
                w.writerow([factor, rank, int(local[idx]), dom, repr(float(act))])


def write_manifest(out: Path, command: str, config: ExperimentConfig | None, outputs: list[str],
                   extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "code_version": __version__,
        "seed": None if config is None else config.seed,
        "config": None if config is None else config.to_dict(),
        "outputs": sorted(outputs),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")


def _config(args) -> ExperimentConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def _out_dir(args, config: ExperimentConfig | None) -> Path:
    out = args.out or (config.output_dir if config is not None else None)
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'output_dir' in the config")
    out = Path(out)
    if config is not None and args.out is None and not out.is_absolute():
        out = config.base_dir / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_matching(path, data: ExperimentData) -> ModelParams:
    params = load_checkpoint(path)
    cols = data.source.x.shape[1]
    if params.arch.input_dim != cols:
        raise DimensionError(f"checkpoint {path} expects input_dim={params.arch.input_dim}, "
                             f"data has {cols} columns")
    return params


# -- commands --------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    if args.perturb_op:
        with nx.perturbed_gradient(args.perturb_op, args.perturb_factor):
            report = run_gradcheck(args.instances, args.seed or 0)
    else:
        report = run_gradcheck(args.instances, args.seed or 0)
    for line in report.lines():
        print(line)
    print(f"{len(report.max_error)} checks, {report.seconds:.1f}s, tolerance {report.tolerance:g}")
    if report.failures:
        print("FAILED: " + ", ".join(report.failures), file=sys.stderr)
        return 1
    return 0


def cmd_pretrain(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    data = prepare_data(config)
    params, tlog = run_pretrain(config, data)
    save_checkpoint(params, out / CHECKPOINT)
    write_jsonl(out / "metrics.jsonl", tlog.steps)
    acc = classification_accuracy(embed(params, data.source.x).source_logits, data.source.labels)
    write_jsonl(out / "epochs.jsonl", [{"stage": "pretrain", "epoch": config.pretrain.epochs,
                                        "source_accuracy": acc}])
    write_manifest(out, "pretrain", config, [CHECKPOINT, "metrics.jsonl", "epochs.jsonl"])
    print(_dumps({"source_accuracy": acc}))
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    data = prepare_data(config)
    init = _load_matching(args.checkpoint, data) if args.checkpoint else None
    result = run_experiment(config, data, init)
    save_checkpoint(result.params, out / CHECKPOINT)
    write_jsonl(out / "metrics.jsonl", result.pretrain_log.steps + result.train_log.steps)
    write_jsonl(out / "epochs.jsonl", result.train_log.epochs)
    write_histogram(out / "histogram.csv", embed(result.params, data.target_test.x).F_C)
    write_topk(out / "topk.csv", result.params, data, args.topk)
    write_manifest(out, "train", config,
                   [CHECKPOINT, "metrics.jsonl", "epochs.jsonl", "histogram.csv", "topk.csv"],
                   {"init_checkpoint": args.checkpoint})
    print(_dumps(result.final_metrics))
    return 0


def _split(data: ExperimentData, name: str):
    return {"target_test": data.target_test, "target": data.target, "source": data.source}[name]


def cmd_eval(args) -> int:
    config = _config(args)
    data = prepare_data(config)
    params = _load_matching(args.checkpoint, data)
    split = _split(data, args.split)
    mode = args.mode
    if mode == "auto" and args.split == "target_test":
        metrics = evaluate(params, config.scenario, split)
    else:
        if mode == "auto":
            mode = config.scenario.evaluation
        emb = embed(params, split.x)
        if mode == "retrieval":
            rep = emb.F_C if args.representation == "F_C" else emb.F
            metrics = retrieval_metrics(rep, split.labels, rep, split.labels, exclude_self=True).to_dict()
        else:
            use_target = split is not data.source and config.scenario.kind is ScenarioKind.SEMI
            logits = emb.target_logits if use_target else emb.source_logits
            if logits is None:
                raise ConfigError("checkpoint has no target classifier for this split")
            metrics = {"accuracy": classification_accuracy(logits, split.labels)}
    metrics = {"split": args.split, **metrics}
    print(_dumps(metrics))
    if args.out:
        out = _out_dir(args, config)
        (out / "eval.json").write_text(_dumps(metrics) + "\n")
    return 0


def cmd_inspect(args) -> int:
    config = _config(args)
    out = _out_dir(args, config)
    data = prepare_data(config)
    params = _load_matching(args.checkpoint, data)
    emb = embed(params, data.target_test.x)
    mid = write_histogram(out / "histogram.csv", emb.F_C, args.bins)
    write_topk(out / "topk.csv", params, data, args.topk)
    rep = emb.F_C if args.representation == "F_C" else emb.F
    res = retrieval_metrics(rep, data.target_test.labels, rep, data.target_test.labels, exclude_self=True)
    summary = {"target_mid_mass": mid, "representation": args.representation, **res.to_dict()}
    (out / "inspect.json").write_text(_dumps(summary) + "\n")
    write_manifest(out, "inspect", config, ["histogram.csv", "topk.csv", "inspect.json"],
                   {"checkpoint": args.checkpoint})
    print(_dumps(summary))
    return 0


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfsm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cfsm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, checkpoint=False):
        if config:
            p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", help="output directory (overrides config output_dir)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if checkpoint:
            p.add_argument("--checkpoint", required=checkpoint == "required",
                           help="model checkpoint (.npz)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and objective")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb-op", help=argparse.SUPPRESS)
    p.add_argument("--perturb-factor", type=float, default=1.01, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pretrain", help="supervised source pre-training")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="pre-train (if needed) and joint-train one variant")
    common(p, checkpoint="optional")
    p.add_argument("--topk", type=int, default=10, help="rows per CFS unit in topk.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, checkpoint="required")
    p.add_argument("--split", choices=["target_test", "target", "source"], default="target_test")
    p.add_argument("--mode", choices=["auto", "classification", "retrieval"], default="auto")
    p.add_argument("--representation", choices=["F", "F_C"], default="F")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="activation histogram, top-k per factor, retrieval diagnostics")
    common(p, checkpoint="required")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--representation", choices=["F", "F_C"], default="F")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (CFSMError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
