"""Command-line entry point: ``paritycot <subcommand> [options]``.

Exit codes: 0 on success / perfect accuracy, 2 when a training run stops
at its budget without reaching perfect accuracy, 1 on any error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from paritycot import construct, gpt, metrics, simplified, training
from paritycot.numerics import RngStream
from paritycot.parity_data import DatasetMeta, gen_batch, read_dataset, sample_secret_set, write_dataset

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BUDGET = 2


class CliError(Exception):
    pass


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root random seed")
    common.add_argument("--threads", type=int, default=None,
                        help="worker processes for parallel work (default: CPU count)")
    common.add_argument("--out-dir", default="runs", help="output root directory")
    common.add_argument("--config", default=None, help="JSON config file (flat key schema)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key; may be repeated")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="paritycot",
                                     description="Sparse parity experiments with and without chain-of-thought.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="write a parity dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--cot", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--random-order", action="store_true", help="random CoT processing order")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True, help="dataset path (a .meta.json sidecar is added)")

    p = sub.add_parser("train", parents=[common], help="train one model and write a run directory")
    p.add_argument("--run-id", default=None)

    p = sub.add_parser("verify-construction", parents=[common],
                       help="check the explicit no-CoT construction on all or sampled inputs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--margin-mult", type=float, default=1.0, help="multiplier on 40 log n")
    p.add_argument("--mode", choices=("exhaustive", "sampled"), default="exhaustive")
    p.add_argument("--samples", type=int, default=4096)
    p.add_argument("--out", default=None, help="report path (JSON)")

    p = sub.add_parser("three-step", parents=[common], help="theory schedule on the simplified model")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--m", type=int, default=32)
    p.add_argument("--mode", choices=("strict", "relaxed"), default="relaxed")
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--scale", type=float, default=None, help="strict mode: batch scale factor")
    p.add_argument("--val-size", type=int, default=2048)
    p.add_argument("--out", default=None, help="summary path (JSON)")

    p = sub.add_parser("sweep", parents=[common], help="sample complexity over a (k, cot, lr, seed) grid")
    p.add_argument("--k-values", default="1,2,3")
    p.add_argument("--lrs", default="3e-4,1e-3")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per cell")
    p.add_argument("--cot-values", default="1,0")
    p.add_argument("--out", default=None, help="CSV path (default <out-dir>/sweep.csv)")

    p = sub.add_parser("entropy", parents=[common], help="average normalized attention entropy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset written by `gen`")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")

    p = sub.add_parser("report", parents=[common], help="summarize a run directory")
    p.add_argument("run_dir")
    return parser


# ---------------------------------------------------------------------------
# config handling


def load_config(path, overrides, seed=None) -> training.TrainConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise CliError(f"config {path} must hold a JSON object")
    for item in overrides:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        data[key.strip()] = value
    if seed is not None:
        data["seed"] = seed
    try:
        return training.TrainConfig.from_dict(data)
    except (KeyError, ValueError) as exc:
        raise CliError(str(exc).strip('"')) from exc


def _threads(args) -> int:
    return args.threads if args.threads is not None else (os.cpu_count() or 1)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    if args.count < 1:
        raise CliError("--count must be >= 1")
    seed = 0 if args.seed is None else args.seed
    root = RngStream(seed)
    task = sample_secret_set(args.n, args.k, root.spawn(training.STREAM_TASK), args.random_order)
    seqs = gen_batch(task, args.cot, root.spawn(training.STREAM_TRAIN), args.count)
    meta = DatasetMeta(n=task.n, k=task.k, secret=list(task.secret), order=list(task.order), cot=args.cot,
                       count=args.count, seed=seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(args.out, seqs, meta)
    print(f"wrote {args.count} sequences of length {seqs.shape[1]} to {args.out}")
    return EXIT_OK


def default_run_id(config: training.TrainConfig) -> str:
    mode = "cot" if config.cot else "nocot"
    return f"{config.model}-n{config.n}-k{config.k}-{mode}-seed{config.seed}"


def cmd_train(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    run_dir = Path(args.out_dir) / (args.run_id or default_run_id(config))
    result = training.run_training(config)
    training.write_run_dir(run_dir, result, config.to_dict())
    rec = result.record
    print(f"{run_dir}: halt={rec.halt_reason} steps={rec.steps} samples={rec.samples_seen} "
          f"samples_at_perfect={rec.samples_at_perfect}")
    return EXIT_OK if rec.halt_reason == training.HALT_PERFECT else EXIT_BUDGET


def cmd_verify_construction(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.mode == "exhaustive" and args.n > construct.MAX_EXHAUSTIVE_N:
        raise CliError(f"exhaustive verification is limited to n <= {construct.MAX_EXHAUSTIVE_N}; "
                       "use --mode sampled")
    root = RngStream(seed)
    task = sample_secret_set(args.n, args.k, root.spawn(training.STREAM_TASK))
    emb = simplified.init_embeddings(args.n + 2, args.d, root.spawn(training.STREAM_INIT))
    margin = args.margin_mult * construct.default_margin(args.n)
    try:
        params = construct.build_parity_weights(task, emb, margin)
    except construct.IllConditionedEmbeddings as exc:
        raise CliError(str(exc)) from exc
    report = construct.verify_perfect_accuracy(params, emb, task, mode=args.mode, samples=args.samples,
                                               rng=root.spawn(training.STREAM_VAL), workers=_threads(args))
    out = report.to_dict()
    out.update(n=args.n, k=args.k, d=args.d, margin=margin, margin_mult=args.margin_mult, seed=seed,
               secret=list(task.secret))
    path = args.out or Path(args.out_dir) / f"construction-n{args.n}-k{args.k}-d{args.d}.json"
    _write_json(path, out)
    print(f"accuracy={report.accuracy!r} over {report.inputs_tested} inputs, min |y|={report.min_margin:.4g}, "
          f"max leak={report.max_leak:.3g} -> {path}")
    return EXIT_OK if report.accuracy == 1.0 else EXIT_ERROR


def cmd_three_step(args) -> int:
    seed = 0 if args.seed is None else args.seed
    root = RngStream(seed)
    task = sample_secret_set(args.n, args.k, root.spawn(training.STREAM_TASK))
    emb = simplified.init_embeddings(args.n + args.k + 1, args.d, root.spawn(training.STREAM_INIT))
    if args.mode == "strict":
        schedule = training.compute_theory_schedule(args.n, args.k, args.m, args.delta,
                                                    0.1 if args.eps is None else args.eps, args.scale)
        plan = None
    else:
        plan = training.RelaxedPlan() if args.eps is None else training.RelaxedPlan(eps=args.eps)
        schedule = plan.schedule(args.n, args.k, args.m, args.delta)
    with training.pin_blas_threads(1):
        result = training.run_three_step_theory(task, emb, args.m, schedule, root.spawn(10), mode=args.mode,
                                                plan=plan, val_size=args.val_size)
        one_hot = construct.check_one_hot_attention(result.params, emb, task, tol=0.1,
                                                    rng=root.spawn(training.STREAM_VAL), samples=args.val_size)
    summary = result.summary()
    summary["one_hot_max_deviation"] = one_hot.max_leak
    summary["one_hot_min_mass_on_source"] = min(v["min_mass_on_source"]
                                                for v in one_hot.details["per_position"].values())
    path = args.out or Path(args.out_dir) / f"three-step-{args.mode}-n{args.n}-k{args.k}-seed{seed}.json"
    _write_json(path, summary)
    print(f"[{args.mode} mode] accuracy={result.accuracy!r} micro-batches={result.micro_batches} "
          f"first attention gradient zero={result.first_attention_grad_zero} "
          f"one-hot deviation={one_hot.max_leak:.3g} -> {path}")
    return EXIT_OK if result.accuracy == 1.0 else EXIT_BUDGET


def cmd_sweep(args) -> int:
    base = load_config(args.config, args.set, args.seed)
    ks, lrs = _int_list(args.k_values), _float_list(args.lrs)
    cots = [bool(int(v)) for v in args.cot_values.split(",") if v.strip()]
    result = training.sweep(base, ks, lrs, args.seeds, cots, workers=_threads(args))
    path = Path(args.out) if args.out else Path(args.out_dir) / "sweep.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    result.write_csv(path)
    for (k, cot), value in sorted(result.table().items()):
        shown = "budget-exceeded" if math.isinf(value) else f"{value:g}"
        print(f"k={k} cot={int(cot)} best median samples={shown}")
    print(f"wrote {len(result.rows)} cells to {path}")
    return EXIT_OK


def _load_any_checkpoint(path):
    try:
        params, emb, meta = simplified.load_checkpoint(path)
        return params, emb, meta
    except (ValueError, KeyError):
        params, meta = gpt.load_checkpoint(path)
        return params, None, meta


def cmd_entropy(args) -> int:
    seqs, _ = read_dataset(args.data)
    try:
        model, emb, _ = _load_any_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    with training.pin_blas_threads(1):
        report = metrics.average_entropy(model, seqs, emb)
    if args.out:
        report.write_csv(args.out)
        print(f"wrote entropy report for {report.count} sequences to {args.out}")
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(["layer", "head", "mean_normalized_entropy"])
        for (layer, head), value in sorted(report.values.items()):
            writer.writerow([layer, head, repr(float(value))])
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        with open(run_dir / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        summary = json.loads((run_dir / "summary.json").read_text())
    except OSError as exc:
        raise CliError(f"{run_dir} is not a complete run directory: {exc}") from exc
    if not rows:
        print(f"{run_dir}: no evaluations recorded; halt={summary['halt_reason']}")
        return EXIT_OK
    first, last = rows[0], rows[-1]
    perfect = next((r for r in rows if float(r["ar_acc"]) == 1.0), None)
    print(f"run: {run_dir}")
    print(f"halt reason: {summary['halt_reason']}, steps: {summary['steps']}, samples: {summary['samples_seen']}")
    print(f"samples at perfect: {summary['samples_at_perfect']}")
    print(f"final tf_acc={float(last['tf_acc']):.4f} ar_acc={float(last['ar_acc']):.4f} "
          f"loss={float(last['loss']):.4g}")
    print(f"min entropy: initial={float(first['min_entropy']):.4f} final={float(last['min_entropy']):.4f}")
    if perfect is not None:
        drop = float(first["min_entropy"]) - float(perfect["min_entropy"])
        print(f"entropy drop at first perfect evaluation (step {perfect['step']}): {drop:.4f}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "verify-construction": cmd_verify_construction,
            "three-step": cmd_three_step, "sweep": cmd_sweep, "entropy": cmd_entropy, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    if args.command not in ("train", "sweep") and (args.config or args.set):
        print(f"error: --config/--set apply to train and sweep, not {args.command}", file=sys.stderr)
        return EXIT_ERROR
    try:
        return COMMANDS[args.command](args)
    except (CliError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
