"""Command-line driver: count-params, train, finetune, bench,
grad-check and compare.

Exit codes: 0 success, 2 config/usage error, 3 training divergence,
4 I/O error. All randomness flows from --seed / config seeds; outputs
land under --out with fixed filenames (params.csv, runlog.csv,
bench.csv, bench.plot, checkpoint.slfm).
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import replace
from pathlib import Path

from . import attention as A
from . import bench as B
from . import encoder as E
from . import training as TR
from . import verify as V

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


class _CliConfigError(Exception):
    pass


def _load_encoder_config(path):
    try:
        return E.load_config(path)
    except OSError as exc:
        raise _CliConfigError(f"cannot read config {path}: {exc}")
    except (E.ConfigError, ValueError) as exc:
        raise _CliConfigError(f"bad config {path}: {exc}")


def _load_train_config(path, seed=None):
    try:
        cfg = TR.load_train_config(path)
    except OSError as exc:
        raise _CliConfigError(f"cannot read train config {path}: {exc}")
    except (TR.TrainConfigError, E.ConfigError, ValueError) as exc:
        raise _CliConfigError(f"bad train config {path}: {exc}")
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _write_bytes(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


# ---------------------------------------------------------------------------
# the headline size-reduction matrix (BERT-BASE shape)


def table1_variants():
    base = E.BERT_BASE
    every = E.IntermediatePeriod.every
    none = E.IntermediatePeriod.none()
    rows = [("n=1 (base)", base)]
    for n in (2, 3, 4, 6):
        rows.append((f"n={n}", replace(base, period=every(n))))
    rows.append(("n=inf", replace(base, period=none)))
    rows.append(("bandd", E.bandd(base)))
    rows.append(("nomlpln", E.no_mlp_layernorm(base)))
    rows.append(("bandd+nomlpln", E.no_mlp_layernorm(E.bandd(base))))
    rows.append(("bandd+n=2", replace(E.bandd(base), period=every(2))))
    rows.append(("nomlpln+n=2", replace(E.no_mlp_layernorm(base), period=every(2))))
    rows.append(("bandd+nomlpln+n=2",
                 replace(E.no_mlp_layernorm(E.bandd(base)), period=every(2))))
    rows.append(("bandd+nomlpln+n=inf",
                 replace(E.no_mlp_layernorm(E.bandd(base)), period=none)))
    return rows


def _params_csv(rows):
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["variant", "embeddings", "attention", "intermediate",
                     "layernorms", "pooler", "total", "size_ratio"])
    base_total = rows[0][1].total
    for name, count in rows:
        writer.writerow([name, count.embeddings, count.attention,
                         count.intermediate, count.layernorms, count.pooler,
                         count.total, f"{base_total / count.total:.4f}"])
    return out.getvalue()


def cmd_count_params(args):
    if args.table1:
        rows = [(name, E.count_parameters(cfg)) for name, cfg in table1_variants()]
    else:
        config = _load_encoder_config(args.config)
        rows = [("config", E.count_parameters(config))]
    base_total = rows[0][1].total
    print(f"{'variant':<22}{'total':>14}{'ratio':>8}")
    for name, count in rows:
        print(f"{name:<22}{count.total:>14,}{base_total / count.total:>8.2f}")
    if args.out:
        _write_text(Path(args.out) / "params.csv", _params_csv(rows))
        print(f"wrote {Path(args.out) / 'params.csv'}")
    return EXIT_OK


def cmd_train(args):
    config = _load_encoder_config(args.config)
    tcfg = _load_train_config(args.train_config, args.seed)
    stack = E.build_stack(config, tcfg.seed)
    task = TR.SyntheticTask(tcfg.task_kind, config.vocab_size, tcfg.seed,
                            tcfg.task_states)
    log, _head = TR.pretrain_mlm(stack, task, tcfg)
    out = Path(args.out)
    _write_text(out / "runlog.csv", log.to_csv())
    _write_bytes(out / "checkpoint.slfm", E.serialize_checkpoint(stack))
    print(f"status: {log.status}")
    if log.rows:
        print(f"steps: {len(log.rows)}, final train loss: {log.rows[-1].loss:.4f}")
    if log.final_eval_loss is not None:
        print(f"eval loss: {log.initial_eval_loss:.4f} -> "
              f"{log.final_eval_loss:.4f}")
    return EXIT_DIVERGED if log.status.kind == "Diverged" else EXIT_OK


def cmd_finetune(args):
    tcfg = _load_train_config(args.train_config, args.seed)
    try:
        data = Path(args.checkpoint).read_bytes()
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        config, _ = E.peek_checkpoint_config(data)
    except E.CheckpointError as exc:
        raise _CliConfigError(f"bad checkpoint: {exc}")
    task = TR.ClassificationTask(config.vocab_size, tcfg.seed, tcfg.task_states)
    report = TR.finetune_classifier(data, task, tcfg)
    out = Path(args.out)
    _write_text(out / "runlog.csv", report["log"].to_csv())
    print(f"status: {report['status']}")
    print(f"accuracy: {report['accuracy_before']:.3f} -> "
          f"{report['accuracy_after']:.3f}")
    return EXIT_DIVERGED if report["status"].kind == "Diverged" else EXIT_OK


def cmd_bench(args):
    base_cfg = _load_encoder_config(args.baseline_config)
    var_cfg = _load_encoder_config(args.config)
    try:
        seq_lens = tuple(int(s) for s in args.seqlens.split(","))
    except ValueError:
        raise _CliConfigError(f"bad --seqlens {args.seqlens!r}")
    try:
        baseline = B.BenchSpec("baseline", base_cfg, (args.batch,), seq_lens,
                               warmup_iters=args.warmup,
                               measured_iters=args.iters,
                               threads=args.threads, seed=args.seed)
        variant = B.BenchSpec("variant", var_cfg, (args.batch,), seq_lens,
                              warmup_iters=args.warmup,
                              measured_iters=args.iters,
                              threads=args.threads, seed=args.seed)
    except B.BenchSpecError as exc:
        raise _CliConfigError(str(exc))
    report = B.sweep(baseline, [variant])
    out = Path(args.out)
    _write_text(out / "bench.csv", report.to_csv())
    _write_text(out / "bench.plot", report.plot_data())
    for r in report.rows:
        print(f"{r.variant:<10} S={r.seq_len:<5} "
              f"{r.tokens_per_sec_median:>12.0f} tok/s  "
              f"speedup {r.speedup_vs_baseline:.3f}  "
              f"flop ratio {r.flop_ratio_vs_baseline:.3f}")
    return EXIT_OK


def cmd_grad_check(args):
    config = _load_encoder_config(args.config) if args.config else None
    try:
        reports = V.run_grad_check_suite(config, ops=args.ops)
    except V.OversizeError as exc:
        raise _CliConfigError(str(exc))
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(r)
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return EXIT_OK if not failed else 1


def cmd_compare(args):
    paths = args.configs.split(",")
    if len(paths) < 2:
        raise _CliConfigError("compare needs at least two configs")
    if args.task != "mlm":
        raise _CliConfigError(f"unknown task {args.task!r}")
    configs = [(p, _load_encoder_config(p)) for p in paths]
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["config", "params_total", "flops_forward",
                     "initial_eval_loss", "final_eval_loss", "status"])
    # all-or-nothing: build every stack before any training starts
    stacks = [(p, E.build_stack(cfg, args.seed), cfg) for p, cfg in configs]
    diverged = False
    for path, stack, cfg in stacks:
        tcfg = TR.TrainConfig(total_steps=args.steps,
                              warmup_steps=min(100, args.steps // 10),
                              seed=args.seed,
                              l2_lambda=(0.01 if cfg.attention_kind ==
                                         A.NORMALIZED_BANDD else 0.0))
        task = TR.SyntheticTask(tcfg.task_kind, cfg.vocab_size, tcfg.seed,
                                tcfg.task_states)
        log, _ = TR.pretrain_mlm(stack, task, tcfg)
        diverged = diverged or log.status.kind == "Diverged"
        writer.writerow([path, E.count_parameters(cfg).total,
                         B.analytic_flops(cfg, tcfg.batch_size, tcfg.seq_len),
                         log.initial_eval_loss, log.final_eval_loss,
                         str(log.status)])
    text = out.getvalue()
    print(text, end="")
    if args.out:
        _write_text(Path(args.out) / "compare.csv", text)
    return EXIT_DIVERGED if diverged else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="slimformer",
        description="Encoder variant workbench: build, count, train, "
                    "benchmark and verify.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count-params", help="parameter counts and size ratios")
    p.add_argument("--config", help="encoder config file")
    p.add_argument("--table1", action="store_true",
                   help="run the built-in BERT-BASE variant matrix")
    p.add_argument("--out", help="output directory for params.csv")
    p.set_defaults(fn=cmd_count_params)

    p = sub.add_parser("train", help="masked-LM pre-training on synthetic data")
    p.add_argument("--config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", help="classification fine-tuning from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("bench", help="throughput and FLOP comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--baseline-config", required=True)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seqlens", default="128")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("grad-check", help="finite-difference gradient suites")
    p.add_argument("--config", help="toy encoder config (small hidden size)")
    p.add_argument("--ops", choices=V.SUITES, default="all")
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("compare", help="train several variants side by side")
    p.add_argument("--configs", required=True,
                   help="comma-separated encoder config files")
    p.add_argument("--task", default="mlm")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "count-params" and not (args.config or args.table1):
        print("count-params needs --config or --table1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except _CliConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (E.ConfigError, TR.TrainConfigError, B.BenchSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
