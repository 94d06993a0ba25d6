"""``dp`` command line interface.

Subcommands: pretrain, finetune, sweep, and accountant {epsilon,
calibrate}. Accountant subcommands print a single machine-parseable line.
Exit codes: 0 success, 2 config error, 3 accounting infeasible, 4 numeric
failure.
"""

import argparse
import math
import os
import sys

from dpfine import accountant, checkpoint, harness
from dpfine.errors import ConfigError, InfeasibleBudgetError, NumericFailure
from dpfine.report import RunReport, emit

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="dp", description="Differentially private fine-tuning harness."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_pre = sub.add_parser("pretrain", help="non-private pretraining on the public split")
    p_pre.add_argument("--config", required=True)
    p_pre.add_argument("--out", default=None, help="checkpoint path (default: out_dir/pretrain.ckpt)")

    p_ft = sub.add_parser("finetune", help="private fine-tuning under a target epsilon")
    p_ft.add_argument("--config", required=True)
    p_ft.add_argument("--strategy", required=True,
                      help="whole | last | first-last | custom:<name,...>")
    p_ft.add_argument("--epsilon", required=True,
                      help="target epsilon, or 'inf' for the NON-PRIVATE debug mode")
    p_ft.add_argument("--checkpoint", default=None,
                      help="pretrained checkpoint (default: pretrain first)")

    p_sweep = sub.add_parser("sweep", help="strategies x epsilon grid, Table-style report")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--out-dir", default=None)

    p_acc = sub.add_parser("accountant", help="standalone RDP accounting")
    acc_sub = p_acc.add_subparsers(dest="acc_command", required=True)

    p_eps = acc_sub.add_parser("epsilon", help="epsilon spent by a run")
    p_eps.add_argument("--sigma", type=float, required=True)
    p_eps.add_argument("--q", type=float, required=True)
    p_eps.add_argument("--steps", type=int, required=True)
    p_eps.add_argument("--delta", type=float, required=True)

    p_cal = acc_sub.add_parser("calibrate", help="noise multiplier for a target epsilon")
    p_cal.add_argument("--epsilon", type=float, required=True)
    p_cal.add_argument("--delta", type=float, required=True)
    p_cal.add_argument("--q", type=float, required=True)
    p_cal.add_argument("--steps", type=int, required=True)
    return parser


def _cmd_pretrain(args):
    config = harness.load_config(args.config)
    path, acc = harness.pretrain_to_checkpoint(config, args.out)
    print(f"checkpoint={path} pretrain_accuracy={acc!r}")
    return EXIT_OK


def _cmd_finetune(args):
    config = harness.load_config(args.config)
    strategy = harness.finetune.parse_strategy(args.strategy)
    eps = math.inf if args.epsilon.strip() == "inf" else float(args.epsilon)
    if not eps > 0:
        raise ConfigError(f"epsilon must be positive, got {args.epsilon}")

    datasets = harness.load_datasets(config)
    if args.checkpoint or config.checkpoint:
        base_model, _ = checkpoint.load(args.checkpoint or config.checkpoint)
    else:
        base_model, _ = harness.pretrain(config, datasets[0])
    seed = harness.cell_seed(config.seed, strategy.label, eps)
    rec = harness.finetune_dp(config, base_model, datasets, strategy, eps, seed)
    rep = RunReport(dataset=datasets[1].name, base_seed=config.seed, records=[rec])
    emit(rep, config.out_dir)
    tag = " NON-PRIVATE" if rec.non_private else ""
    print(
        f"strategy={rec.strategy} epsilon={rec.epsilon_realized!r} sigma={rec.sigma!r}"
        f" accuracy_ema={rec.accuracy_ema!r} accuracy_raw={rec.accuracy_raw!r}"
        f" trainable_d={rec.trainable_params}{tag}"
    )
    print(f"report written to {config.out_dir}")
    return EXIT_OK


def _cmd_sweep(args):
    config = harness.load_config(args.config)
    out_dir = args.out_dir or config.out_dir
    report = harness.sweep(config, out_dir)
    with open(os.path.join(out_dir, "table.txt")) as f:
        sys.stdout.write(f.read())
    failed = [r for r in report.records if r.status != "ok"]
    print(f"{len(report.records) - len(failed)}/{len(report.records)} cells completed;"
          f" report in {out_dir}")
    return EXIT_OK


def _cmd_accountant(args):
    if args.acc_command == "epsilon":
        eps, alpha = accountant.epsilon_spent(args.q, args.sigma, args.steps, args.delta)
        print(f"epsilon={eps!r} alpha={alpha!r}")
    else:
        cal = accountant.calibrate_sigma(args.epsilon, args.delta, args.q, args.steps)
        print(f"sigma={cal.sigma!r} epsilon={cal.epsilon!r} alpha={cal.alpha!r}")
    return EXIT_OK


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "pretrain": _cmd_pretrain,
        "finetune": _cmd_finetune,
        "sweep": _cmd_sweep,
        "accountant": _cmd_accountant,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleBudgetError as exc:
        print(f"accounting infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
