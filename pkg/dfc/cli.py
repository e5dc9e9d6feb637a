"""Command line interface: ``dfc <command> [options]``"""
import argparse
import sys

from .compressor import compress, finetune, train_baseline, evaluate
from .config import RunConfig, KEYS
from .experiments import schedule_ablation, scheme_comparison, mode_ablation
from .io import (load_model, save_model, load_dataset, save_dataset, synth_dataset, save_state, load_state,
                 run_log_table)
from .model import build_toy_cnn
from .realize import realize
from .utils import format_record, print_failure, print_version

__all__ = ["main", "build_parser"]


def _result(**fields):
    print(format_record("RESULT", **fields))


def _run_config(args):
    config = RunConfig.from_file(args.config) if args.config is not None else RunConfig()
    return config.update({key: getattr(args, key) for key in KEYS}, source="command line")


def _synth(args):
    c, h, w = args.shape
    data = synth_dataset(args.seed, shape=(c, h, w), n_classes=args.classes, n=args.n_train + args.n_test)
    # one draw so that both splits share the class prototypes
    train, test = data.subset(slice(0, args.n_train)), data.subset(slice(args.n_train, len(data)))
    save_dataset(train, args.train_out)
    if args.test_out is not None:
        save_dataset(test, args.test_out)
    _result(train=len(train), test=len(test) if args.test_out is not None else 0, classes=args.classes)


def _train_baseline(args):
    config = _run_config(args)
    data = load_dataset(args.data)
    if args.model_in is not None:
        model = load_model(args.model_in)
    else:
        model = build_toy_cnn(input_shape=tuple(int(n) for n in data.shape), n_classes=data.n_classes,
                              channels=tuple(args.channels), seed=config["seed"])
    validation = load_dataset(args.validation) if args.validation is not None else None
    model = train_baseline(model, data, epochs=args.train_epochs, lr=config["baseline_lr"],
                           momentum=config["momentum"], batch_size=config["batch_size"],
                           validation=validation, seed=config["seed"], flip=config["flip"],
                           crop=config["crop"], verbose=args.verbose)
    save_model(model, args.model_out)
    _result(accuracy=evaluate(model, data if validation is None else validation).accuracy)


def _compress(args):
    config = _run_config(args)
    model, data = load_model(args.model_in), load_dataset(args.data)
    run = compress(model, data, config.train_config(), config.budget_config(), log_path=args.log,
                   config_record=config.values, verbose=args.verbose)
    save_state(run.state, args.state_out)
    if args.config_out is not None:
        with open(args.config_out, "w") as f:
            f.write(config.render())
    _result(flop_ratio=run.soft_ratio, hard_ratio=run.hard_ratio, status=run.status, passes=run.passes,
            iterations=len(run.log), saturation=run.state.saturation())


def _realize(args):
    config = _run_config(args)
    model, state = load_model(args.model_in), load_state(args.state_in)
    compressed, plan, report = realize(model, state, shrink=config["shrink"], verbose=args.verbose)
    save_model(compressed, args.model_out)
    if args.plan is not None:
        plan.summary_table().write(args.plan, format="ascii.csv", overwrite=True)
    _result(**report.summary())


def _finetune(args):
    config = _run_config(args)
    model, data = load_model(args.model_in), load_dataset(args.data)
    validation = load_dataset(args.validation) if args.validation is not None else None
    model = finetune(model, data, epochs=config["finetune_epochs"], lr=config["finetune_lr"],
                     momentum=config["momentum"], batch_size=config["batch_size"], validation=validation,
                     seed=config["seed"], flip=config["flip"], crop=config["crop"], verbose=args.verbose)
    save_model(model, args.model_out)
    _result(accuracy=evaluate(model, data if validation is None else validation).accuracy)


def _eval(args):
    model, data = load_model(args.model_in), load_dataset(args.data)
    evaluation = evaluate(model, data)
    if args.per_class:
        evaluation.per_class_table().pprint(max_lines=-1)
    _result(accuracy=evaluation.accuracy, samples=int(evaluation.total.sum()))


def _report(args):
    table = run_log_table(args.log)
    if args.out is not None:
        table.write(args.out, format="ascii.csv", overwrite=True)
    else:
        table.write(sys.stdout, format="ascii.csv")
    if args.plot is not None:
        from .plot import plot_run_log
        plot_run_log(table, budget=args.budget, show=False, save_path=args.plot)
    _result(rows=len(table))


def _ablate(args):
    config = _run_config(args)
    model, train, test = load_model(args.model_in), load_dataset(args.data), load_dataset(args.test)
    run = {"schedule": schedule_ablation, "scheme": scheme_comparison, "mode": mode_ablation}[args.kind]
    table = run(model, train, test, budgets=tuple(args.budgets), config=config, verbose=args.verbose)
    if args.out is not None:
        table.write(args.out, format="ascii.csv", overwrite=True)
    else:
        table.pprint(max_lines=-1, max_width=-1)
    _result(runs=len(table))


def _add_config_flags(parser):
    parser.add_argument("--config", help="File of key=value settings")
    group = parser.add_argument_group("settings", "Override a key of the configuration file")
    for key in KEYS:
        group.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="VALUE")


def build_parser():
    parser = argparse.ArgumentParser(prog="dfc", description="Differentiable filter pruning and low-rank "
                                                             "decomposition under a FLOP budget")
    parser.add_argument("--version", action="store_true", help="Print the version and exit")
    subparsers = parser.add_subparsers(dest="command")

    p = subparsers.add_parser("synth", help="Write a synthetic dataset")
    p.add_argument("--train-out", required=True)
    p.add_argument("--test-out")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--shape", type=int, nargs=3, default=(3, 16, 16), metavar=("C", "H", "W"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_synth)

    p = subparsers.add_parser("train-baseline", help="Train a network from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument("--model-in", help="Start from this network instead of a new toy CNN")
    p.add_argument("--validation")
    p.add_argument("--train-epochs", type=int, default=10)
    p.add_argument("--channels", type=int, nargs="+", default=(32, 64, 64, 128))
    _add_config_flags(p)
    p.set_defaults(func=_train_baseline)

    p = subparsers.add_parser("compress", help="Learn filter masks and rank thresholds")
    p.add_argument("--data", required=True)
    p.add_argument("--model-in", required=True)
    p.add_argument("--state-out", required=True)
    p.add_argument("--log", help="Run log to append to")
    p.add_argument("--config-out", help="Write the effective settings to this file")
    _add_config_flags(p)
    p.set_defaults(func=_compress)

    p = subparsers.add_parser("realize", help="Build the pruned and factorized network of a selection")
    p.add_argument("--model-in", required=True)
    p.add_argument("--state-in", required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument("--plan", help="CSV file of the per-layer plan")
    _add_config_flags(p)
    p.set_defaults(func=_realize)

    p = subparsers.add_parser("finetune", help="Train a realized network")
    p.add_argument("--data", required=True)
    p.add_argument("--model-in", required=True)
    p.add_argument("--model-out", required=True)
    p.add_argument("--validation")
    _add_config_flags(p)
    p.set_defaults(func=_finetune)

    p = subparsers.add_parser("eval", help="Accuracy of a network")
    p.add_argument("--data", required=True)
    p.add_argument("--model-in", required=True)
    p.add_argument("--per-class", action="store_true")
    p.set_defaults(func=_eval)

    p = subparsers.add_parser("report", help="CSV of the per-iteration records of a run log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", help="CSV file, by default standard output")
    p.add_argument("--plot", help="Also save a plot of the run to this PNG file")
    p.add_argument("--budget", type=float, help="Budget line of the plot")
    p.set_defaults(func=_report)

    p = subparsers.add_parser("ablate", help="Compare variants of the full pipeline")
    p.add_argument("--kind", choices=("schedule", "scheme", "mode"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--model-in", required=True)
    p.add_argument("--budgets", type=float, nargs="+", default=(0.7, 0.6, 0.5))
    p.add_argument("--out", help="CSV file, by default printed")
    _add_config_flags(p)
    p.set_defaults(func=_ablate)

    for sub in subparsers.choices.values():
        sub.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        print_version()
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    try:
        args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError) as e:
        print_failure(f"dfc {args.command}: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
