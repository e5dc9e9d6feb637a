"""Compress-realize-finetune pipelines and the ablations built on them"""
from astropy.table import Table

from .compressor import compress, finetune, evaluate
from .config import RunConfig
from .realize import realize
from .surrogate import MODES

__all__ = ["run_pipeline", "schedule_ablation", "scheme_comparison", "mode_ablation", "ablation_grid"]


def run_pipeline(model, train, test, config=None, validation=None, log_path=None, verbose=False):
    """Compress a pretrained network, realize it, fine-tune it and evaluate every stage

    Parameters
    ----------
    model : :class:`~dfc.model.ModelGraph`
        Pretrained network
    train, test : :class:`~dfc.io.Dataset`
        Training and test data
    config : :class:`~dfc.config.RunConfig`, optional
        Run settings, by default the standard ones
    validation : :class:`~dfc.io.Dataset`, optional
        Data used to pick the best fine-tuning epoch, by default ``train``
    log_path : `str`, optional
        Run log of the compression, by default None
    verbose : `bool`, optional
        Whether to show progress, by default False

    Returns
    -------
    result : `dict`
        Accuracies (baseline, realized, fine-tuned), FLOP ratios (soft, pruning only, hard), parameter ratio,
        status and pass count of the compression, and the fine-tuned network under "model"
    """
    config = RunConfig() if config is None else config
    run = compress(model, train, config.train_config(), config.budget_config(), log_path=log_path,
                   config_record=config.values, verbose=verbose)
    compressed, plan, report = realize(model, run.state, shrink=config["shrink"], soft_ratio=run.soft_ratio,
                                       verbose=verbose)
    tuned = finetune(compressed, train, epochs=config["finetune_epochs"], lr=config["finetune_lr"],
                     momentum=config["momentum"], batch_size=config["batch_size"], validation=validation,
                     seed=config["seed"], flip=config["flip"], crop=config["crop"], verbose=verbose)
    return {"baseline_accuracy": evaluate(model, test).accuracy,
            "realized_accuracy": evaluate(compressed, test).accuracy,
            "accuracy": evaluate(tuned, test).accuracy,
            "soft_ratio": run.soft_ratio, "pruned_ratio": report.pruned_ratio,
            "hard_ratio": report.hard_ratio,
            "param_ratio": report.param_ratio, "status": run.status, "passes": run.passes,
            "model": tuned}


def ablation_grid(model, train, test, variations, config=None, validation=None, verbose=False):
    """Run the pipeline once per set of overrides

    Parameters
    ----------
    variations : `list` of `dict`
        Configuration overrides of each run, every dict must have the same keys
    config : :class:`~dfc.config.RunConfig`, optional
        Settings shared by all runs, by default the standard ones

    Returns
    -------
    results : :class:`~astropy.table.Table`
        One row per run, the overridden keys followed by the metrics
    """
    config = RunConfig() if config is None else config
    rows = []
    for overrides in variations:
        run_config = config.copy().update(overrides)
        if verbose:
            print(f"Running with {overrides}")
        result = run_pipeline(model, train, test, run_config, validation=validation, verbose=verbose)
        result.pop("model")
        rows.append({**overrides, **result})
    names = list(variations[0]) + [k for k in rows[0] if k not in variations[0]]
    return Table(rows=[[row[k] for k in names] for row in rows], names=names)


def schedule_ablation(model, train, test, budgets=(0.7, 0.6, 0.5), config=None, validation=None,
                      verbose=False):
    """Scheduled against fixed (``mu = alpha``) mask steepness at several budgets, same seed and data"""
    variations = [{"budget": b, "schedule_on": on} for b in budgets for on in (True, False)]
    return ablation_grid(model, train, test, variations,
                         config=config, validation=validation, verbose=verbose)


def scheme_comparison(model, train, test, budgets=(0.5,), config=None, validation=None, verbose=False):
    """Both matricization schemes at several budgets"""
    return ablation_grid(model, train, test, [{"budget": b, "scheme": s} for b in budgets for s in (1, 2)],
                         config=config, validation=validation, verbose=verbose)


def mode_ablation(model, train, test, budgets=(0.5,), modes=MODES, config=None, validation=None,
                  verbose=False):
    """Joint pruning and decomposition against each of them alone"""
    return ablation_grid(model, train, test, [{"budget": b, "mode": m} for b in budgets for m in modes],
                         config=config, validation=validation, verbose=verbose)
