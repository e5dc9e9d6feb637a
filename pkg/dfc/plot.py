import matplotlib.pyplot as plt
import numpy as np


__all__ = ["plot_run_log", "plot_plan"]


def plot_run_log(log, budget=None, fig=None, ax=None, show=True, title=None, save_path=None):
    """Plot the FLOP ratio and the loss of a compression run against the iteration

    Parameters
    ----------
    log : :class:`~astropy.table.Table`
        Per-iteration records with at least the columns iteration, loss and flop_ratio (see
        :func:`~dfc.io.run_log_table` and :meth:`~dfc.compressor.CompressionRun.log_table`)
    budget : `float`, optional
        Target FLOP ratio, drawn as a horizontal line if provided, by default None
    fig : :class:`~matplotlib.pyplot.Figure`, optional
        Figure on which to plot, if either `fig` or `ax` is None then new ones are created, by default None
    ax : :class:`~matplotlib.pyplot.AxesSubplot`, optional
        Axis on which to plot, if either `fig` or `ax` is None then new ones are created, by default None
    show : bool, optional
        Whether to show the plot, by default True
    title : `str`, optional
        A title for the plot, by default None
    save_path : `str`, optional
        Where to save the plot, if None then plot is not saved, by default None

    Returns
    -------
    fig, ax : :class:`~matplotlib.pyplot.Figure`, :class:`~matplotlib.pyplot.AxesSubplot`
        Figure and axis of the FLOP ratio (the loss is on a twin axis)
    """
    if fig is None or ax is None:
        fig, ax = plt.subplots(figsize=(10, 5))
    ax.set_title(title)

    ax.plot(log["iteration"], log["flop_ratio"], color="black", linewidth=1.25, label="FLOP ratio")
    if budget is not None:
        ax.axhline(budget, color="tab:red", linestyle="--", label=f"Budget ({budget:1.2f})")
    ax.set_xlabel("Iteration")
    ax.set_ylabel("FLOP ratio")
    ax.legend(loc="upper right")

    # loss on its own scale
    loss_ax = ax.twinx()
    loss_ax.plot(log["iteration"], log["loss"], color="tab:blue", alpha=0.6)
    loss_ax.set_ylabel("Loss", color="tab:blue")

    if save_path is not None:
        plt.savefig(save_path, format='png', bbox_inches="tight")
    if show:
        plt.show()

    return fig, ax


def plot_plan(plan, fig=None, ax=None, show=True, title=None, save_path=None):
    """Plot the fraction of filters and of the maximum rank kept in every layer

    Parameters
    ----------
    plan : :class:`~dfc.realize.RealizationPlan`
        Per-layer decisions of a realization
    fig : :class:`~matplotlib.pyplot.Figure`, optional
        Figure on which to plot, if either `fig` or `ax` is None then new ones are created, by default None
    ax : :class:`~matplotlib.pyplot.AxesSubplot`, optional
        Axis on which to plot, if either `fig` or `ax` is None then new ones are created, by default None
    show : bool, optional
        Whether to show the plot, by default True
    title : `str`, optional
        A title for the plot, by default None
    save_path : `str`, optional
        Where to save the plot, if None then plot is not saved, by default None

    Returns
    -------
    fig, ax : :class:`~matplotlib.pyplot.Figure`, :class:`~matplotlib.pyplot.AxesSubplot`
        Figure and axis on which the plan has been plotted
    """
    if fig is None or ax is None:
        fig, ax = plt.subplots(figsize=(10, 5))
    ax.set_title(title)

    layers = list(plan.totals)
    x = np.arange(len(layers))
    filters = [len(plan.keep[lid]) / plan.totals[lid] for lid in layers]
    ranks = [plan.ranks[lid] / plan.max_ranks[lid] if lid in plan.ranks else np.nan for lid in layers]

    ax.bar(x - 0.2, filters, width=0.4, color="tab:orange", label="Filters kept")
    ax.bar(x + 0.2, ranks, width=0.4, color="tab:purple", label="Rank kept")
    for i, lid in enumerate(layers):
        if plan.decompose.get(lid, False):
            ax.annotate("factorized", (x[i] + 0.2, ranks[i]), ha="center", va="bottom", fontsize="x-small")

    ax.set_xticks(x)
    ax.set_xticklabels(layers)
    ax.set_ylim(0, 1.1)
    ax.set_ylabel("Fraction kept")
    ax.legend()

    if save_path is not None:
        plt.savefig(save_path, format='png', bbox_inches="tight")
    if show:
        plt.show()

    return fig, ax
