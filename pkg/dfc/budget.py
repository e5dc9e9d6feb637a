"""Differentiable filter counts, soft ranks, the FLOP-ratio budget and its penalty"""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import LayerKind
from .surrogate import scheduled_sigmoid, masked_spectrum

__all__ = ["BudgetConfig", "SoftCounts", "soft_filter_counts", "soft_ranks", "flop_ratio", "penalty",
           "straight_through_ratio", "soft_counts"]


@dataclass
class BudgetConfig():
    """Settings of the FLOP budget

    Attributes
    ----------
    budget : `float`
        Target FLOP ratio in (0, 1]
    lam : `float`
        Weight of the budget penalty (0 disables it)
    tau_c : `float`
        Soft-rank temperature constant, each layer uses ``tau_c / sigma_1``
    scheduled_counts : `bool`
        Count filters with the scheduled sigmoid instead of the plain one
    straight_through : `bool`
        Penalize the exact FLOP ratio of the realized selection, with the gradient of the soft ratio
    """
    budget: float = 0.5
    lam: float = 1.0
    tau_c: float = 2.0
    scheduled_counts: bool = False
    straight_through: bool = True

    def __post_init__(self):
        if not 0 < self.budget <= 1:
            raise ValueError(f"The FLOP budget must lie in (0, 1], got {self.budget}")
        if self.lam < 0:
            raise ValueError(f"The penalty weight must be non-negative, got {self.lam}")
        if self.tau_c <= 0:
            raise ValueError(f"tau_c must be positive, got {self.tau_c}")


@dataclass
class SoftCounts():
    """Per-layer soft filter counts and soft ranks (scalar :class:`~dfc.tensor.Tensor` objects)

    Layers absent from ``filters`` keep all of their filters, layers absent from ``ranks`` are counted dense.
    ``spectra`` holds the singular values the soft ranks were computed from, when known.
    """
    filters: dict
    ranks: dict
    spectra: dict = field(default_factory=dict)

    def values(self):
        """Plain floats of every count, as two dicts"""
        return ({lid: c.item() for lid, c in self.filters.items()},
                {lid: r.item() for lid, r in self.ranks.items()})


def _as_tensor(x):
    return x if isinstance(x, T.Tensor) else T.Tensor(x, dtype=np.float64)


def soft_filter_counts(masks, mu=None):
    """Differentiable number of kept filters per layer, the sum of the sigmoid of each mask

    Parameters
    ----------
    masks : `dict`
        Layer id to mask vector (:class:`~dfc.tensor.Tensor` or array)
    mu : `float`, optional
        Count with the scheduled sigmoid at this steepness, by default None (plain sigmoid)

    Returns
    -------
    counts : `dict`
        Layer id to a scalar :class:`~dfc.tensor.Tensor`
    """
    counts = {}
    for lid, m in masks.items():
        m = _as_tensor(m)
        gate = T.sigmoid(m) if mu is None else scheduled_sigmoid(m, mu)
        counts[lid] = T.reduce_sum(gate)
    return counts


def soft_ranks(thresholds, spectra, tau):
    """Differentiable rank per layer, ``sum_i tanh(relu(sigma_i - gamma) * tau)``

    Parameters
    ----------
    thresholds : `dict`
        Layer id to threshold (:class:`~dfc.tensor.Tensor` or float)
    spectra : `dict`
        Layer id to singular values (:class:`~dfc.tensor.Tensor` or array)
    tau : `dict`
        Layer id to a positive temperature

    Returns
    -------
    ranks : `dict`
        Layer id to a scalar :class:`~dfc.tensor.Tensor`
    """
    ranks = {}
    for lid, gamma in thresholds.items():
        if tau[lid] <= 0:
            raise ValueError(f"layer '{lid}': tau must be positive, got {tau[lid]}")
        s = _as_tensor(spectra[lid])
        gamma = _as_tensor(gamma)
        ranks[lid] = T.reduce_sum(T.tanh(T.scale(T.relu(s - T.reshape(gamma, (1,))), tau[lid])))
    return ranks


def flop_ratio(geometry, counts, baseline=None, scheme=1):
    """Differentiable ratio of the compressed to the dense FLOP count

    Parameters
    ----------
    geometry : `list` of :class:`~dfc.model.LayerGeometry`
        Layers of the network (non-compute layers are ignored); the input channel count of the first one is
        a constant
    counts : :class:`SoftCounts`
        Soft filter counts and ranks
    baseline : `float`, optional
        Dense FLOP count, by default computed from ``geometry``
    scheme : `int`, optional
        Matricization scheme of the factorized layers, by default 1

    Returns
    -------
    ratio : :class:`~dfc.tensor.Tensor`
        Scalar ratio (float64)
    """
    layers = [layer for layer in geometry if layer.is_compute]
    if baseline is None:
        baseline = sum(layer.area * layer.fan * layer.c_in * layer.c_out for layer in layers)
    total = None
    previous = T.Tensor(float(layers[0].c_in), dtype=np.float64)
    for layer in layers:
        lid = layer.layer_id
        c_out = (T.astype(counts.filters[lid], np.float64) if lid in counts.filters
                 else T.Tensor(float(layer.c_out), dtype=np.float64))
        if lid not in counts.ranks:
            term = T.scale(previous * c_out, layer.area * layer.fan)
        else:
            rank = T.astype(counts.ranks[lid], np.float64)
            if layer.kind == LayerKind.CONV and scheme == 2:
                term = T.scale(rank * (previous + c_out), layer.area * layer.kernel)
            else:
                term = T.scale(rank * (T.scale(previous, layer.fan) + c_out), layer.area)
        total = term if total is None else total + term
        previous = c_out
    return T.scale(total, 1.0 / baseline)


def penalty(ratio, cfg):
    """Budget penalty ``lam * (ratio - budget)**2``

    Parameters
    ----------
    ratio : :class:`~dfc.tensor.Tensor` or `float`
        Current FLOP ratio
    cfg : :class:`BudgetConfig`
        Budget settings

    Returns
    -------
    penalty : :class:`~dfc.tensor.Tensor` or `float`
        Same type as ``ratio``
    """
    if isinstance(ratio, T.Tensor):
        return T.scale(T.square(T.shift(ratio, -cfg.budget)), cfg.lam)
    return cfg.lam * (ratio - cfg.budget) ** 2


def straight_through_ratio(ratio, exact):
    """A ratio whose value is ``exact`` and whose gradient is that of the soft ``ratio``

    Parameters
    ----------
    ratio : :class:`~dfc.tensor.Tensor`
        Differentiable soft FLOP ratio
    exact : `float`
        FLOP ratio of the binarized selection, e.g. from :func:`~dfc.realize.selection_ratio`

    Returns
    -------
    ratio : :class:`~dfc.tensor.Tensor`
        ``ratio`` shifted by the constant ``exact - ratio``
    """
    return T.shift(ratio, float(exact) - ratio.item())


def soft_counts(model, state, bcfg, masks=None, thresholds=None, weights=None):
    """Soft counts of a network under a selection state

    Soft ranks are taken on the spectrum of each masked weight, which is differentiable with respect to the
    masks.

    Parameters
    ----------
    model : :class:`~dfc.model.ModelGraph`
        Frozen network
    state : :class:`~dfc.surrogate.SelectionState`
        Current selection
    bcfg : :class:`BudgetConfig`
        Budget settings
    masks, thresholds : `dict`, optional
        Tensors to use for the masks/thresholds (e.g. trainable leaves), by default constants from ``state``
    weights : `dict`, optional
        Layer id to frozen weight :class:`~dfc.tensor.Tensor`, by default wrapped from ``model``

    Returns
    -------
    counts : :class:`SoftCounts`
    """
    mu = state.schedule()
    masks = {lid: T.Tensor(m) for lid, m in state.masks.items()} if masks is None else masks
    thresholds = ({lid: T.Tensor(g) for lid, g in state.thresholds.items()} if thresholds is None
                  else thresholds)
    if weights is None:
        weights = {lid: T.Tensor(model.weights[lid]["weight"]) for lid in state.thresholds}
    filters = soft_filter_counts(masks, mu if bcfg.scheduled_counts else None)
    spectra = {lid: masked_spectrum(weights[lid], masks.get(lid), mu, scheme=state.scheme)
               for lid in thresholds}
    return SoftCounts(filters, soft_ranks(thresholds, spectra, state.tau), spectra)
