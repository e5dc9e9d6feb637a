"""Turn a learned selection into a genuinely smaller network"""
from dataclasses import dataclass, field, replace

import numpy as np
from astropy.table import Table

from .linalg import matricize, svd
from .model import LayerKind, ModelGraph, dense_flops, hard_flops, layer_flops, max_rank, param_count
from .surrogate import layer_spec
from .utils import print_warning

__all__ = ["RealizationPlan", "BudgetReport", "binarize_masks", "select_ranks", "prune", "factorize",
           "should_decompose", "plan_selection", "selection_ratio", "realize"]


@dataclass
class RealizationPlan():
    """What survives of every conv/linear layer

    Attributes
    ----------
    keep : `dict`
        Layer id to the sorted indices of the kept filters
    totals : `dict`
        Layer id to the original number of filters
    ranks : `dict`
        Layer id to the selected rank, only for layers with a threshold
    max_ranks : `dict`
        Layer id to the largest feasible rank after pruning
    decompose : `dict`
        Layer id to whether the layer was factorized
    warnings : `list` of `str`
        Events worth surfacing (e.g. a layer that would have lost every filter)
    """
    keep: dict
    totals: dict
    ranks: dict = field(default_factory=dict)
    max_ranks: dict = field(default_factory=dict)
    decompose: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def summary_table(self):
        """Per-layer report as an :class:`~astropy.table.Table` (rank 0 means the layer has no threshold)"""
        ids = list(self.keep)
        return Table({"layer": ids,
                      "kept": [len(self.keep[lid]) for lid in ids],
                      "total": [self.totals[lid] for lid in ids],
                      "rank": [self.ranks.get(lid) or 0 for lid in ids],
                      "max_rank": [self.max_ranks.get(lid, 0) for lid in ids],
                      "decomposed": [bool(self.decompose.get(lid, False)) for lid in ids]})


@dataclass
class BudgetReport():
    """Exact cost of a realized network

    ``pruned_ratio`` is the FLOP ratio after pruning alone, so ``1 - pruned_ratio`` is the share of the
    reduction due to pruning and ``pruned_ratio - hard_ratio`` the share due to decomposition.
    """
    hard_flops: int
    dense_flops: int
    hard_ratio: float
    pruned_ratio: float
    params: int
    dense_params: int
    soft_ratio: float = None
    filters: dict = field(default_factory=dict)
    ranks: dict = field(default_factory=dict)

    @property
    def param_ratio(self):
        return self.params / self.dense_params

    def summary(self):
        """Scalar fields as an ordered dict"""
        out = {"hard_flops": self.hard_flops, "dense_flops": self.dense_flops, "hard_ratio": self.hard_ratio,
               "pruned_ratio": self.pruned_ratio, "params": self.params, "param_ratio": self.param_ratio}
        if self.soft_ratio is not None:
            out["soft_ratio"] = self.soft_ratio
        return out


def binarize_masks(state, warnings=None):
    """Round masks to keep/drop decisions

    A filter is kept iff its mask value is at least 0.5 (equivalently its scheduled sigmoid is at least one
    half). A layer that would lose every filter keeps its largest mask entry instead.

    Parameters
    ----------
    state : :class:`~dfc.surrogate.SelectionState`
        Learned selection
    warnings : `list`, optional
        List to append warnings to, by default they are printed

    Returns
    -------
    binary : `dict`
        Layer id to boolean keep vector
    """
    binary = {}
    for lid, m in state.masks.items():
        keep = np.asarray(m) >= 0.5
        if not np.any(keep):
            keep[int(np.argmax(m))] = True
            message = (f"Every filter of layer '{lid}' would be pruned, keeping filter {int(np.argmax(m))} "
                       f"(mask value {float(np.max(m)):.4g})")
            if warnings is None:
                print_warning(message)
            else:
                warnings.append(message)
        binary[lid] = keep
    return binary


def select_ranks(state, spectra, tau=None):
    """Round soft ranks, computed on the spectra of the pruned weights

    Parameters
    ----------
    state : :class:`~dfc.surrogate.SelectionState`
        Learned selection (thresholds)
    spectra : `dict`
        Layer id to the singular values of the matricized pruned weight
    tau : `dict`, optional
        Layer id to temperature, by default ``state.tau``

    Returns
    -------
    ranks : `dict`
        Layer id to ``max(1, round(sum_i tanh(relu(sigma_i - gamma) tau)))``
    """
    tau = state.tau if tau is None else tau
    ranks = {}
    for lid, gamma in state.thresholds.items():
        s = np.asarray(spectra[lid], dtype=np.float64)
        soft = np.sum(np.tanh(np.maximum(s - gamma, 0.0) * tau[lid]))
        ranks[lid] = max(1, int(np.floor(soft + 0.5)))
    return ranks


def prune(model, plan):
    """Remove filters, and the matching input channels and batchnorm rows downstream

    Parameters
    ----------
    model : :class:`~dfc.model.ModelGraph`
        Unfactorized network
    plan : :class:`RealizationPlan` or `dict`
        Kept filter indices per compute layer (missing layers keep everything)

    Returns
    -------
    pruned : :class:`~dfc.model.ModelGraph`
    """
    keep_map = plan.keep if isinstance(plan, RealizationPlan) else plan
    current = np.arange(model.input_shape[0])
    layers, weights = [], {}
    for layer in model.layers:
        lid = layer.layer_id
        ws = model.weights.get(lid, {})
        if layer.is_compute:
            assert not layer.factorized, "Only dense layers can be pruned"
            keep = np.sort(np.asarray(keep_map.get(lid, np.arange(layer.c_out)), dtype=int))
            if len(keep) == 0 or keep[0] < 0 or keep[-1] >= layer.c_out or len(np.unique(keep)) != len(keep):
                raise ValueError(f"layer '{lid}': invalid kept filters {keep.tolist()} of {layer.c_out}")
            if layer.kind == LayerKind.CONV:
                w = ws["weight"][keep][:, current]
            else:
                # each input channel owns `fan` consecutive features
                columns = (current[:, None] * layer.fan + np.arange(layer.fan)[None, :]).reshape(-1)
                w = ws["weight"][keep][:, columns]
            new = {"weight": w}
            if "bias" in ws:
                new["bias"] = ws["bias"][keep]
            weights[lid] = new
            layers.append(replace(layer, c_in=len(current), c_out=len(keep)))
            current = keep
        else:
            # `current` indexes the original channels of the last compute layer
            if layer.kind == LayerKind.BATCHNORM:
                if current[-1] >= layer.c_out:
                    raise ValueError(f"layer '{lid}': cannot keep channels {current.tolist()} "
                                     f"of {layer.c_out}")
                weights[lid] = {name: w[current] for name, w in ws.items()}
            layers.append(replace(layer, c_in=len(current), c_out=len(current)))
    return ModelGraph(layers, weights, model.input_shape, model.n_classes)


def factorize(weight, rank, scheme=1, shrink_gamma=None):
    """Split a weight into two thinner factors through a truncated SVD

    Parameters
    ----------
    weight : :class:`numpy.ndarray`
        Conv (C_out, C_in, k, k) or linear (C_out, F) weight
    rank : `int`
        Number of singular triplets to keep
    scheme : `int`, optional
        Matricization scheme, by default 1
    shrink_gamma : `float`, optional
        Shrink the kept singular values by this threshold, by default None (plain truncation)

    Returns
    -------
    weight1 : :class:`numpy.ndarray`
        First factor: (r, C_in, k, k) for scheme 1, (r, C_in, k, 1) for scheme 2, (r, F) for linear
    weight2 : :class:`numpy.ndarray`
        Second factor carrying the singular values: (C_out, r, 1, 1), (C_out, r, 1, k) or (C_out, r)
    """
    weight = np.asarray(weight, dtype=np.float64)
    spec = layer_spec(weight.shape, scheme)
    bound = min(spec.matrix_shape)
    if not 1 <= rank <= bound:
        raise ValueError(f"factorize: rank {rank} outside [1, {bound}] for weight of shape {weight.shape}")
    f = svd(matricize(weight, spec))
    U, s, V = f.U[:, :rank], f.s[:rank], f.V[:, :rank]
    if f.rank < rank:
        # the weight has lower numerical rank, the extra triplets are zero
        pad = rank - f.rank
        U = np.hstack([U, np.zeros((U.shape[0], pad))])
        V = np.hstack([V, np.zeros((V.shape[0], pad))])
        s = np.concatenate([s, np.zeros(pad)])
    if shrink_gamma is not None:
        s = np.maximum(s - shrink_gamma, 0.0)
    left = U * s[None, :]
    if not spec.is_conv:
        return V.T.astype(np.float32), left.astype(np.float32)
    o, c, kh, kw = weight.shape
    if spec.scheme == 1:
        return (V.T.reshape(rank, c, kh, kw).astype(np.float32),
                left.reshape(o, rank, 1, 1).astype(np.float32))
    return (V.T.reshape(rank, c, kh)[..., None].astype(np.float32),
            left.reshape(o, kw, rank).transpose(0, 2, 1)[:, :, None, :].astype(np.float32))


def should_decompose(layer, c_in, c_out, rank, scheme=None):
    """Whether factorizing at ``rank`` strictly reduces the FLOPs of a layer with the given widths"""
    return layer_flops(layer, c_in, c_out, rank, scheme) < layer_flops(layer, c_in, c_out)


def plan_selection(model, state, warnings=None):
    """Decide what survives of every layer: kept filters, selected rank and whether to factorize

    Parameters
    ----------
    model : :class:`~dfc.model.ModelGraph`
        Frozen network the selection was learned on
    state : :class:`~dfc.surrogate.SelectionState`
        Learned selection
    warnings : `list`, optional
        List to append warnings to, by default a new one (available as ``plan.warnings``)

    Returns
    -------
    pruned : :class:`~dfc.model.ModelGraph`
        The network with the dropped filters removed, nothing factorized yet
    plan : :class:`RealizationPlan`
        Per-layer decisions
    """
    warnings = [] if warnings is None else warnings
    binary = binarize_masks(state, warnings=warnings)
    plan = RealizationPlan(keep={}, totals={}, warnings=warnings)
    for layer in model.compute_layers():
        lid = layer.layer_id
        plan.totals[lid] = layer.c_out
        plan.keep[lid] = np.flatnonzero(binary[lid]) if lid in binary else np.arange(layer.c_out)

    pruned = prune(model, plan)

    spectra = {lid: svd(matricize(pruned.weights[lid]["weight"],
                                  layer_spec(pruned.weights[lid]["weight"].shape, state.scheme))).s
               for lid in state.thresholds}
    ranks = select_ranks(state, spectra)
    for layer in pruned.compute_layers():
        lid = layer.layer_id
        if lid in ranks:
            bound = max_rank(layer, scheme=state.scheme)
            plan.ranks[lid], plan.max_ranks[lid] = min(ranks[lid], bound), bound
            plan.decompose[lid] = should_decompose(layer, layer.c_in, layer.c_out, plan.ranks[lid],
                                                   state.scheme)
        else:
            plan.decompose[lid] = False
    return pruned, plan


def selection_ratio(model, state):
    """Exact FLOP ratio of the network :func:`realize` would build from a selection

    Nothing is factorized, so this is cheap enough to evaluate at every iteration of the compression loop.
    """
    pruned, plan = plan_selection(model, state)
    ranks = {lid: plan.ranks[lid] for lid, split in plan.decompose.items() if split}
    return hard_flops(pruned, ranks=ranks, baseline=dense_flops(model), scheme=state.scheme)[1]


def realize(model, state, shrink=False, soft_ratio=None, verbose=False):
    """Prune, select ranks and factorize wherever that lowers the FLOP count

    Parameters
    ----------
    model : :class:`~dfc.model.ModelGraph`
        Frozen network the selection was learned on
    state : :class:`~dfc.surrogate.SelectionState`
        Learned selection
    shrink : `bool`, optional
        Shrink the kept singular values by the learned threshold, by default False (plain truncation)
    soft_ratio : `float`, optional
        Final soft FLOP ratio of the selection, copied into the report, by default None
    verbose : `bool`, optional
        Whether to print the warnings of the plan, by default False

    Returns
    -------
    compressed : :class:`~dfc.model.ModelGraph`
        The realized network
    plan : :class:`RealizationPlan`
        Per-layer decisions
    report : :class:`BudgetReport`
        Exact cost of ``compressed`` relative to ``model``
    """
    pruned, plan = plan_selection(model, state)

    layers, weights = [], {lid: dict(ws) for lid, ws in pruned.weights.items()}
    for layer in pruned.layers:
        lid = layer.layer_id
        if plan.decompose.get(lid, False):
            rank = plan.ranks[lid]
            w1, w2 = factorize(weights[lid].pop("weight"), rank, scheme=state.scheme,
                               shrink_gamma=state.thresholds[lid] if shrink else None)
            weights[lid].update(weight1=w1, weight2=w2)
            layer = replace(layer, rank=rank, scheme=state.scheme if layer.kind == LayerKind.CONV else 1)
        layers.append(layer)
    compressed = ModelGraph(layers, weights, model.input_shape, model.n_classes)

    dense = dense_flops(model)
    flops, ratio = hard_flops(compressed, baseline=dense)
    report = BudgetReport(hard_flops=flops, dense_flops=dense, hard_ratio=ratio,
                          pruned_ratio=hard_flops(pruned, baseline=dense)[1],
                          params=param_count(compressed), dense_params=param_count(model),
                          soft_ratio=soft_ratio,
                          filters={lid: (len(plan.keep[lid]), plan.totals[lid]) for lid in plan.keep},
                          ranks={lid: (plan.ranks[lid], plan.max_ranks[lid]) for lid in plan.ranks})
    if verbose:
        for message in plan.warnings:
            print_warning(message)
    return compressed, plan, report
