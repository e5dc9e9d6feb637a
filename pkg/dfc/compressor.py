"""Learning filter masks and rank thresholds over a frozen network, fine-tuning and evaluation"""
from dataclasses import dataclass, field, asdict
import time

import numpy as np
from astropy.table import Table
from tqdm import tqdm

from . import tensor as T
from .budget import BudgetConfig, soft_counts, flop_ratio, penalty, straight_through_ratio
from .model import dense_flops, forward, TRAINABLE_NAMES
from .realize import binarize_masks, selection_ratio
from .surrogate import MODES, SelectionState, SteepnessSchedule, h_df
from .utils import format_record, print_warning, print_success, weights_digest

__all__ = ["TrainLoopConfig", "CompressionRun", "Evaluation", "DivergenceError", "SGD", "Adam", "compress",
           "finetune", "train_baseline", "evaluate", "current_ratios", "settle_masks", "OPTIMIZERS"]

OPTIMIZERS = ("adam", "sgd")


class DivergenceError(RuntimeError):
    def __init__(self, message, checkpoint=None, iteration=None):
        """Raised when a loss stops being finite

        Parameters
        ----------
        message : `str`
            Diagnostics
        checkpoint : optional
            Last state whose loss was finite (a :class:`~dfc.surrogate.SelectionState` or a
            :class:`~dfc.model.ModelGraph`), by default None
        iteration : `int`, optional
            Iteration at which the loss diverged, by default None
        """
        super().__init__(message)
        self.checkpoint = checkpoint
        self.iteration = iteration


@dataclass
class TrainLoopConfig():
    """Settings of the compression loop

    Attributes
    ----------
    epochs : `int`
        Epochs per pass of the outer loop
    batch_size : `int`
        Minibatch size
    tolerance : `float`
        The loop stops once the penalized FLOP ratio is within this distance of the budget
    hard_tolerance : `float`
        It also waits for the exact ratio of the realized selection to be within this distance
    optimizer : `str`
        "adam" or "sgd", for the masks and thresholds
    lr : `float`
        Learning rate of the masks
    threshold_lr : `float`
        Learning rate of the thresholds, multiplied by the largest singular value of each layer
    momentum : `float`
        SGD momentum, or the first-moment decay of Adam
    seed : `int`
        Seed of the minibatch order and augmentation
    max_restarts : `int`
        Passes of the outer loop allowed after the first one
    settle : `bool`
        Move every mask to exactly 0 or 1, following its keep decision, once the loop ends
    mu0, alpha, beta : `float`
        Steepness schedule of the masks
    schedule_on : `bool`
        Whether the steepness is scheduled (otherwise it is fixed at ``alpha``)
    scheme : `int`
        Matricization scheme (1 or 2)
    mode : `str`
        "hybrid", "prune" or "lowrank"
    svd_gradient : `str`
        "full" differentiates through singular vectors and values, "sigma" through the values only
    checked : `bool`
        Reject non-finite tensors and near-degenerate spectra
    flip : `bool`
        Random horizontal flips
    crop : `int`
        Padding of random crops (0 disables them)
    """
    epochs: int = 1
    batch_size: int = 128
    tolerance: float = 0.02
    hard_tolerance: float = 0.05
    optimizer: str = "adam"
    lr: float = 0.1
    threshold_lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    max_restarts: int = 15
    settle: bool = True
    mu0: float = 5.0
    alpha: float = 50.0
    beta: float = 4.0
    schedule_on: bool = True
    scheme: int = 1
    mode: str = "hybrid"
    svd_gradient: str = "full"
    checked: bool = False
    flip: bool = False
    crop: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"epochs and batch_size must be at least 1, got {self.epochs} and "
                             f"{self.batch_size}")
        if self.tolerance <= 0 or self.hard_tolerance <= 0:
            raise ValueError(f"tolerances must be positive, got {self.tolerance} and {self.hard_tolerance}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got '{self.optimizer}'")
        if self.lr < 0 or self.threshold_lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("Learning rates must be non-negative and momentum in [0, 1)")
        if self.max_restarts < 0:
            raise ValueError(f"max_restarts must be non-negative, got {self.max_restarts}")
        if self.scheme not in (1, 2):
            raise ValueError(f"scheme must be 1 or 2, got {self.scheme}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.svd_gradient not in ("full", "sigma"):
            raise ValueError(f"svd_gradient must be 'full' or 'sigma', got '{self.svd_gradient}'")


@dataclass
class CompressionRun():
    """Outcome of :func:`compress`

    Attributes
    ----------
    state : :class:`~dfc.surrogate.SelectionState`
        Learned selection
    log : `list` of `dict`
        One record per iteration (iteration, epoch, loss, task_loss, penalty, flop_ratio, mu, wall_ms)
    status : `str`
        "converged" if both ratios ended within tolerance of the budget, "restart_cap" otherwise
    passes : `int`
        Passes of the outer loop that were run
    best_pass : `int`
        Pass after which ``state`` was taken (0 is the initial selection); on ``restart_cap`` this is
        the pass that came closest to the budget
    soft_ratio, hard_ratio : `float`
        Final penalized FLOP ratio and the exact ratio of the realized selection
    digest : `str`
        Hash of the frozen weights (identical before and after the run)
    """
    state: SelectionState
    log: list = field(default_factory=list)
    status: str = "converged"
    passes: int = 0
    best_pass: int = 0
    soft_ratio: float = None
    hard_ratio: float = None
    digest: str = None

    def log_table(self):
        """The per-iteration log as an :class:`~astropy.table.Table`"""
        names = ("iteration", "epoch", "loss", "task_loss", "penalty", "flop_ratio", "mu", "wall_ms")
        return Table({name: [record[name] for record in self.log] for name in names})


@dataclass
class Evaluation():
    """Classification accuracy with per-class counts

    Attributes
    ----------
    accuracy : `float`
        Fraction of correct predictions
    correct, total : :class:`numpy.ndarray`
        Per-class number of correct predictions and of samples
    confusion : :class:`numpy.ndarray`
        Confusion matrix, rows are true classes and columns predictions
    """
    accuracy: float
    correct: np.ndarray
    total: np.ndarray
    confusion: np.ndarray

    def per_class_table(self):
        return Table({"class": np.arange(len(self.total)), "correct": self.correct, "total": self.total,
                      "accuracy": self.correct / np.maximum(self.total, 1)})


class SGD():
    def __init__(self, lr, momentum=0.9):
        """Stochastic gradient descent with heavy-ball momentum (``v = momentum v + g; p -= lr v``)

        Parameters
        ----------
        lr : `float`
            Default learning rate
        momentum : `float`, optional
            Momentum factor, by default 0.9
        """
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, key, param, grad, lr=None):
        """Return the updated value of parameter ``key``"""
        lr = self.lr if lr is None else lr
        v = self.velocity.get(key)
        v = np.array(grad, dtype=np.float64) if v is None else self.momentum * v + grad
        self.velocity[key] = v
        return (param - lr * v).astype(np.asarray(param).dtype)


class Adam():
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        """Adam with bias-corrected first and second moment estimates

        Each step moves a parameter by about ``lr``, whatever the scale of its gradient.

        Parameters
        ----------
        lr : `float`
            Default learning rate
        beta1, beta2 : `float`, optional
            Decay of the moment estimates, by default 0.9 and 0.999
        eps : `float`, optional
            Added to the root of the second moment, by default 1e-8
        """
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.moments = {}

    def step(self, key, param, grad, lr=None):
        """Return the updated value of parameter ``key``"""
        lr = self.lr if lr is None else lr
        grad = np.asarray(grad, dtype=np.float64)
        m, v, t = self.moments.get(key, (np.zeros_like(grad), np.zeros_like(grad), 0))
        t += 1
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad ** 2
        self.moments[key] = (m, v, t)
        update = (m / (1 - self.beta1 ** t)) / (np.sqrt(v / (1 - self.beta2 ** t)) + self.eps)
        return (param - lr * update).astype(np.asarray(param).dtype)


def _batches(data, batch_size, rng=None, flip=False, crop=0):
    if isinstance(data, tuple):
        x, y = data
        order = np.arange(len(y)) if rng is None else rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            yield np.asarray(x)[idx], np.asarray(y)[idx]
    else:
        yield from data.batches(batch_size, rng=rng, flip=flip, crop=crop)


def _n_classes(data, model):
    return model.n_classes if isinstance(data, tuple) else data.n_classes


def evaluate(model, data, batch_size=256):
    """Accuracy of a network

    Parameters
    ----------
    model : :class:`~dfc.model.ModelGraph`
        Network to evaluate
    data : :class:`~dfc.io.Dataset` or `tuple`
        Dataset, or an (inputs, labels) pair of arrays
    batch_size : `int`, optional
        Samples per forward pass, by default 256

    Returns
    -------
    evaluation : :class:`Evaluation`
        Accuracy, per-class counts and confusion matrix; ties between logits go to the lowest class
    """
    k = max(model.n_classes, _n_classes(data, model))
    confusion = np.zeros((k, k), dtype=np.int64)
    for x, y in _batches(data, batch_size):
        predictions = np.argmax(forward(model, x).data, axis=1)
        np.add.at(confusion, (y, predictions), 1)
    total = confusion.sum(axis=1)
    n = int(total.sum())
    return Evaluation(accuracy=float(np.trace(confusion)) / n if n > 0 else 0.0,
                      correct=np.diag(confusion).copy(),
                      total=total, confusion=confusion)


def current_ratios(model, state, bcfg):
    """FLOP ratio seen by the budget penalty and the exact ratio of the realized selection

    With ``bcfg.straight_through`` the penalty sees the exact ratio, so both values are equal.
    """
    hard = selection_ratio(model, state)
    if bcfg.straight_through:
        return hard, hard
    counts = soft_counts(model, state, bcfg)
    soft = flop_ratio(model.layers, counts, baseline=dense_flops(model), scheme=state.scheme).item()
    return soft, hard


def settle_masks(state):
    """Move every mask to 1 for a kept filter and to 0 for a dropped one, in place

    The keep decisions of :func:`~dfc.realize.binarize_masks` are unchanged, the gates become saturated.
    """
    for lid, keep in binarize_masks(state, warnings=[]).items():
        state.masks[lid] = keep.astype(state.masks[lid].dtype)
    return state


def _distance(soft, hard, budget):
    return max(abs(soft - budget), abs(hard - budget))


def compress(model, dataset, cfg=None, bcfg=None, log_path=None, config_record=None, verbose=False):
    """Learn which filters to prune and which ranks to keep under a FLOP budget

    The frozen weights are never modified. Every iteration builds masked and thresholded surrogate weights
    for the compressible layers, minimises cross-entropy plus the budget penalty with respect to the masks and
    thresholds only, and advances the steepness schedule. Passes of ``cfg.epochs`` epochs are repeated, from
    the current selection, while the penalized FLOP ratio is further than ``cfg.tolerance`` from the budget
    or the exact ratio of the realized selection further than ``cfg.hard_tolerance``. When the pass limit is
    hit, the selection that came closest to the budget is returned.

    Parameters
    ----------
    model : :class:`~dfc.model.ModelGraph`
        Pretrained, unfactorized network
    dataset : :class:`~dfc.io.Dataset`
        Training data
    cfg : :class:`TrainLoopConfig`, optional
        Loop settings, by default the standard ones
    bcfg : :class:`~dfc.budget.BudgetConfig`, optional
        Budget settings, by default the standard ones
    log_path : `str`, optional
        File to append line records to, by default None
    config_record : `dict`, optional
        Fields of the ``config`` record of the log, by default those of ``cfg`` and ``bcfg``
    verbose : `bool`, optional
        Whether to show progress, by default False

    Returns
    -------
    run : :class:`CompressionRun`
        Learned selection and log
    """
    cfg = TrainLoopConfig() if cfg is None else cfg
    bcfg = BudgetConfig() if bcfg is None else bcfg
    if len(dataset) == 0:
        raise ValueError("Cannot compress with an empty dataset")
    for lid, ws in model.weights.items():
        for name, w in ws.items():
            if not np.all(np.isfinite(w)):
                raise ValueError(f"layer '{lid}': weight '{name}' contains non-finite values")

    digest = weights_digest(model.weights)
    schedule = SteepnessSchedule(cfg.mu0, cfg.alpha, cfg.beta, enabled=cfg.schedule_on)
    state = SelectionState.initial(model, scheme=cfg.scheme, mode=cfg.mode, schedule=schedule,
                                   tau_c=bcfg.tau_c)
    frozen = model.as_tensors()
    weights = {layer.layer_id: frozen[layer.layer_id]["weight"] for layer in model.compute_layers()}
    surrogate_layers = [lid for lid in weights if lid in state.masks or lid in state.thresholds]
    baseline = dense_flops(model)
    rng = np.random.default_rng(cfg.seed)
    optimizer = SGD(cfg.lr, cfg.momentum) if cfg.optimizer == "sgd" else Adam(cfg.lr, beta1=cfg.momentum)
    run = CompressionRun(state=state, digest=digest)

    log = open(log_path, "a") if log_path is not None else None

    def emit(tag, **fields):
        if log is not None:
            log.write(format_record(tag, **fields) + "\n")
            log.flush()

    emit("config", **(config_record if config_record is not None else {**asdict(cfg), **asdict(bcfg)}))
    try:
        with T.checked_mode(cfg.checked):
            soft, hard = current_ratios(model, state, bcfg)
            emit("check", **{"pass": 0, "soft_ratio": soft, "hard_ratio": hard})
            # (distance, pass, state, soft, hard) of the selection closest to the budget
            best = (_distance(soft, hard, bcfg.budget), 0, state.copy(), soft, hard)
            last_good = state.copy()
            while abs(soft - bcfg.budget) >= cfg.tolerance or abs(hard - bcfg.budget) > cfg.hard_tolerance:
                if run.passes > cfg.max_restarts:
                    run.status = "restart_cap"
                    _, run.best_pass, run.state, soft, hard = best
                    emit("best", **{"pass": run.best_pass, "soft_ratio": soft, "hard_ratio": hard})
                    if verbose:
                        print_warning(f"FLOP ratio still outside {bcfg.budget} +/- {cfg.tolerance} after "
                                      f"{run.passes} passes, keeping the selection of pass {run.best_pass} "
                                      f"(soft {soft:.4f}, hard {hard:.4f})")
                    break
                run.passes += 1
                for epoch in range(cfg.epochs):
                    batches = dataset.batches(cfg.batch_size, rng=rng, flip=cfg.flip, crop=cfg.crop)
                    if verbose:
                        batches = tqdm(batches, total=-(-len(dataset) // cfg.batch_size),
                                       desc=f"pass {run.passes} epoch {epoch}")
                    for x, y in batches:
                        record = _compress_step(model, state, bcfg, cfg, frozen, weights, surrogate_layers,
                                                baseline, optimizer, x, y, last_good, len(run.log))
                        record["epoch"] = epoch
                        run.log.append(record)
                        emit("iter", **record)
                        last_good = state.copy()
                soft, hard = current_ratios(model, state, bcfg)
                run.best_pass = run.passes
                emit("check", **{"pass": run.passes, "soft_ratio": soft, "hard_ratio": hard})
                # ties go to the later pass
                if _distance(soft, hard, bcfg.budget) <= best[0]:
                    best = (_distance(soft, hard, bcfg.budget), run.passes, state.copy(), soft, hard)
            if cfg.settle:
                settle_masks(run.state)
                soft, hard = current_ratios(model, run.state, bcfg)
            emit("status", value=run.status)
    finally:
        if log is not None:
            log.close()

    if weights_digest(model.weights) != digest:
        raise RuntimeError("The frozen weights were modified during compression")
    run.soft_ratio, run.hard_ratio = soft, hard
    if verbose:
        print_success(f"Compression {run.status}: soft ratio {soft:.4f}, hard ratio {hard:.4f}, "
                      f"{len(run.log)} iterations")
    return run


def _compress_step(model, state, bcfg, cfg, frozen, weights, surrogate_layers, baseline, optimizer, x, y,
                   last_good, iteration):
    start = time.perf_counter()
    mu = state.schedule()
    exact = selection_ratio(model, state) if bcfg.straight_through else None
    with T.Tape() as tape:
        masks = {lid: T.Tensor(m, trainable=True, name=f"mask/{lid}") for lid, m in state.masks.items()}
        thresholds = {lid: T.Tensor(g, trainable=True, name=f"threshold/{lid}")
                      for lid, g in state.thresholds.items()}
        override = {lid: h_df(weights[lid], masks.get(lid), thresholds.get(lid), mu, scheme=state.scheme,
                              sigma_only=cfg.svd_gradient == "sigma")
                    for lid in surrogate_layers}
        logits = forward(model, x, weight_override=override, tensors=frozen)
        task = T.softmax_cross_entropy(logits, y)
        counts = soft_counts(model, state, bcfg, masks=masks, thresholds=thresholds, weights=weights)
        ratio = flop_ratio(model.layers, counts, baseline=baseline, scheme=state.scheme)
        if exact is not None:
            ratio = straight_through_ratio(ratio, exact)
        pen = penalty(ratio, bcfg)
        loss = T.astype(task, np.float64) + pen

    if not np.isfinite(loss.item()):
        raise DivergenceError(f"Loss became {loss.item()} at iteration {iteration} (task loss {task.item()}, "
                              f"FLOP ratio {ratio.item()}, mu {mu})",
                              checkpoint=last_good, iteration=iteration)
    grads = T.backward(tape, loss)

    for lid, m in masks.items():
        state.masks[lid] = optimizer.step(("mask", lid), state.masks[lid], grads[m].data)
    for lid, g in thresholds.items():
        lr = cfg.threshold_lr * state.sigma_max[lid]
        gamma = float(optimizer.step(("threshold", lid), state.thresholds[lid], grads[g].data, lr=lr))
        spectrum = counts.spectra[lid].data
        top = float(spectrum[0]) if len(spectrum) > 0 else 0.0
        state.thresholds[lid] = min(max(gamma, 0.0), 0.999 * top)
    state.schedule.step()

    return {"iteration": iteration, "epoch": 0, "loss": loss.item(), "task_loss": task.item(),
            "penalty": pen.item(), "flop_ratio": ratio.item(), "mu": mu,
            "wall_ms": (time.perf_counter() - start) * 1000}


def _train(model, dataset, epochs, lr, momentum, batch_size, validation, seed, flip, crop, verbose, desc):
    model = model.copy()
    if epochs == 0:
        return model
    validation = dataset if validation is None else validation
    best, best_accuracy = model.copy(), evaluate(model, validation).accuracy
    rng = np.random.default_rng(seed)
    optimizer = SGD(lr, momentum)
    iteration = 0
    for epoch in range(epochs):
        batches = _batches(dataset, batch_size, rng=rng, flip=flip, crop=crop)
        if verbose:
            batches = tqdm(batches, desc=f"{desc} epoch {epoch}")
        for x, y in batches:
            with T.Tape() as tape:
                tensors = model.as_tensors(trainable=True)
                loss = T.softmax_cross_entropy(forward(model, x, tensors=tensors), y)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"{desc}: loss became {loss.item()} at epoch {epoch}, "
                                      f"iteration {iteration} (learning rate {lr})",
                                      checkpoint=best, iteration=iteration)
            grads = T.backward(tape, loss)
            for lid, ts in tensors.items():
                for name, t in ts.items():
                    if t in grads and name in TRAINABLE_NAMES:
                        model.weights[lid][name] = optimizer.step((lid, name), model.weights[lid][name],
                                                                  grads[t].data)
            iteration += 1
        accuracy = evaluate(model, validation).accuracy
        if verbose:
            print(f"{desc} epoch {epoch}: validation accuracy {accuracy:.4f}")
        if accuracy > best_accuracy:
            best, best_accuracy = model.copy(), accuracy
    return best


def finetune(model, dataset, epochs=100, lr=0.001, momentum=0.9, batch_size=128, validation=None, seed=0,
             flip=False, crop=0, verbose=False):
    """Train every remaining weight of a realized network

    Parameters
    ----------
    model : :class:`~dfc.model.ModelGraph`
        Realized network
    dataset : :class:`~dfc.io.Dataset` or `tuple`
        Training data
    epochs : `int`, optional
        Number of epochs, by default 100
    lr : `float`, optional
        Learning rate, by default 0.001
    momentum : `float`, optional
        SGD momentum, by default 0.9
    batch_size : `int`, optional
        Minibatch size, by default 128
    validation : :class:`~dfc.io.Dataset` or `tuple`, optional
        Data used to pick the best epoch, by default the training data
    seed : `int`, optional
        Seed of the minibatch order, by default 0
    flip, crop : optional
        Augmentation toggles, see :meth:`~dfc.io.Dataset.batches`
    verbose : `bool`, optional
        Whether to show progress, by default False

    Returns
    -------
    best : :class:`~dfc.model.ModelGraph`
        Snapshot with the highest validation accuracy, the input network included
    """
    return _train(model, dataset, epochs, lr, momentum, batch_size, validation, seed, flip, crop, verbose,
                  "finetune")


def train_baseline(model, dataset, epochs=10, lr=0.01, momentum=0.9, batch_size=128, validation=None, seed=0,
                   flip=False, crop=0, verbose=False):
    """Train a network from its initialisation, same as :func:`finetune` with the baseline learning rate"""
    return _train(model, dataset, epochs, lr, momentum, batch_size, validation, seed, flip, crop, verbose,
                  "baseline")
