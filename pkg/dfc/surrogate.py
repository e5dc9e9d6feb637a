"""The differentiable surrogate: scheduled-sigmoid filter masks composed with singular value thresholding"""
from dataclasses import dataclass, field
import math

import numpy as np
from scipy.special import expit

from . import tensor as T
from .linalg import MatricizationSpec, matricize, dematricize, svd, svt_node, singular_values_node

__all__ = ["SteepnessSchedule", "SelectionState", "MODES", "scheduled_sigmoid", "apply_dml_s", "apply_dtl_s",
           "h_df", "masked_spectrum", "layer_spec"]

MODES = ("hybrid", "prune", "lowrank")


class SteepnessSchedule():
    def __init__(self, mu0=5.0, alpha=50.0, beta=4.0, enabled=True):
        """Steepness of the mask sigmoid, growing linearly with the iteration count up to a cap

        ``mu_i = min(alpha, mu0 + i * beta)``, or the constant ``alpha`` when the schedule is disabled.

        Parameters
        ----------
        mu0 : `float`, optional
            Initial steepness, by default 5
        alpha : `float`, optional
            Maximum steepness, by default 50
        beta : `float`, optional
            Increment per iteration, by default 4
        enabled : `bool`, optional
            Whether to schedule at all, by default True
        """
        if mu0 <= 0 or alpha < mu0:
            raise ValueError(f"Steepness schedule needs 0 < mu0 <= alpha, got mu0={mu0}, alpha={alpha}")
        if beta <= 0 and alpha > mu0:
            raise ValueError(f"Steepness increment beta must be positive, got {beta}")
        self.mu0 = mu0
        self.alpha = alpha
        self.beta = beta
        self.enabled = enabled
        self.iteration = 0

    def __repr__(self):
        return (f"<{self.__class__.__name__}: mu0={self.mu0}, alpha={self.alpha}, beta={self.beta}, "
                f"{'enabled' if self.enabled else 'disabled'}, iteration {self.iteration}>")

    def __call__(self):
        return self.mu_at(self.iteration)

    def mu_at(self, iteration):
        """Steepness at a given iteration"""
        if not self.enabled:
            return self.alpha
        return min(self.alpha, self.mu0 + iteration * self.beta)

    def step(self):
        self.iteration += 1

    @property
    def saturation_iteration(self):
        """First iteration at which the steepness equals ``alpha``"""
        if not self.enabled or self.alpha == self.mu0:
            return 0
        return math.ceil((self.alpha - self.mu0) / self.beta)

    def copy(self):
        new = SteepnessSchedule(self.mu0, self.alpha, self.beta, self.enabled)
        new.iteration = self.iteration
        return new


def scheduled_sigmoid(x, mu):
    """``1 / (1 + exp(-mu (x - 0.5)))`` for a :class:`~dfc.tensor.Tensor` or an array

    Parameters
    ----------
    x : :class:`~dfc.tensor.Tensor` or array_like
        Mask values
    mu : `float`
        Positive steepness
    """
    if mu <= 0:
        raise ValueError(f"Sigmoid steepness must be positive, got {mu}")
    if isinstance(x, T.Tensor):
        return T.sigmoid(x, mu=mu, center=0.5)
    return expit(mu * (np.asarray(x, dtype=np.float64) - 0.5))


def layer_spec(shape, scheme=1):
    """Matricization of a conv (4D) or linear (2D) weight of the given shape"""
    return MatricizationSpec(scheme if len(shape) == 4 else 1, tuple(shape))


def _mu(mu):
    return mu() if isinstance(mu, SteepnessSchedule) else float(mu)


def apply_dml_s(w, m, mu, scheme=1):
    """Scale every filter of a frozen weight by the scheduled sigmoid of its mask value

    Parameters
    ----------
    w : :class:`~dfc.tensor.Tensor`
        Conv or linear weight with ``C_out`` filters along the first axis
    m : :class:`~dfc.tensor.Tensor`
        Mask vector of length ``C_out``
    mu : `float` or :class:`SteepnessSchedule`
        Current steepness
    scheme : `int`, optional
        Matricization scheme, by default 1

    Returns
    -------
    masked : :class:`~dfc.tensor.Tensor`
        Weight of the same shape as ``w``
    """
    if tuple(m.shape) != (w.shape[0],):
        raise ValueError(f"Mask of shape {tuple(m.shape)} does not match {w.shape[0]} filters")
    spec = layer_spec(w.shape, scheme)
    gate = scheduled_sigmoid(m, _mu(mu))
    return dematricize(T.row_scale(matricize(w, spec), gate, repeats=spec.row_repeats), spec)


def apply_dtl_s(w, gamma, scheme=1, sigma_only=False):
    """Soft-threshold the spectrum of a matricized weight

    Parameters
    ----------
    w : :class:`~dfc.tensor.Tensor`
        Conv or linear weight
    gamma : :class:`~dfc.tensor.Tensor` or `float`
        Non-negative threshold
    scheme : `int`, optional
        Matricization scheme, by default 1
    sigma_only : `bool`, optional
        Only differentiate through the singular values, by default False

    Returns
    -------
    thresholded : :class:`~dfc.tensor.Tensor`
        Weight of the same shape as ``w``
    """
    if not isinstance(gamma, T.Tensor):
        gamma = T.Tensor(gamma, dtype=w.dtype)
    spec = layer_spec(w.shape, scheme)
    return dematricize(svt_node(matricize(w, spec), gamma, sigma_only=sigma_only), spec)


def h_df(w, m, gamma, mu, scheme=1, sigma_only=False):
    """Mask the filters of a weight, then threshold its spectrum

    Either ``m`` or ``gamma`` may be None to skip that stage.
    """
    if m is not None:
        w = apply_dml_s(w, m, mu, scheme=scheme)
    if gamma is not None:
        w = apply_dtl_s(w, gamma, scheme=scheme, sigma_only=sigma_only)
    return w


def masked_spectrum(w, m, mu, scheme=1):
    """Differentiable singular values of the matricized masked weight"""
    if m is not None:
        w = apply_dml_s(w, m, mu, scheme=scheme)
    return singular_values_node(matricize(w, layer_spec(w.shape, scheme)))


@dataclass
class SelectionState():
    """Learnable selection parameters and what is cached about the frozen layers

    Attributes
    ----------
    masks : `dict`
        Layer id to mask vector (one value per filter) for every prunable layer
    thresholds : `dict`
        Layer id to threshold for every decomposable layer
    schedule : :class:`SteepnessSchedule`
        Mask steepness schedule
    tau : `dict`
        Layer id to the soft-rank temperature ``tau_c / sigma_1``
    sigma_max : `dict`
        Layer id to the largest singular value of the frozen weight
    spectra : `dict`
        Layer id to the singular values of the frozen weight
    scheme : `int`
        Matricization scheme
    mode : `str`
        "hybrid" (masks and thresholds), "prune" (masks only) or "lowrank" (thresholds only)
    """
    masks: dict
    thresholds: dict
    schedule: SteepnessSchedule
    tau: dict = field(default_factory=dict)
    sigma_max: dict = field(default_factory=dict)
    spectra: dict = field(default_factory=dict)
    scheme: int = 1
    mode: str = "hybrid"

    @classmethod
    def initial(cls, model, scheme=1, mode="hybrid", schedule=None, tau_c=2.0):
        """All masks at one and all thresholds at zero

        Parameters
        ----------
        model : :class:`~dfc.model.ModelGraph`
            Frozen, unfactorized network
        scheme : `int`, optional
            Matricization scheme, by default 1
        mode : `str`, optional
            Which selections to learn, by default "hybrid"
        schedule : :class:`SteepnessSchedule`, optional
            Steepness schedule, by default the standard one
        tau_c : `float`, optional
            Constant of the soft-rank temperature, by default 2
        """
        if mode not in MODES:
            raise ValueError(f"Unknown compression mode '{mode}', must be one of {MODES}")
        if tau_c <= 0:
            raise ValueError(f"tau_c must be positive, got {tau_c}")
        schedule = SteepnessSchedule() if schedule is None else schedule
        masks, thresholds, tau, sigma_max, spectra = {}, {}, {}, {}, {}
        if mode != "lowrank":
            for layer in model.prunable_layers():
                masks[layer.layer_id] = np.ones(layer.c_out)
        if mode != "prune":
            for layer in model.compute_layers():
                assert not layer.factorized, "Selections are learned on an unfactorized network"
                w = model.weights[layer.layer_id]["weight"]
                s = svd(matricize(w, layer_spec(w.shape, scheme))).s
                thresholds[layer.layer_id] = 0.0
                spectra[layer.layer_id] = s
                sigma_max[layer.layer_id] = float(s[0]) if len(s) > 0 else 0.0
                tau[layer.layer_id] = tau_c / s[0] if len(s) > 0 else tau_c
        return cls(masks, thresholds, schedule, tau, sigma_max, spectra, scheme, mode)

    def copy(self):
        return SelectionState({k: v.copy() for k, v in self.masks.items()}, dict(self.thresholds),
                              self.schedule.copy(), dict(self.tau), dict(self.sigma_max),
                              {k: v.copy() for k, v in self.spectra.items()}, self.scheme, self.mode)

    def gates(self, mu=None):
        """Scheduled sigmoid of every mask, at the current steepness unless ``mu`` is given"""
        mu = self.schedule() if mu is None else mu
        return {lid: scheduled_sigmoid(m, mu) for lid, m in self.masks.items()}

    def saturation(self, tol=1e-3, mu=None):
        """Fraction of mask gates within ``tol`` of 0 or 1"""
        gates = np.concatenate([g for g in self.gates(mu).values()] + [np.zeros(0)])
        if len(gates) == 0:
            return 1.0
        return float(np.mean(np.minimum(gates, 1 - gates) <= tol))

