"""Matricization of convolution weights, SVD, singular value thresholding and their derivatives"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .tensor import Tensor, register_op, forward_op, transpose, reshape, is_checked

__all__ = ["MatricizationSpec", "SvdFactors", "ConvergenceError", "DegenerateSpectrumError", "matricize",
           "dematricize", "svd", "svt", "svt_vjp", "svt_node", "singular_values_node", "RANK_CUTOFF",
           "SEPARATION_TOL", "CLAMP"]

# singular values below this fraction of the largest one do not count towards the numerical rank
RANK_CUTOFF = 1e-7

# minimum relative gap between singular values for the SVD derivative in checked mode
SEPARATION_TOL = 1e-5

# smallest magnitude of a (s_j^2 - s_i^2) denominator in permissive mode
CLAMP = 1e-8


class ConvergenceError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        """Raised when the SVD backend fails to converge

        Parameters
        ----------
        message : `str`
            Description of the failure
        diagnostics : `dict`, optional
            Details of the attempt (matrix shape, LAPACK drivers tried, backend messages), by default None
        """
        super().__init__(message)
        self.diagnostics = {} if diagnostics is None else diagnostics


class DegenerateSpectrumError(ValueError):
    """Raised in checked mode when singular values are too close for a stable SVD derivative"""


@dataclass(frozen=True)
class MatricizationSpec():
    """How a weight tensor is laid out as a matrix

    Scheme 1 maps a (C_out, C_in, k, k) kernel to a C_out x (C_in k k) matrix (rows are filters). Scheme 2
    maps it to a (C_out k) x (C_in k) matrix whose rows are (filter, kernel column) pairs and whose columns
    are (input channel, kernel row) pairs. Linear (2D) weights are used as they are under both schemes.
    """
    scheme: int
    original_shape: tuple

    def __post_init__(self):
        if self.scheme not in (1, 2):
            raise ValueError(f"Unknown matricization scheme {self.scheme}, must be 1 or 2")
        if len(self.original_shape) not in (2, 4):
            raise ValueError(f"Can only matricize 2D or 4D weights, got shape {self.original_shape}")

    @property
    def is_conv(self):
        return len(self.original_shape) == 4

    @property
    def permutation(self):
        if self.is_conv and self.scheme == 2:
            return (0, 3, 1, 2)
        return tuple(range(len(self.original_shape)))

    @property
    def matrix_shape(self):
        if not self.is_conv:
            return tuple(self.original_shape)
        o, c, kh, kw = self.original_shape
        if self.scheme == 1:
            return (o, c * kh * kw)
        return (o * kw, c * kh)

    @property
    def row_repeats(self):
        """Number of consecutive matrix rows that belong to one filter"""
        return self.original_shape[3] if self.is_conv and self.scheme == 2 else 1


@dataclass
class SvdFactors():
    """Thin SVD restricted to the numerical rank: ``x = U @ diag(s) @ V.T``"""
    U: np.ndarray
    s: np.ndarray
    V: np.ndarray

    @property
    def rank(self):
        return len(self.s)

    def reconstruct(self, values=None):
        """Multiply the factors back together, optionally with replacement singular values"""
        values = self.s if values is None else values
        return (self.U * values) @ self.V.T


def matricize(t, spec):
    """Lay out a weight tensor as a matrix

    Parameters
    ----------
    t : :class:`~dfc.tensor.Tensor` or :class:`numpy.ndarray`
        Weight of shape ``spec.original_shape``. Tensors stay differentiable.
    spec : :class:`MatricizationSpec`
        Layout to use

    Returns
    -------
    matrix : same type as ``t``
        Matrix of shape ``spec.matrix_shape``
    """
    if tuple(t.shape) != tuple(spec.original_shape):
        raise ValueError(f"matricize: tensor of shape {tuple(t.shape)} does not match "
                         f"{tuple(spec.original_shape)}")
    if isinstance(t, Tensor):
        if spec.permutation != tuple(range(t.ndim)):
            t = transpose(t, spec.permutation)
        return reshape(t, spec.matrix_shape)
    return np.transpose(t, spec.permutation).reshape(spec.matrix_shape)


def dematricize(m, spec):
    """Inverse of :func:`matricize`"""
    if tuple(m.shape) != tuple(spec.matrix_shape):
        raise ValueError(f"dematricize: matrix of shape {tuple(m.shape)} does not match "
                         f"{tuple(spec.matrix_shape)}")
    permuted = tuple(spec.original_shape[i] for i in spec.permutation)
    inverse = tuple(np.argsort(spec.permutation))
    if isinstance(m, Tensor):
        m = reshape(m, permuted)
        return m if inverse == tuple(range(m.ndim)) else transpose(m, inverse)
    return np.transpose(m.reshape(permuted), inverse)


def svd(x):
    """Singular value decomposition truncated to the numerical rank

    Parameters
    ----------
    x : array_like
        A finite matrix

    Returns
    -------
    factors : :class:`SvdFactors`
        ``U`` (m x r) and ``V`` (n x r) with orthonormal columns and non-increasing positive singular values
        ``s``. The first nonzero entry of each column of ``U`` is non-negative. A zero matrix gives r = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"svd: expected a matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("svd: matrix contains non-finite values")
    m, n = x.shape
    if x.size == 0 or not np.any(x):
        return SvdFactors(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)))

    messages = []
    for driver in ("gesdd", "gesvd"):
        try:
            U, s, Vt = scipy.linalg.svd(x, full_matrices=False, lapack_driver=driver, check_finite=False)
            break
        except np.linalg.LinAlgError as e:
            messages.append(f"{driver}: {e}")
    else:
        raise ConvergenceError(f"SVD of a {m}x{n} matrix did not converge",
                               diagnostics={"shape": (m, n), "drivers": ("gesdd", "gesvd"),
                                            "messages": messages})

    # ties keep their original column order
    order = np.argsort(-s, kind="stable")
    U, s, V = U[:, order], s[order], Vt[order].T

    keep = s >= RANK_CUTOFF * s[0]
    U, s, V = U[:, keep], s[keep], V[:, keep]

    for j in range(len(s)):
        nonzero = np.flatnonzero(np.abs(U[:, j]) > 1e-12)
        if len(nonzero) > 0 and U[nonzero[0], j] < 0:
            U[:, j] *= -1
            V[:, j] *= -1
    return SvdFactors(U, s, V)


def svt(x, gamma):
    """Singular value thresholding, ``U diag(max(s - gamma, 0)) V^T``

    Parameters
    ----------
    x : array_like
        Input matrix
    gamma : `float`
        Non-negative threshold

    Returns
    -------
    y : :class:`numpy.ndarray`
        Thresholded matrix (float64), whose rank is the number of singular values above ``gamma``
    """
    if gamma < 0:
        raise ValueError(f"svt: threshold must be non-negative, got {gamma}")
    x = np.asarray(x, dtype=np.float64)
    factors = svd(x)
    return factors.reconstruct(np.maximum(factors.s - gamma, 0.0))


def _check_separation(s):
    if len(s) < 2:
        return
    gaps = s[:-1] - s[1:]
    i = int(np.argmin(gaps))
    if gaps[i] < SEPARATION_TOL * s[0]:
        raise DegenerateSpectrumError(
            f"Singular values {s[i]:.6g} and {s[i + 1]:.6g} are separated by less than "
            f"{SEPARATION_TOL:g} * sigma_1; add a small random jitter to the weights or disable checked mode")


def _inverse_gaps(s):
    """F[i, j] = 1 / (s_j^2 - s_i^2) off the diagonal, with denominators clamped away from zero"""
    denom = s[None, :] ** 2 - s[:, None] ** 2
    small = np.abs(denom) < CLAMP
    denom = np.where(small, np.where(denom < 0, -CLAMP, CLAMP), denom)
    F = 1.0 / denom
    np.fill_diagonal(F, 0.0)
    return F


def svt_vjp(x, gamma, upstream, checked=False, sigma_only=False, factors=None):
    """Vector-Jacobian product of :func:`svt`

    Parameters
    ----------
    x : array_like
        Input matrix of the forward pass
    gamma : `float`
        Threshold of the forward pass
    upstream : array_like
        Gradient of the loss with respect to the output of :func:`svt`
    checked : `bool`, optional
        Whether to reject spectra whose singular values are too close together, by default False
    sigma_only : `bool`, optional
        Whether to treat the singular vectors as constants and only differentiate through the singular
        values, by default False (full differential)
    factors : :class:`SvdFactors`, optional
        Precomputed SVD of ``x``, by default None

    Returns
    -------
    dx : :class:`numpy.ndarray`
        Gradient with respect to ``x``
    dgamma : `float`
        Gradient with respect to ``gamma``
    """
    x = np.asarray(x, dtype=np.float64)
    G = np.asarray(upstream, dtype=np.float64)
    if G.shape != x.shape:
        raise ValueError(f"svt_vjp: upstream gradient {G.shape} does not match input {x.shape}")
    f = svd(x) if factors is None else factors
    U, s, V = f.U, f.s, f.V
    if f.rank == 0:
        return np.zeros_like(x), 0.0
    if checked:
        _check_separation(s)

    alive = s > gamma
    fs = np.where(alive, s - gamma, 0.0)
    P = U.T @ G @ V
    g_sigma = np.where(alive, np.diag(P), 0.0)
    dgamma = -float(np.sum(g_sigma))

    if sigma_only:
        return (U * g_sigma) @ V.T, dgamma

    F = _inverse_gaps(s)
    PD = P * fs[None, :]
    DP = fs[:, None] * P
    J = F * (PD - PD.T)
    K = F * (P.T * fs[None, :] - DP)
    inner = J * s[None, :] + np.diag(g_sigma) + s[:, None] * K
    dx = U @ inner @ V.T

    # components outside the column and row spaces of x
    ratio = fs / s
    GV = G @ V
    dx += (GV - U @ (U.T @ GV)) * ratio[None, :] @ V.T
    UG = U.T @ G
    dx += (U * ratio[None, :]) @ (UG - (UG @ V) @ V.T)
    return dx, dgamma


@register_op("svt")
class _Svt():
    def forward(self, arrays, attrs):
        x, gamma = arrays
        if x.ndim != 2 or np.size(gamma) != 1:
            raise ValueError(f"svt: expected a matrix and a scalar threshold, got {x.shape} and "
                             f"{np.shape(gamma)}")
        gamma_shape = np.shape(gamma)
        gamma = float(np.reshape(gamma, -1)[0])
        if gamma < 0:
            raise ValueError(f"svt: threshold must be non-negative, got {gamma}")
        x = x.astype(np.float64)
        f = svd(x)
        return f.reconstruct(np.maximum(f.s - gamma, 0.0)), (x, gamma, gamma_shape, f, attrs)

    def backward(self, ctx, g, needs):
        x, gamma, gamma_shape, f, attrs = ctx
        dx, dgamma = svt_vjp(x, gamma, g, checked=attrs["checked"], sigma_only=attrs["sigma_only"],
                             factors=f)
        return dx, np.full(gamma_shape, dgamma)


@register_op("singular_values")
class _SingularValues():
    def forward(self, arrays, attrs):
        x = arrays[0]
        if x.ndim != 2:
            raise ValueError(f"singular_values: expected a matrix, got shape {x.shape}")
        f = svd(x)
        return f.s, f

    def backward(self, ctx, g, needs):
        return ((ctx.U * g[None, :]) @ ctx.V.T,)


def svt_node(x, gamma, sigma_only=False, checked=None):
    """Singular value thresholding of a matrix :class:`~dfc.tensor.Tensor` as a differentiable op

    Parameters
    ----------
    x : :class:`~dfc.tensor.Tensor`
        Input matrix
    gamma : :class:`~dfc.tensor.Tensor`
        Single-element threshold
    sigma_only : `bool`, optional
        Use the singular-value-only derivative, by default False
    checked : `bool`, optional
        Reject near-degenerate spectra in the backward pass, by default follows
        :func:`~dfc.tensor.is_checked`
    """
    checked = is_checked() if checked is None else checked
    return forward_op("svt", [x, gamma], {"sigma_only": sigma_only, "checked": checked})


def singular_values_node(x):
    """Singular values (numerical rank only) of a matrix :class:`~dfc.tensor.Tensor`, differentiably"""
    return forward_op("singular_values", [x])
