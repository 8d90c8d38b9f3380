"""Covariance functions evaluated as differentiable graph nodes."""

import numpy as np

from . import tensorgrad as tg
from .errors import ShapeMismatchError


class RbfArdKernel:
    """Squared-exponential kernel with one lengthscale per input dimension.

    k(x, x') = s2 * exp(-0.5 * sum_d (x_d - x'_d)^2 / l_d^2)

    Both the lengthscales and the signal variance s2 live in the log domain
    so that positivity is unconstrained for the optimizer. Defaults follow
    unit-scale (z-scored) inputs: l_d = sqrt(D_in), s2 = 1.
    """

    def __init__(self, input_dim, lengthscales=None, variance=1.0):
        self.input_dim = int(input_dim)
        if lengthscales is None:
            lengthscales = np.full(self.input_dim, np.sqrt(self.input_dim))
        lengthscales = np.broadcast_to(np.asarray(lengthscales, dtype=np.float64), (self.input_dim,))
        self.log_lengthscales = tg.parameter(np.log(lengthscales))
        self.log_amplitude = tg.parameter(np.log(float(variance)))

    def params(self):
        return [self.log_lengthscales, self.log_amplitude]

    @property
    def lengthscales(self):
        return np.exp(self.log_lengthscales.value)

    @property
    def variance(self):
        return float(np.exp(self.log_amplitude.value))

    def _scaled(self, x):
        inv = tg.exp(tg.neg(self.log_lengthscales))
        return tg.mul(x, inv)

    def matrix(self, a, b=None):
        """Dense covariance matrix between row sets ``a`` (n rows) and ``b`` (m rows).

        With ``b`` omitted the result is K(a, a), symmetrized exactly.
        """
        a = tg.as_tensor(a)
        same = b is None or b is a
        b = a if same else tg.as_tensor(b)
        if a.shape[1] != self.input_dim or b.shape[1] != self.input_dim:
            raise ShapeMismatchError("kernel_matrix", a.shape, (b.shape[0], self.input_dim))
        if not same:
            return _rbf_cross(self.log_lengthscales, self.log_amplitude, a, b)
        sa = self._scaled(a)
        na = tg.reduce_sum(tg.square(sa), axis=1, keepdims=True)
        cross = tg.matmul(sa, tg.transpose(sa))
        d2 = tg.sub(tg.add(na, tg.transpose(na)), tg.mul(2.0, cross))
        k = tg.mul(tg.exp(self.log_amplitude), tg.exp(tg.mul(-0.5, d2)))
        return tg.mul(0.5, tg.add(k, tg.transpose(k)))

    def diag(self, a):
        """Diagonal of K(a, a) as an (n, 1) column, without the full matrix."""
        a = tg.as_tensor(a)
        if a.shape[1] != self.input_dim:
            raise ShapeMismatchError("kernel_diag", a.shape, ("n", self.input_dim))
        ones = tg.constant(np.ones((a.shape[0], 1)))
        return tg.mul(tg.exp(self.log_amplitude), ones)


def _rbf_cross(log_ls, log_amp, a, b):
    """Fused n x m covariance block with a hand-written pullback.

    The cross block against a training batch is the hottest kernel call, so
    its forward and reverse passes are fused into a single graph node instead
    of a chain of elementwise primitives.
    """
    inv = np.exp(-log_ls.value)
    sa = a.value * inv
    sb = b.value * inv
    d2 = (sa * sa).sum(axis=1)[:, None] + (sb * sb).sum(axis=1)[None, :] - 2.0 * (sa @ sb.T)
    k = np.exp(log_amp.value) * np.exp(-0.5 * d2)

    def multi_vjp(g):
        gk = g * k
        g_amp = g_ls = ga = gb = None
        if log_amp.needs_grad:
            g_amp = np.array(gk.sum())
        row = gk.sum(axis=1)
        col = gk.sum(axis=0)
        # d(-0.5 d2) pullback: dsa = gk @ sb - sa * row, dsb = gk^T @ sa - sb * col
        dsa = gk @ sb - sa * row[:, None]
        dsb = gk.T @ sa - sb * col[:, None]
        if a.needs_grad:
            ga = dsa * inv
        if b.needs_grad:
            gb = dsb * inv
        if log_ls.needs_grad:
            g_ls = -((dsa * sa).sum(axis=0) + (dsb * sb).sum(axis=0))
        return (g_ls, g_amp, ga, gb)

    return tg.Tensor(k, op="rbf_cross", inputs=(log_ls, log_amp, a, b), multi_vjp=multi_vjp)


def kernel_matrix(kernel, a, b=None):
    return kernel.matrix(a, b)


def kernel_diag(kernel, a):
    return kernel.diag(a)
