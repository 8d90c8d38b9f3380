"""Deep GP with doubly-stochastic variational inference.

Layers are :class:`~missinggp.svgp.SparseGPLayer` stacks; hidden layers carry
an identity-like linear prior mean and no likelihood noise, the final layer
is zero-mean with per-output Gaussian noise. Training propagates
reparameterized samples through the hidden layers and evaluates the final
likelihood expectation in closed form per sample.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .config import TrainConfig
from .errors import ContractError
from .kernels import RbfArdKernel
from .optim import Adam
from .svgp import (
    FitResult,
    LinearMean,
    SparseGPLayer,
    _check_finite,
    _noise_row,
    gaussian_expected_log_lik,
    identity_projection,
    init_inducing,
)

log = logging.getLogger(__name__)


class DgpNetwork:
    """Ordered stack of sparse GP layers with sample counts for train/test."""

    def __init__(self, layers, k_train=20, k_test=20):
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.input_dim != prev.n_outputs:
                raise ContractError(
                    f"layer width mismatch: {prev.n_outputs} outputs feeding {nxt.input_dim} inputs"
                )
        self.layers = list(layers)
        self.k_train = k_train
        self.k_test = k_test

    @property
    def input_dim(self):
        return self.layers[0].input_dim

    @property
    def output_dim(self):
        return self.layers[-1].n_outputs

    def params(self):
        return [p for layer in self.layers for p in layer.params()]


@dataclass
class SamplePath:
    """Per-layer reparameterized draws and the standard-normal noise used."""

    draws: list
    noise: list


def draw_noise(network, n_rows, rng, include_last):
    layers = network.layers if include_last else network.layers[:-1]
    return [rng.standard_normal((n_rows, layer.n_outputs)) for layer in layers]


def _propagate_nodes(network, x, eps_list, sample_last):
    """Run the stack on node ``x``; returns per-layer (mu, var, fhat, common)."""
    records = []
    current = tg.as_tensor(x)
    n_layers = len(network.layers)
    for idx, layer in enumerate(network.layers):
        common = layer.common_nodes()
        mu, var = layer.marginal_nodes(current, common)
        is_last = idx == n_layers - 1
        fhat = None
        if not is_last or sample_last:
            eps = tg.constant(eps_list[idx])
            fhat = tg.add(mu, tg.mul(eps, tg.sqrt(var)))
            current = fhat
        records.append((mu, var, fhat, common))
    return records


def propagate_sample(network, x, rng, eps=None):
    """One reparameterized pass through every layer, final layer included."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != network.input_dim:
        raise ContractError(f"expected (n, {network.input_dim}) inputs, got {x.shape}")
    if eps is None:
        eps = draw_noise(network, x.shape[0], rng, include_last=True)
    records = _propagate_nodes(network, tg.constant(x), eps, sample_last=True)
    return SamplePath(draws=[tg.evaluate(f).copy() for _, _, f, _ in records], noise=eps)


def dgp_elbo(network, x_batch, y_batch, mask_batch, n_total, k=None, rng=None, eps=None):
    """Monte Carlo evidence lower bound over ``k`` sample paths.

    The likelihood expectation is closed-form Gaussian per path; paths are
    stacked so one pass through the layers covers all of them. ``eps``
    overrides the noise draws (fixed-noise gradient checks); otherwise
    ``rng`` supplies them.
    """
    k = k or network.k_train
    if k < 1:
        raise ContractError(f"sample count must be >= 1, got {k}")
    x_batch = np.asarray(x_batch, dtype=np.float64)
    n = x_batch.shape[0]
    if n_total < n:
        raise ContractError(f"n_total={n_total} smaller than batch size {n}")
    observed = ~np.asarray(mask_batch, dtype=bool)
    y_clean = np.where(observed, np.asarray(y_batch, dtype=np.float64), 0.0)
    x_tiled = np.tile(x_batch, (k, 1))
    if eps is None:
        eps = draw_noise(network, n * k, rng, include_last=False)
    records = _propagate_nodes(network, tg.constant(x_tiled), eps, sample_last=False)
    final = network.layers[-1]
    mu, var = records[-1][0], records[-1][1]
    ll = gaussian_expected_log_lik(tg.constant(np.tile(y_clean, (k, 1))), mu, var, _noise_row(final))
    weights = np.tile(observed.astype(np.float64), (k, 1)) / k
    data_term = tg.mul(float(n_total) / n, tg.reduce_sum(tg.mul(tg.constant(weights), ll)))
    kl_total = None
    for layer, (_, _, _, common) in zip(network.layers, records):
        kl = layer.prior_kl(common)
        kl_total = kl if kl_total is None else tg.add(kl_total, kl)
    return tg.sub(data_term, kl_total)


@dataclass
class MixturePrediction:
    """Equally-weighted Gaussian mixture over sample paths, per output."""

    mean: np.ndarray
    variance: np.ndarray
    component_means: np.ndarray
    component_variances: np.ndarray


def mixture_from_components(means, variances):
    """Collapse (k, n, h) component stats into mixture mean and variance."""
    mean = means.mean(axis=0)
    variance = (variances + means**2).mean(axis=0) - mean**2
    return mean, np.maximum(variance, 0.0)


def dgp_predict(network, x, k=None, rng=None, include_noise=True, eps=None):
    """Mixture predictive distribution from ``k`` propagated sample paths."""
    k = k or network.k_test
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    x_tiled = np.tile(x, (k, 1))
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        eps = draw_noise(network, n * k, rng, include_last=False)
    records = _propagate_nodes(network, tg.constant(x_tiled), eps, sample_last=False)
    mu = tg.evaluate(records[-1][0]).reshape(k, n, -1)
    var = tg.evaluate(records[-1][1]).reshape(k, n, -1)
    if include_noise and network.layers[-1].log_noise is not None:
        var = var + np.exp(network.layers[-1].log_noise.value).reshape(1, 1, -1)
    mean, variance = mixture_from_components(mu, var)
    return MixturePrediction(mean=mean, variance=variance, component_means=mu, component_variances=var)


def build_dgp(x_init, d_out, config=None, rng=None, depth=None, hidden_width=None):
    """Stack for ``depth`` layers on inputs shaped like ``x_init``.

    Hidden width defaults to min(input dim, 30). Hidden layers get an
    identity-like linear mean and their q(u) means start at the prior mean so
    the stack propagates inputs unchanged at initialization.
    """
    config = config or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    x_init = np.asarray(x_init, dtype=np.float64)
    d_in = x_init.shape[1]
    depth = depth or config.dgp_layers
    width = hidden_width or min(d_in, 30)
    m = min(config.num_inducing, x_init.shape[0])
    z = init_inducing(x_init, m, rng)
    layers = []
    prev = d_in
    for _ in range(depth - 1):
        mean_fn = LinearMean(identity_projection(prev, width))
        # Whitened q(u) means start at zero, so each hidden layer's marginal
        # mean is its linear prior mean and the stack passes inputs through.
        layers.append(SparseGPLayer(RbfArdKernel(prev), z, width, mean_fn=mean_fn, noise_variance=None))
        z = z @ mean_fn.weights
        prev = width
    layers.append(SparseGPLayer(RbfArdKernel(prev), z, d_out))
    return DgpNetwork(layers, k_train=config.num_samples, k_test=config.num_samples)


def fit_dgp(x_hat, mask, config=None, depth=None):
    """Train a deep GP mapping the attributes to themselves under a mask."""
    config = config or TrainConfig()
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x_hat.size == 0:
        raise ContractError("empty dataset")
    mask = np.asarray(mask, dtype=bool)
    n, d = x_hat.shape
    rng = np.random.default_rng(config.seed)
    network = build_dgp(x_hat, d, config, rng, depth=depth)
    params = network.params()
    opt = Adam(params, lr=config.learning_rate)
    iters = config.resolved_iterations(n)
    batch = min(config.batch_size, n)
    trace = []
    with tg.fast_solves():
        for it in range(iters):
            rows = rng.choice(n, size=batch, replace=False)
            elbo = dgp_elbo(network, x_hat[rows], x_hat[rows], mask[rows], n, rng=rng)
            value = float(tg.evaluate(elbo))
            _check_finite(value, it, params)
            grads = tg.gradient(tg.neg(elbo), params)
            opt.step(grads)
            if it % config.log_every == 0 or it == iters - 1:
                trace.append((it, value))
                log.debug("dgp iter %d elbo %.4f", it, value)
    return FitResult(model=network, elbo_trace=trace)


def dgp_impute(network, x_hat, mask, k=None, rng=None):
    """Fill missing cells with the mixture predictive mean."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    completed = x_hat.copy()
    cells = []
    if not mask.any():
        return completed, cells
    pred = dgp_predict(network, x_hat, k=k, rng=rng, include_noise=True)
    rows, cols = np.nonzero(mask)
    completed[rows, cols] = pred.mean[rows, cols]
    for r, c in zip(rows.tolist(), cols.tolist()):
        cells.append((r, c, float(pred.mean[r, c]), float(pred.variance[r, c])))
    return completed, cells
