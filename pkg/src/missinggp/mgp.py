"""Chained per-attribute imputation GPs trained jointly.

One single-output sparse GP per missing-bearing attribute, visited in
ascending order of pre-standardization standard deviation. Each GP predicts
its attribute from all the others; missing entries of already-visited
attributes are replaced by reparameterized samples, so later GPs consume the
predictive distributions of earlier ones. All layers (and an optional final
target GP) are trained at once on a joint bound.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensorgrad as tg
from .config import TrainConfig
from .errors import ContractError
from .kernels import RbfArdKernel
from .optim import Adam
from .svgp import (
    FitResult,
    SparseGPLayer,
    _check_finite,
    _noise_row,
    gaussian_expected_log_lik,
    init_inducing,
)

log = logging.getLogger(__name__)


@dataclass
class AttributeOrdering:
    """Imputation order over the attributes that contain missing values."""

    permutation: list
    stds: np.ndarray

    def __len__(self):
        return len(self.permutation)


def order_missing_attributes(raw_data, mask, descending=False):
    """Order missing-bearing attributes by their raw-scale standard deviation.

    Standard deviations are taken over observed cells of the data BEFORE
    standardization, ascending (ties broken by column index). Attributes
    without missing cells are excluded. ``descending`` flips the direction
    for sensitivity checks.
    """
    raw = np.asarray(raw_data, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    observed = ~(mask | np.isnan(raw))
    stds = np.zeros(raw.shape[1])
    for col in range(raw.shape[1]):
        vals = raw[observed[:, col], col]
        stds[col] = vals.std() if vals.size else 0.0
    bearing = [c for c in range(raw.shape[1]) if mask[:, c].any()]
    key = -stds if descending else stds
    permutation = sorted(bearing, key=lambda c: (key[c], c))
    return AttributeOrdering(permutation=permutation, stds=stds)


def initial_impute(data, mask, means=None):
    """Fill missing cells with per-column means of the observed cells.

    ``means`` overrides the fill values (test rows are pre-imputed with
    training-column means); otherwise means come from the observed cells of
    ``data`` itself. Observed cells are returned untouched.
    """
    data = np.asarray(data, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool) | np.isnan(data)
    if means is None:
        means = np.empty(data.shape[1])
        for col in range(data.shape[1]):
            vals = data[~mask[:, col], col]
            if vals.size == 0:
                raise ContractError(f"column {col} has no observed values to average")
            means[col] = vals.mean()
    else:
        means = np.asarray(means, dtype=np.float64)
    completed = data.copy()
    rows, cols = np.nonzero(mask)
    completed[rows, cols] = means[cols]
    return completed


def _selector(d, drop_col):
    keep = [c for c in range(d) if c != drop_col]
    s = np.zeros((d, d - 1))
    for j, c in enumerate(keep):
        s[c, j] = 1.0
    return s


class MgpNetwork:
    """The chain: one imputation layer per ordered attribute plus an optional target GP."""

    def __init__(self, ordering, layers, selectors, fill_values, target_layer=None):
        self.ordering = ordering
        self.layers = list(layers)
        self.selectors = list(selectors)
        self.fill_values = np.asarray(fill_values, dtype=np.float64)
        self.target_layer = target_layer
        self.n_attributes = self.fill_values.shape[0]

    def params(self):
        out = [p for layer in self.layers for p in layer.params()]
        if self.target_layer is not None:
            out.extend(self.target_layer.params())
        return out


def build_mgp(x_hat, ordering, config=None, rng=None, with_target=False):
    """Create the chain against a mean-imputed training matrix.

    Each layer's inducing inputs are subsampled from the pre-imputed training
    matrix restricted to that layer's input columns.
    """
    config = config or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    n, d = x_hat.shape
    m = min(config.num_inducing, n)
    layers = []
    selectors = []
    for attr in ordering.permutation:
        sel = _selector(d, attr)
        z = init_inducing(x_hat @ sel, m, rng)
        layers.append(SparseGPLayer(RbfArdKernel(d - 1), z, 1))
        selectors.append(sel)
    target = None
    if with_target:
        target = SparseGPLayer(RbfArdKernel(d), init_inducing(x_hat, m, rng), 1)
    fill = x_hat.mean(axis=0)
    return MgpNetwork(ordering, layers, selectors, fill, target_layer=target)


@dataclass
class ChainState:
    """Graph nodes produced by one pass through the chain."""

    k: int
    n: int
    records: list = field(default_factory=list)  # (attr, mu, var, common)
    x_tilde: object = None
    noise: list = field(default_factory=list)


def chain_forward(network, x_hat, mask, k, rng=None, eps=None):
    """Propagate ``k`` sample paths; substituted cells get fresh draws.

    ``x_hat`` is the pre-imputed matrix; ``mask`` marks the cells to
    substitute. Layer l sees the running matrix minus its own attribute,
    produces marginals for every row, and the missing entries of its
    attribute are replaced by mu + eps * sqrt(var). Observed entries are
    never overwritten.
    """
    if k < 1:
        raise ContractError(f"sample count must be >= 1, got {k}")
    x_hat = np.asarray(x_hat, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n, d = x_hat.shape
    if d != network.n_attributes:
        raise ContractError(f"network built for {network.n_attributes} attributes, got {d}")
    extra = sorted(set(np.nonzero(mask.any(axis=0))[0]) - set(network.ordering.permutation))
    if extra:
        raise ContractError(f"mask marks attributes with no imputation layer: {extra}")
    tiled = np.tile(x_hat, (k, 1))
    mask_tiled = np.tile(mask, (k, 1))
    state = ChainState(k=k, n=n)
    x_tilde = tg.constant(tiled)
    for layer, sel, attr in zip(network.layers, network.selectors, network.ordering.permutation):
        common = layer.common_nodes()
        mu, var = layer.marginal_nodes(tg.matmul(x_tilde, tg.constant(sel)), common)
        if eps is not None:
            noise = eps[len(state.records)]
        else:
            noise = rng.standard_normal((n * k, 1))
        state.noise.append(noise)
        fhat = tg.add(mu, tg.mul(tg.constant(noise), tg.sqrt(var)))
        x_tilde = tg.scatter_column(x_tilde, attr, fhat, mask_tiled[:, attr])
        state.records.append((attr, mu, var, common))
    state.x_tilde = x_tilde
    return state


def mgp_elbo(network, x_hat_batch, mask_batch, n_total, k, rng=None, eps=None, y_batch=None, y_mask=None):
    """Joint bound: per-attribute likelihoods on observed cells, KL per layer.

    Every imputation layer is scored on the cells where its attribute is
    observed, with expectations estimated over ``k`` propagated sample
    paths. The optional target layer adds a likelihood on ``y_batch``. Both
    likelihood terms share the n_total / batch mini-batch correction.
    """
    x_hat_batch = np.asarray(x_hat_batch, dtype=np.float64)
    mask_batch = np.asarray(mask_batch, dtype=bool)
    n = x_hat_batch.shape[0]
    if n_total < n:
        raise ContractError(f"n_total={n_total} smaller than batch size {n}")
    state = chain_forward(network, x_hat_batch, mask_batch, k, rng=rng, eps=eps)
    observed = (~mask_batch).astype(np.float64)
    data_term = None
    kl_total = None
    for layer, (attr, mu, var, common) in zip(network.layers, state.records):
        weights = np.tile(observed[:, attr : attr + 1], (k, 1)) / k
        targets = np.tile(x_hat_batch[:, attr : attr + 1], (k, 1))
        ll = gaussian_expected_log_lik(tg.constant(targets), mu, var, _noise_row(layer))
        ell = tg.reduce_sum(tg.mul(tg.constant(weights), ll))
        data_term = ell if data_term is None else tg.add(data_term, ell)
        kl = layer.prior_kl(common)
        kl_total = kl if kl_total is None else tg.add(kl_total, kl)
    if network.target_layer is not None and y_batch is not None:
        y = np.asarray(y_batch, dtype=np.float64).reshape(n, 1)
        y_obs = np.ones((n, 1)) if y_mask is None else (~np.asarray(y_mask, dtype=bool)).reshape(n, 1).astype(float)
        common_t = network.target_layer.common_nodes()
        mu_t, var_t = network.target_layer.marginal_nodes(state.x_tilde, common_t)
        ll_t = gaussian_expected_log_lik(
            tg.constant(np.tile(y, (k, 1))), mu_t, var_t, _noise_row(network.target_layer)
        )
        ell_t = tg.reduce_sum(tg.mul(tg.constant(np.tile(y_obs, (k, 1)) / k), ll_t))
        data_term = tg.add(data_term, ell_t)
        kl_total = tg.add(kl_total, network.target_layer.prior_kl(common_t))
    return tg.sub(tg.mul(float(n_total) / n, data_term), kl_total)


def train_mgp(x_hat, mask, ordering, config=None, y=None, y_mask=None, with_target=None):
    """Adam on the noisy joint bound; returns the network and the ELBO trace."""
    config = config or TrainConfig()
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x_hat.size == 0:
        raise ContractError("empty dataset")
    mask = np.asarray(mask, dtype=bool)
    n = x_hat.shape[0]
    rng = np.random.default_rng(config.seed)
    if with_target is None:
        with_target = y is not None
    network = build_mgp(x_hat, ordering, config, rng, with_target=with_target)
    params = network.params()
    opt = Adam(params, lr=config.learning_rate)
    iters = config.resolved_iterations(n)
    batch = min(config.batch_size, n)
    trace = []
    with tg.fast_solves():
        for it in range(iters):
            rows = rng.choice(n, size=batch, replace=False)
            elbo = mgp_elbo(
                network,
                x_hat[rows],
                mask[rows],
                n,
                config.num_samples,
                rng=rng,
                y_batch=None if y is None else y[rows],
                y_mask=None if y_mask is None else y_mask[rows],
            )
            value = float(tg.evaluate(elbo))
            _check_finite(value, it, params)
            grads = tg.gradient(tg.neg(elbo), params)
            opt.step(grads)
            if it % config.log_every == 0 or it == iters - 1:
                trace.append((it, value))
                log.debug("mgp iter %d elbo %.4f", it, value)
    return FitResult(model=network, elbo_trace=trace)


@dataclass
class ImputedCell:
    row: int
    col: int
    mean: float
    variance: float
    component_means: np.ndarray
    component_variances: np.ndarray


@dataclass
class ImputationResult:
    """Completed matrix plus the mixture behind every imputed cell."""

    completed: np.ndarray
    cells: list


def impute(network, x_hat, mask, k, rng=None):
    """Fill masked cells with mixture means over ``k`` chain passes.

    Rows must already be pre-imputed with training-column means. Observed
    cells pass through bit-exactly; each imputed cell also reports its
    K-component mixture (mean, variance per component, noise included).
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    completed = x_hat.copy()
    cells = []
    if not mask.any():
        return ImputationResult(completed=completed, cells=cells)
    rng = rng if rng is not None else np.random.default_rng(0)
    n = x_hat.shape[0]
    state = chain_forward(network, x_hat, mask, k, rng=rng)
    for layer, (attr, mu, var, _) in zip(network.layers, state.records):
        col_mask = mask[:, attr]
        if not col_mask.any():
            continue
        mu_k = tg.evaluate(mu).reshape(k, n)
        var_k = tg.evaluate(var).reshape(k, n) + np.exp(layer.log_noise.value).item()
        mix_mean = mu_k.mean(axis=0)
        mix_var = (var_k + mu_k**2).mean(axis=0) - mix_mean**2
        for row in np.nonzero(col_mask)[0]:
            completed[row, attr] = mix_mean[row]
            cells.append(
                ImputedCell(
                    row=int(row),
                    col=int(attr),
                    mean=float(mix_mean[row]),
                    variance=float(max(mix_var[row], 0.0)),
                    component_means=mu_k[:, row].copy(),
                    component_variances=var_k[:, row].copy(),
                )
            )
    return ImputationResult(completed=completed, cells=cells)
