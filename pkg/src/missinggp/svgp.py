"""Single-layer sparse variational GP: marginals, ELBO, training, exact oracle.

The layer keeps M inducing inputs shared across its H outputs, one free-form
Gaussian over inducing values per output, and a shared ARD kernel. Predictive
marginals and the KL term are computed through Cholesky factors only.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .config import TrainConfig
from .errors import ContractError, TrainingDivergedError
from .kernels import RbfArdKernel
from .optim import Adam

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-12
LOG_2PI = float(np.log(2.0 * np.pi))


class ZeroMean:
    """Zero prior mean function."""

    def __call__(self, x, n_outputs):
        x = tg.as_tensor(x)
        return tg.constant(np.zeros((x.shape[0], n_outputs)))

    def params(self):
        return []


class LinearMean:
    """Fixed linear prior mean m(x) = x W, used to pass inputs through layers."""

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=np.float64)

    def __call__(self, x, n_outputs):
        if n_outputs != self.weights.shape[1]:
            raise ContractError(f"mean function has {self.weights.shape[1]} outputs, layer wants {n_outputs}")
        return tg.matmul(tg.as_tensor(x), tg.constant(self.weights))

    def params(self):
        return []


def identity_projection(d_in, d_out):
    """Identity when square, otherwise an identity matrix truncated or zero-padded."""
    w = np.zeros((d_in, d_out))
    k = min(d_in, d_out)
    w[:k, :k] = np.eye(k)
    return w


@dataclass
class MarginalGaussians:
    """Per-point predictive mean and variance for each output."""

    mean: np.ndarray
    variance: np.ndarray


class SparseGPLayer:
    """M inducing points shared by H outputs, one free Gaussian q(u_h) each.

    The variational Gaussian is kept in whitened coordinates, u_h = m(Z) +
    Lz w_h with w_h ~ N(r_h, L_h L_h^T) and Lz the prior factor: predictive
    marginals and the KL are mathematically identical to the direct (r, S)
    form but stay well-conditioned for first-order optimizers regardless of
    how singular K(Z, Z) is. Each scale factor is stored as an unconstrained
    square matrix whose diagonal passes through exp.
    """

    def __init__(self, kernel, inducing_inputs, n_outputs, mean_fn=None, noise_variance=1e-2, q_scale_init=0.1):
        inducing_inputs = np.asarray(inducing_inputs, dtype=np.float64)
        self.kernel = kernel
        self.input_dim = inducing_inputs.shape[1]
        self.n_inducing = inducing_inputs.shape[0]
        self.n_outputs = int(n_outputs)
        self.mean_fn = mean_fn if mean_fn is not None else ZeroMean()
        self.inducing = tg.parameter(inducing_inputs)
        self.q_mean = tg.parameter(np.zeros((self.n_inducing, self.n_outputs)))
        raw = np.zeros((self.n_inducing, self.n_inducing))
        np.fill_diagonal(raw, np.log(q_scale_init))
        self.q_scale_raw = [tg.parameter(raw.copy()) for _ in range(self.n_outputs)]
        if noise_variance is None:
            self.log_noise = None
        else:
            self.log_noise = tg.parameter(np.full(self.n_outputs, np.log(noise_variance)))

    def params(self):
        out = [self.inducing, self.q_mean, *self.q_scale_raw]
        if self.log_noise is not None:
            out.append(self.log_noise)
        out.extend(self.kernel.params())
        out.extend(self.mean_fn.params())
        return out

    def scale_factor(self, h):
        raw = self.q_scale_raw[h]
        return tg.add(tg.tril(raw, -1), tg.diag_embed(tg.exp(tg.diag_part(raw))))

    def noise_variance(self):
        if self.log_noise is None:
            raise ContractError("layer has no likelihood noise")
        return tg.exp(self.log_noise)

    def _prior_factor(self):
        return tg.safe_cholesky(self.kernel.matrix(self.inducing)).lower

    def set_variational(self, q_mean, q_covs):
        """Overwrite q(u) from explicit means (M, H) and covariances (H of M, M).

        Values are given in the direct parameterization and converted to
        whitened coordinates against the current prior.
        """
        lz = tg.evaluate(self._prior_factor())
        mean_z = tg.evaluate(self.mean_fn(tg.constant(self.inducing.value), self.n_outputs))
        resid = np.asarray(q_mean, dtype=np.float64).reshape(self.n_inducing, self.n_outputs) - mean_z
        self.q_mean.value[...] = _solve_lower(lz, resid)
        for h, cov in enumerate(q_covs):
            cov = np.asarray(cov, dtype=np.float64)
            ls = tg.evaluate(tg.safe_cholesky(tg.constant(cov)).lower)
            factor = _solve_lower(lz, ls)
            raw = np.tril(factor, -1)
            raw[np.diag_indices_from(raw)] = np.log(np.diagonal(factor))
            self.q_scale_raw[h].value[...] = raw

    def variational_parameters(self):
        """Current q(u) means and covariances in the direct parameterization."""
        lz = tg.evaluate(self._prior_factor())
        mean_z = tg.evaluate(self.mean_fn(tg.constant(self.inducing.value), self.n_outputs))
        r = mean_z + lz @ self.q_mean.value
        covs = []
        for h in range(self.n_outputs):
            ls = lz @ tg.evaluate(self.scale_factor(h))
            covs.append(ls @ ls.T)
        return r, covs

    def common_nodes(self):
        """Per-step nodes shared by the marginals and the KL term."""
        kzz = self.kernel.matrix(self.inducing)
        lz = tg.safe_cholesky(kzz).lower
        scales = [self.scale_factor(h) for h in range(self.n_outputs)]
        ps = [tg.matmul(s, tg.transpose(s)) for s in scales]
        return {"lz": lz, "scales": scales, "ps": ps}

    def marginal_nodes(self, x, common=None):
        """Graph nodes for predictive mean (n, H) and variance (n, H) at ``x``.

        With a = Lz^-1 k(Z, x): mu = m(x) + a^T r, var = k(x, x) - ||a||^2
        + a^T L L^T a, which is the standard sparse predictive written in
        whitened coordinates.
        """
        x = tg.as_tensor(x)
        common = common or self.common_nodes()
        kzx = self.kernel.matrix(self.inducing, x)
        a = tg.triangular_solve(common["lz"], kzx, lower=True)
        mu = tg.add(self.mean_fn(x, self.n_outputs), tg.matmul(tg.transpose(a), self.q_mean))
        base = tg.sub(self.kernel.diag(x), tg.col_sumsq(a))
        var_cols = [tg.add(base, tg.quadratic_diag(p, a)) for p in common["ps"]]
        var = var_cols[0] if self.n_outputs == 1 else tg.concat(var_cols, axis=1)
        return mu, tg.clip_min(var, VAR_FLOOR)

    def prior_kl(self, common=None):
        """Sum over outputs of KL[q(u_h) || p(u_h)]; closed form N(r, S) vs N(0, I)."""
        common = common or self.common_nodes()
        quad_all = tg.col_sumsq(self.q_mean)
        total = None
        for h in range(self.n_outputs):
            trace = tg.reduce_sum(tg.diag_part(common["ps"][h]))
            quad = tg.matmul(tg.constant(_unit_column(self.n_outputs, h).T), quad_all)
            logdet_s = tg.reduce_sum(tg.log(tg.diag_part(common["scales"][h])))
            term = tg.sub(
                tg.sub(tg.mul(0.5, tg.add(trace, tg.reduce_sum(quad))), tg.constant(0.5 * self.n_inducing)),
                logdet_s,
            )
            total = term if total is None else tg.add(total, term)
        return total


def _unit_column(n, h):
    e = np.zeros((n, 1))
    e[h, 0] = 1.0
    return e


def _solve_lower(lower, b):
    from scipy.linalg import solve_triangular

    return solve_triangular(lower, b, lower=True, check_finite=False)


def predictive_marginals(layer, x):
    """Predictive q(f(x)) means and variances as plain arrays."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.input_dim:
        raise ContractError(f"expected (n, {layer.input_dim}) inputs, got {x.shape}")
    mu, var = layer.marginal_nodes(tg.constant(x))
    return MarginalGaussians(mean=tg.evaluate(mu).copy(), variance=tg.evaluate(var).copy())


def exact_gp_oracle(x_train, y_train, kernel, noise_variance, x_test):
    """Dense-GP predictive mean and variance; the closed-form reference."""
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64).reshape(-1)
    x_test = np.asarray(x_test, dtype=np.float64)
    n = x_train.shape[0]
    if n > 2000:
        raise ContractError(f"exact oracle limited to 2000 points, got {n}")
    k_nn = tg.evaluate(kernel.matrix(tg.constant(x_train)))
    k_sn = tg.evaluate(kernel.matrix(tg.constant(x_test), tg.constant(x_train)))
    k_ss = tg.evaluate(kernel.diag(tg.constant(x_test))).reshape(-1)
    gram = k_nn + noise_variance * np.eye(n)
    try:
        factor = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as err:
        from .errors import DecompositionError

        raise DecompositionError(
            "exact GP gram matrix not positive definite",
            diagnostics={"noise_variance": noise_variance, "n": n},
        ) from err
    alpha = np.linalg.solve(factor.T, np.linalg.solve(factor, y_train))
    mean = k_sn @ alpha
    w = np.linalg.solve(factor, k_sn.T)
    variance = k_ss - np.sum(w * w, axis=0)
    return MarginalGaussians(mean=mean.reshape(-1, 1), variance=variance.reshape(-1, 1))


def exact_log_marginal(x_train, y_train, kernel, noise_variance):
    """log N(y | 0, K + s2 I); oracle for ELBO upper-bound checks."""
    x_train = np.asarray(x_train, dtype=np.float64)
    y = np.asarray(y_train, dtype=np.float64).reshape(-1)
    n = x_train.shape[0]
    gram = tg.evaluate(kernel.matrix(tg.constant(x_train))) + noise_variance * np.eye(n)
    factor = np.linalg.cholesky(gram)
    alpha = np.linalg.solve(factor.T, np.linalg.solve(factor, y))
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diagonal(factor))) - 0.5 * n * LOG_2PI)


def titsias_optimal_q(layer_kernel, z, x, y, noise_variance):
    """Closed-form optimal q(u) for fixed hyperparameters (testing oracle).

    Returns (r, S) with S = Kzz Sigma^-1 Kzz and r = (1/s2) Kzz Sigma^-1 Kzn y,
    Sigma = Kzz + (1/s2) Kzn Knz.
    """
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    kzz = tg.evaluate(layer_kernel.matrix(tg.constant(z)))
    kzn = tg.evaluate(layer_kernel.matrix(tg.constant(z), tg.constant(x)))
    sigma = kzz + (kzn @ kzn.T) / noise_variance
    sigma_inv_kzz = np.linalg.solve(sigma, kzz)
    s_opt = kzz @ sigma_inv_kzz
    r_opt = (kzz @ np.linalg.solve(sigma, kzn @ y)) / noise_variance
    s_opt = 0.5 * (s_opt + s_opt.T)
    return r_opt, s_opt


def gaussian_expected_log_lik(y, mu, var, log_noise):
    """E_{N(f|mu,var)}[log N(y | f, s2)] elementwise, s2 = exp(log_noise)."""
    sig2 = tg.exp(log_noise)
    resid = tg.square(tg.sub(tg.as_tensor(y), mu))
    quad = tg.div(tg.add(resid, var), tg.mul(2.0, sig2))
    return tg.sub(tg.mul(-0.5, tg.add(tg.constant(LOG_2PI), log_noise)), quad)


def svgp_elbo(layer, x_batch, y_batch, mask_batch, n_total):
    """Mini-batch evidence lower bound with a missing-cell observation mask.

    mask_batch marks MISSING cells (True = unobserved); only observed cells
    contribute likelihood. The data term is rescaled by n_total / batch.
    """
    x_batch = np.asarray(x_batch, dtype=np.float64)
    n = x_batch.shape[0]
    if n_total < n:
        raise ContractError(f"n_total={n_total} smaller than batch size {n}")
    observed = ~np.asarray(mask_batch, dtype=bool)
    y_clean = np.where(observed, np.asarray(y_batch, dtype=np.float64), 0.0)
    common = layer.common_nodes()
    mu, var = layer.marginal_nodes(tg.constant(x_batch), common)
    ll = gaussian_expected_log_lik(tg.constant(y_clean), mu, var, _noise_row(layer))
    data_term = tg.reduce_sum(tg.mul(tg.constant(observed.astype(np.float64)), ll))
    return tg.sub(tg.mul(float(n_total) / n, data_term), layer.prior_kl(common))


def _noise_row(layer):
    if layer.log_noise is None:
        raise ContractError("layer has no likelihood noise")
    return tg.Tensor(
        layer.log_noise.value.reshape(1, -1),
        op="reshape",
        inputs=(layer.log_noise,),
        vjps=(lambda g: g.reshape(-1),),
    )


def init_inducing(x, m, rng):
    """Subsample M distinct rows; reuse jittered rows when fewer exist."""
    x = np.asarray(x, dtype=np.float64)
    distinct = np.unique(x, axis=0)
    if distinct.shape[0] >= m:
        idx = rng.choice(distinct.shape[0], size=m, replace=False)
        return distinct[np.sort(idx)]
    reps = rng.choice(distinct.shape[0], size=m - distinct.shape[0], replace=True)
    extra = distinct[reps] + 1e-3 * rng.standard_normal((len(reps), x.shape[1]))
    return np.vstack([distinct, extra])


@dataclass
class FitResult:
    model: object
    elbo_trace: list


def _check_finite(value, iteration, params):
    if np.isfinite(value):
        return
    snapshot = {
        "iteration": iteration,
        "objective": float(value),
        "param_norms": {i: float(np.linalg.norm(p.value)) for i, p in enumerate(params)},
    }
    raise TrainingDivergedError("objective became non-finite", snapshot=snapshot)


def fit_svgp(x_hat, mask, config=None, n_outputs=None):
    """Train a multi-output layer mapping the attributes to themselves.

    ``x_hat`` is the standardized training matrix with missing cells already
    mean-imputed; ``mask`` marks the missing cells so they are excluded from
    the likelihood. Returns the trained layer and the ELBO trace.
    """
    config = config or TrainConfig()
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x_hat.size == 0:
        raise ContractError("empty dataset")
    mask = np.asarray(mask, dtype=bool)
    n, d = x_hat.shape
    n_outputs = n_outputs or d
    rng = np.random.default_rng(config.seed)
    m = min(config.num_inducing, n)
    kernel = RbfArdKernel(d)
    layer = SparseGPLayer(kernel, init_inducing(x_hat, m, rng), n_outputs)
    params = layer.params()
    opt = Adam(params, lr=config.learning_rate)
    iters = config.resolved_iterations(n)
    batch = min(config.batch_size, n)
    trace = []
    with tg.fast_solves():
        for it in range(iters):
            rows = rng.choice(n, size=batch, replace=False)
            elbo = svgp_elbo(layer, x_hat[rows], x_hat[rows], mask[rows], n)
            value = float(tg.evaluate(elbo))
            _check_finite(value, it, params)
            grads = tg.gradient(tg.neg(elbo), params)
            opt.step(grads)
            if it % config.log_every == 0 or it == iters - 1:
                trace.append((it, value))
                log.debug("svgp iter %d elbo %.4f", it, value)
    return FitResult(model=layer, elbo_trace=trace)


def svgp_impute(layer, x_hat, mask):
    """Fill missing cells with predictive means; returns (completed, cells).

    ``cells`` lists (row, col, mean, variance) for every imputed cell, with
    variance including the likelihood noise of that output.
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    completed = x_hat.copy()
    cells = []
    if not mask.any():
        return completed, cells
    marg = predictive_marginals(layer, x_hat)
    noise = np.exp(layer.log_noise.value) if layer.log_noise is not None else np.zeros(layer.n_outputs)
    rows, cols = np.nonzero(mask)
    completed[rows, cols] = marg.mean[rows, cols]
    for r, c in zip(rows.tolist(), cols.tolist()):
        cells.append((r, c, float(marg.mean[r, c]), float(marg.variance[r, c] + noise[c])))
    return completed, cells
