"""Randomized maximum likelihood with surrogate gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from ..geomodel import Ensemble, FieldRealization
from ..simulator import ObservationSet
from .diagnostics import DaDiagnostics
from .esmda import SMALL_ENSEMBLE, perturb_observations
from .forward import LOG_PERM_BOUNDS, ForwardModel, ForwardModelError

DATA_COVARIANCES = ("measurement", "ensemble")


@dataclass(frozen=True)
class RmlConfig:
    n_opt_steps: int = 200
    lr: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    corr_length: float | None = None        # cells; fitted to the prior when None
    variance: float | None = None           # fitted to the prior when None
    nugget: float = 0.05                    # fraction of the variance added to the diagonal
    data_covariance: str = "measurement"
    noise_std: float | None = None
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.n_opt_steps < 0:
            raise ValueError("n_opt_steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.corr_length is not None and self.corr_length <= 0:
            raise ValueError("corr_length must be positive")
        if self.variance is not None and self.variance <= 0:
            raise ValueError("variance must be positive")
        if self.nugget <= 0:
            raise ValueError("nugget must be positive")
        if self.data_covariance not in DATA_COVARIANCES:
            raise ValueError(f"data_covariance must be one of {DATA_COVARIANCES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class GaussianKernelCovariance:
    """``variance * (exp(-d^2 / (2 L^2)) + nugget * I)`` over grid cells.

    The inverse is applied through a precomputed eigendecomposition.
    """

    def __init__(self, shape: tuple[int, int], corr_length: float, variance: float, nugget: float):
        if corr_length <= 0 or variance <= 0 or nugget <= 0:
            raise ValueError("correlation length, variance and nugget must be positive")
        ny, nx = shape
        self.shape = (ny, nx)
        self.corr_length = float(corr_length)
        self.variance = float(variance)
        self.nugget = float(nugget)
        iy, ix = np.divmod(np.arange(nx * ny), nx)
        d2 = (ix[:, None] - ix[None, :]) ** 2 + (iy[:, None] - iy[None, :]) ** 2
        kernel = np.exp(-0.5 * d2 / corr_length ** 2)
        vals, vecs = np.linalg.eigh(kernel)
        # the kernel is PSD; rounding can leave tiny negative eigenvalues
        self.eigvals = variance * (np.clip(vals, 0.0, None) + nugget)
        self.eigvecs = vecs

    def matrix(self) -> np.ndarray:
        return (self.eigvecs * self.eigvals) @ self.eigvecs.T

    def solve(self, r: np.ndarray) -> np.ndarray:
        """``C^-1 r`` for rows of ``r``."""
        return ((r @ self.eigvecs) / self.eigvals) @ self.eigvecs.T


def empirical_correlogram(params: np.ndarray, shape: tuple[int, int], max_lag: int) -> np.ndarray:
    """Mean axis-aligned correlation of the ensemble anomalies at lags 0..max_lag."""
    ny, nx = shape
    a = (params - params.mean(axis=0)).reshape(len(params), ny, nx)
    var = float(np.mean(a * a))
    rho = [1.0]
    for h in range(1, max_lag + 1):
        cx = np.mean(a[:, :, h:] * a[:, :, :-h])
        cy = np.mean(a[:, h:, :] * a[:, :-h, :])
        rho.append(0.5 * (cx + cy) / var)
    return np.array(rho)


def fit_prior_covariance(prior: Ensemble, nugget: float, corr_length: float | None = None,
                         variance: float | None = None, max_lag: int = 8) -> GaussianKernelCovariance:
    params = prior.log_perm_matrix()
    shape = prior.grid.shape
    if variance is None:
        variance = float(np.mean(np.var(params, axis=0, ddof=1)))
        if variance <= 0:
            raise ValueError("prior ensemble has no spread; pass an explicit variance")
    if corr_length is None:
        max_lag = min(max_lag, min(shape) - 1)
        rho = empirical_correlogram(params, shape, max_lag)
        lags = np.arange(max_lag + 1)

        def misfit(length):
            return float(np.sum((rho - np.exp(-0.5 * lags ** 2 / length ** 2)) ** 2))

        corr_length = float(minimize_scalar(misfit, bounds=(0.3, float(max(shape))),
                                            method="bounded").x)
    return GaussianKernelCovariance(shape, corr_length, variance, nugget)


def data_precision(obs: ObservationSet, noise_std: float, mode: str,
                   predictions: np.ndarray | None = None) -> np.ndarray:
    """Inverse data covariance for the cost's data term."""
    n = obs.n_obs
    c_d = noise_std ** 2 * np.eye(n)
    if mode == "measurement":
        return np.eye(n) / noise_std ** 2
    if predictions is None or len(predictions) < 2:
        raise ValueError("ensemble data covariance needs prior predictions of >= 2 members")
    dd = predictions - predictions.mean(axis=0)
    # the sample covariance alone is rank deficient; measurement noise keeps it invertible
    c = dd.T @ dd / (len(predictions) - 1) + c_d
    return np.linalg.inv(0.5 * (c + c.T))


def _batch_cost(params, prior_params, targets, forward: ForwardModel, templates, cov,
                precision, with_grad: bool, scale: float = 1.0):
    members = [t.with_log_perm(p) for t, p in zip(templates, params)]
    delta = params - prior_params
    c_inv_delta = cov.solve(delta)
    prior_term = np.einsum("ij,ij->i", delta, c_inv_delta)
    if with_grad:
        pred, pullback = forward.linearize(members)
    else:
        pred = forward.evaluate(members)
    resid = pred - targets
    p_resid = resid @ precision
    cost = scale * (prior_term + np.einsum("ij,ij->i", resid, p_resid))
    if not with_grad:
        return cost, None
    grad = scale * (2.0 * c_inv_delta + pullback(2.0 * p_resid))
    return cost, grad


def rml_cost(m: np.ndarray, m_prior: np.ndarray, d_target: np.ndarray, forward: ForwardModel,
             template: FieldRealization, cov: GaussianKernelCovariance, precision: np.ndarray,
             with_grad: bool = True, scale: float = 1.0) -> tuple[float, np.ndarray | None]:
    """Prior-plus-data cost of one member and its gradient in log-perm.

    ``J = (m - m_prior)' C_MM^-1 (m - m_prior) + (G(m) - d)' P (G(m) - d)``,
    multiplied by ``scale``.
    """
    if with_grad and not forward.provides_input_gradients:
        forward.linearize([])          # raises with guidance
    cost, grad = _batch_cost(np.asarray(m, float)[None], np.asarray(m_prior, float)[None],
                             np.asarray(d_target, float)[None], forward, [template], cov,
                             precision, with_grad, scale)
    return float(cost[0]), (grad[0] if grad is not None else None)


class _BatchAdam:
    """Adam over rows of a matrix; each row is an independent problem."""

    def __init__(self, shape, lr, betas, eps):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, x, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _optimize(prior: Ensemble, targets: np.ndarray, forward: ForwardModel, cov, precision,
              cfg: RmlConfig, diag: DaDiagnostics) -> tuple[np.ndarray, np.ndarray]:
    """Adam per member; returns the lowest-cost iterate of each member and cost histories."""
    prior_params = prior.log_perm_matrix()
    n = len(prior)
    best = prior_params.copy()
    history = np.full((n, cfg.n_opt_steps + 1), np.nan)
    for start in range(0, n, cfg.batch_size):
        rows = np.arange(start, min(n, start + cfg.batch_size))
        templates = [prior.members[i] for i in rows]
        x = prior_params[rows].copy()
        opt = _BatchAdam(x.shape, cfg.lr, cfg.adam_betas, cfg.adam_eps)
        best_cost = np.full(len(rows), np.inf)
        alive = np.ones(len(rows), dtype=bool)
        for step in range(cfg.n_opt_steps + 1):
            last = step == cfg.n_opt_steps
            cost, grad = _batch_cost(x, prior_params[rows], targets[rows], forward, templates,
                                     cov, precision, with_grad=not last)
            bad = ~np.isfinite(cost) | (~np.all(np.isfinite(grad), axis=1) if grad is not None
                                        else False)
            alive &= ~bad
            history[rows[alive], step] = cost[alive]
            improved = alive & (cost < best_cost)
            best_cost[improved] = cost[improved]
            best[rows[improved]] = x[improved]
            if last:
                break
            step_x = np.clip(opt.step(x, np.where(alive[:, None], grad, 0.0)), *LOG_PERM_BOUNDS)
            x = np.where(alive[:, None], step_x, x)
        for i in rows[~alive]:
            diag.flagged_members.append(int(i))
            diag.warn(f"member {int(i)}: non-finite cost, excluded from posterior")
    return best, history


def run_rml(prior: Ensemble, obs: ObservationSet, forward_with_grad: ForwardModel, cfg: RmlConfig,
            hf_forward: ForwardModel | None = None,
            method: str = "rml") -> tuple[Ensemble, DaDiagnostics]:
    """Per-member minimization of the RML cost with Adam.

    Prior and posterior predictions are computed with ``hf_forward`` when
    given, otherwise with ``forward_with_grad``.
    """
    if not forward_with_grad.provides_input_gradients:
        forward_with_grad.linearize([])  # raises with guidance
    if len(prior) < 1:
        raise ValueError("empty prior ensemble")
    checker = hf_forward or forward_with_grad
    for fwd in {id(forward_with_grad): forward_with_grad, id(checker): checker}.values():
        if fwd.monitor_cells != obs.monitor_cells or fwd.times != obs.times:
            raise ValueError(f"{fwd.kind} forward model observes different cells/times than the data")
    noise_std = cfg.noise_std if cfg.noise_std is not None else obs.noise_std
    diag = DaDiagnostics(method, obs.monitor_cells, obs.times, obs.vector)
    if len(prior) < SMALL_ENSEMBLE:
        diag.warn(f"ensemble of {len(prior)} members: fitted prior covariance is unreliable")
    reporter = hf_forward or forward_with_grad

    def evaluate(ens: Ensemble, phase: str) -> np.ndarray:
        before = reporter.calls
        with diag.timed(phase):
            pred = reporter.evaluate(ens.members)
        diag.forward_calls[reporter.kind] = diag.forward_calls.get(reporter.kind, 0) \
            + reporter.calls - before
        return pred

    diag.prior_predictions = evaluate(prior, f"prior_{reporter.kind}")
    with diag.timed("setup"):
        cov = fit_prior_covariance(prior, cfg.nugget, cfg.corr_length, cfg.variance)
        precision = data_precision(obs, noise_std, cfg.data_covariance, diag.prior_predictions)
        targets = np.stack([perturb_observations(obs.vector, noise_std, 1.0, [cfg.seed, j])
                            for j in range(len(prior))])
    before_calls, before_grads = forward_with_grad.calls, forward_with_grad.gradient_calls
    with diag.timed(f"optimize_{forward_with_grad.kind}"):
        best, history = _optimize(prior, targets, forward_with_grad, cov, precision, cfg, diag)
    diag.forward_calls[forward_with_grad.kind] = diag.forward_calls.get(forward_with_grad.kind, 0) \
        + forward_with_grad.calls - before_calls
    diag.gradient_calls += forward_with_grad.gradient_calls - before_grads
    diag.cost_history = history
    keep = [i for i in range(len(prior)) if i not in set(diag.flagged_members)]
    posterior = Ensemble([prior.members[i].with_log_perm(best[i]) for i in keep],
                         dict(prior.metadata),
                         prior.history + [f"{method} n_opt_steps={cfg.n_opt_steps}"])
    diag.posterior_members = keep
    if keep:
        diag.posterior_predictions = evaluate(posterior, f"posterior_{reporter.kind}")
    return posterior, diag


def run_sh_rml(prior: Ensemble, obs: ObservationSet, surrogate_with_grad: ForwardModel,
               hf_forward: ForwardModel, cfg: RmlConfig) -> tuple[Ensemble, DaDiagnostics]:
    """Optimization against the surrogate, prior and posterior states from the simulator."""
    return run_rml(prior, obs, surrogate_with_grad, cfg, hf_forward=hf_forward, method="sh-rml")
