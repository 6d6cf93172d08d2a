"""Ensemble smoother with multiple data assimilation, plain and surrogate-assisted."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..geomodel import Ensemble
from ..simulator import ObservationSet
from .diagnostics import DaDiagnostics
from .forward import LOG_PERM_BOUNDS, ForwardModel

SMALL_ENSEMBLE = 10


@dataclass(frozen=True)
class EsmdaConfig:
    n_assimilations: int = 4
    alphas: tuple[float, ...] | None = None
    noise_std: float | None = None
    svd_energy_cutoff: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.n_assimilations < 1:
            raise ValueError("n_assimilations must be >= 1")
        if self.noise_std is not None and self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        if not 0.0 < self.svd_energy_cutoff <= 1.0:
            raise ValueError("svd_energy_cutoff must lie in (0, 1]")
        alphas = self.alpha_schedule
        if min(alphas) <= 0:
            raise ValueError("inflation factors must be positive")
        total = float(np.sum(1.0 / np.asarray(alphas)))
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"inflation factors must satisfy sum(1/alpha) = 1, got {total!r}")

    @property
    def alpha_schedule(self) -> tuple[float, ...]:
        if self.alphas is None:
            return (float(self.n_assimilations),) * self.n_assimilations
        if len(self.alphas) != self.n_assimilations:
            raise ValueError(f"{len(self.alphas)} inflation factors for "
                             f"{self.n_assimilations} assimilations")
        return tuple(float(a) for a in self.alphas)


@dataclass
class UpdateWorkspace:
    """Covariances of one ensemble snapshot."""

    param_anomalies: np.ndarray
    data_anomalies: np.ndarray
    cross_cov: np.ndarray
    data_cov: np.ndarray
    retained_modes: int = 0

    @classmethod
    def from_ensemble(cls, params: np.ndarray, predictions: np.ndarray) -> "UpdateWorkspace":
        n = len(params)
        dm = params - params.mean(axis=0)
        dd = predictions - predictions.mean(axis=0)
        c_dd = dd.T @ dd / (n - 1)
        return cls(dm, dd, dm.T @ dd / (n - 1), 0.5 * (c_dd + c_dd.T))


@dataclass
class UpdateResult:
    params: np.ndarray
    workspace: UpdateWorkspace | None
    degenerate: bool = False
    warnings: list[str] = field(default_factory=list)


def perturb_observations(d_obs: np.ndarray, noise_std: float, alpha: float, seed) -> np.ndarray:
    """``d_obs + sqrt(alpha) * noise_std * z`` with ``z`` drawn from ``default_rng(seed)``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    d_obs = np.asarray(d_obs, dtype=float)
    z = np.random.default_rng(seed).standard_normal(d_obs.shape)
    return d_obs + np.sqrt(alpha) * noise_std * z


def perturbation_seed(base: int, iteration: int, member: int) -> list[int]:
    return [int(base), int(iteration), int(member)]


def truncated_inverse(matrix: np.ndarray, energy: float) -> tuple[np.ndarray, int]:
    """Pseudo-inverse of a symmetric PSD matrix keeping the leading eigenpairs
    that carry ``energy`` of the trace."""
    vals, vecs = np.linalg.eigh(matrix)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    vals = np.clip(vals, 0.0, None)
    total = vals.sum()
    if total <= 0:
        return np.zeros_like(matrix), 0
    keep = int(np.searchsorted(np.cumsum(vals) / total, energy - 1e-12) + 1)
    keep = min(keep, int(np.sum(vals > 0)))
    v = vecs[:, :keep]
    return (v / vals[:keep]) @ v.T, keep


def esmda_update(params: np.ndarray, predictions: np.ndarray, d_obs: np.ndarray, alpha: float,
                 noise_std: float, cfg: EsmdaConfig, iteration: int = 0,
                 bounds: tuple[float, float] | None = LOG_PERM_BOUNDS) -> UpdateResult:
    """One analysis step on the (n_members, n_params) matrix ``params``.

    ``predictions`` holds one observation-space row per member. Each member
    is pulled toward its own perturbed copy of ``d_obs``.
    """
    params = np.asarray(params, dtype=float)
    predictions = np.asarray(predictions, dtype=float)
    n = len(params)
    if n < 2:
        raise ValueError("ensemble update needs at least 2 members")
    if len(predictions) != n:
        raise ValueError(f"{len(predictions)} prediction rows for {n} members")
    if predictions.shape[1] != np.size(d_obs):
        raise ValueError("prediction width does not match the observation vector")
    ws = UpdateWorkspace.from_ensemble(params, predictions)
    if not np.any(ws.param_anomalies) or not np.any(ws.data_anomalies):
        return UpdateResult(params.copy(), ws, degenerate=True,
                            warnings=[f"iteration {iteration}: zero ensemble spread, update skipped"])
    perturbed = np.stack([perturb_observations(d_obs, noise_std, alpha,
                                               perturbation_seed(cfg.seed, iteration, j))
                          for j in range(n)])
    s = ws.data_cov + alpha * noise_std ** 2 * np.eye(ws.data_cov.shape[0])
    s_inv, ws.retained_modes = truncated_inverse(s, cfg.svd_energy_cutoff)
    gain = ws.cross_cov @ s_inv                                             # (n_params, n_obs)
    updated = params + (perturbed - predictions) @ gain.T
    if bounds is not None:
        updated = np.clip(updated, *bounds)
    return UpdateResult(updated, ws)


def _check_inputs(prior: Ensemble, obs: ObservationSet, forwards: Sequence[ForwardModel]) -> None:
    if len(prior) < 2:
        raise ValueError("ensemble methods need at least 2 members")
    for fwd in forwards:
        if fwd.monitor_cells != obs.monitor_cells or fwd.times != obs.times:
            raise ValueError(f"{fwd.kind} forward model observes different cells/times than the data")


def _count(diag: DaDiagnostics, fwd: ForwardModel, before: int) -> None:
    diag.forward_calls[fwd.kind] = diag.forward_calls.get(fwd.kind, 0) + fwd.calls - before


def _evaluate(diag: DaDiagnostics, fwd: ForwardModel, ens: Ensemble, phase: str) -> np.ndarray:
    before = fwd.calls
    with diag.timed(phase):
        pred = fwd.evaluate(ens.members)
    _count(diag, fwd, before)
    return pred


def _smoother(method: str, schedule: Sequence[ForwardModel], final: ForwardModel, prior: Ensemble,
              obs: ObservationSet, cfg: EsmdaConfig) -> tuple[Ensemble, DaDiagnostics]:
    _check_inputs(prior, obs, list(schedule) + [final])
    noise_std = cfg.noise_std if cfg.noise_std is not None else obs.noise_std
    alphas = cfg.alpha_schedule
    diag = DaDiagnostics(method, obs.monitor_cells, obs.times, obs.vector, alphas=list(alphas))
    if len(prior) < SMALL_ENSEMBLE:
        diag.warn(f"ensemble of {len(prior)} members: covariance estimates have rank <= "
                  f"{len(prior) - 1}")
    d_obs = obs.vector
    params = prior.log_perm_matrix()
    current = prior
    for i, (alpha, fwd) in enumerate(zip(alphas, schedule)):
        pred = _evaluate(diag, fwd, current, f"forecast_{fwd.kind}")
        if i == 0:
            diag.prior_predictions = pred
        with diag.timed("update"):
            res = esmda_update(params, pred, d_obs, alpha, noise_std, cfg, iteration=i)
        diag.warnings.extend(res.warnings)
        params = res.params
        current = prior.with_log_perm(params)
    posterior = prior.with_log_perm(params, note=f"{method} N_a={cfg.n_assimilations}")
    diag.posterior_predictions = _evaluate(diag, final, posterior, f"posterior_{final.kind}")
    return posterior, diag


def run_esmda(forward: ForwardModel, prior: Ensemble, obs: ObservationSet,
              cfg: EsmdaConfig) -> tuple[Ensemble, DaDiagnostics]:
    """Every forecast and the posterior recomputation use ``forward``."""
    return _smoother("esmda", [forward] * cfg.n_assimilations, forward, prior, obs, cfg)


def run_sh_esmda(hf_forward: ForwardModel, surrogate_forward: ForwardModel, prior: Ensemble,
                 obs: ObservationSet, cfg: EsmdaConfig) -> tuple[Ensemble, DaDiagnostics]:
    """High-fidelity first forecast and posterior, surrogate forecasts in between."""
    schedule = [hf_forward] + [surrogate_forward] * (cfg.n_assimilations - 1)
    return _smoother("sh-esmda", schedule, hf_forward, prior, obs, cfg)
