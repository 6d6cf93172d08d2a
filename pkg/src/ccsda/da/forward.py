"""Forward models seen by the assimilation engines.

Both adapters map a list of parameter realizations to a matrix of predicted
observations (one time-major row per member) and count every evaluation at
the call site. Only the surrogate adapter can pull an observation-space
adjoint back to log-permeability.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

import numpy as np

from ..geomodel import FieldRealization
from ..simulator import (InjectionSchedule, SimConfig, SimulationError, StateTrajectory, observe,
                         run_forward)
from ..surrogate.fno import SurrogateError
from ..surrogate.model import SurrogateModel

LOG_PERM_BOUNDS = (float(np.log(0.01)), float(np.log(20000.0)))


class ForwardModelError(RuntimeError):
    def __init__(self, message: str, member: int | None = None):
        super().__init__(message)
        self.member = member


def clamp_log_perm(m: np.ndarray) -> np.ndarray:
    return np.clip(m, *LOG_PERM_BOUNDS)


class ForwardModel:
    """Common interface: ``evaluate`` members -> (n_members, n_obs) predictions."""

    kind = "abstract"
    provides_input_gradients = False

    def __init__(self, monitor_cells, times):
        self.monitor_cells = [tuple(int(v) for v in c) for c in monitor_cells]
        self.times = [int(t) for t in times]
        self.calls = 0
        self.gradient_calls = 0

    @property
    def n_obs(self) -> int:
        return len(self.times) * len(self.monitor_cells)

    def evaluate(self, members: Sequence[FieldRealization]) -> np.ndarray:
        raise NotImplementedError

    def linearize(self, members: Sequence[FieldRealization]) -> tuple[np.ndarray, Callable]:
        """Predictions plus a pullback mapping (n, n_obs) adjoints to (n, n_cells) gradients."""
        raise ForwardModelError(
            f"the {self.kind} forward model provides no input gradients; "
            "gradient-based assimilation needs the surrogate-backed path (sh-rml)")


def _simulate_member(args) -> np.ndarray:
    fields, cfg, cells, times = args
    return observe(run_forward(fields, cfg), cells, times).ravel()


class HighFidelityForward(ForwardModel):
    """Finite-volume simulator followed by the monitor-point observation operator."""

    kind = "hf"

    def __init__(self, cfg: SimConfig, monitor_cells, times, workers: int = 1):
        super().__init__(monitor_cells, times)
        self.cfg = cfg
        self.workers = max(1, int(workers))

    def trajectory(self, fields: FieldRealization) -> StateTrajectory:
        self.calls += 1
        return run_forward(fields, self.cfg)

    def evaluate(self, members: Sequence[FieldRealization]) -> np.ndarray:
        jobs = [(m, self.cfg, self.monitor_cells, self.times) for m in members]
        self.calls += len(jobs)
        if self.workers == 1 or len(jobs) < 2:
            rows = []
            for i, job in enumerate(jobs):
                try:
                    rows.append(_simulate_member(job))
                except SimulationError as exc:
                    raise ForwardModelError(f"member {i}: {exc}", member=i) from exc
            return np.array(rows).reshape(len(jobs), self.n_obs)
        with ProcessPoolExecutor(self.workers) as pool:
            try:
                rows = list(pool.map(_simulate_member, jobs))
            except SimulationError as exc:
                raise ForwardModelError(f"simulation failed: {exc}") from exc
        return np.array(rows).reshape(len(jobs), self.n_obs)


class SurrogateForward(ForwardModel):
    """Trained FNO evaluated only at the monitor columns."""

    kind = "surrogate"
    provides_input_gradients = True

    def __init__(self, model: SurrogateModel, schedule: InjectionSchedule, monitor_cells, times,
                 batch_size: int = 8):
        super().__init__(monitor_cells, times)
        if max(self.times) >= model.nt:
            raise ValueError(f"observation frame {max(self.times)} beyond surrogate horizon {model.nt}")
        self.model = model
        self.schedule = schedule
        self.batch_size = batch_size

    def _inputs(self, members: Sequence[FieldRealization]) -> np.ndarray:
        return self.model.encode_batch(members, self.schedule)

    def _run(self, members, keep_tape):
        x = self._inputs(members)
        try:
            pred, tape = self.model.observe(x, self.monitor_cells, self.times, keep_tape=keep_tape)
        except SurrogateError as exc:
            raise ForwardModelError(f"surrogate evaluation failed: {exc}") from exc
        return pred.reshape(len(members), self.n_obs), tape

    def evaluate(self, members: Sequence[FieldRealization]) -> np.ndarray:
        self.calls += len(members)
        chunks = [self._run(members[i:i + self.batch_size], False)[0]
                  for i in range(0, len(members), self.batch_size)]
        return np.concatenate(chunks) if chunks else np.empty((0, self.n_obs))

    def linearize(self, members: Sequence[FieldRealization]) -> tuple[np.ndarray, Callable]:
        """Single-batch linearization; callers chunk large ensembles themselves."""
        self.calls += len(members)
        pred, tape = self._run(members, True)
        n_t, n_c = len(self.times), len(self.monitor_cells)

        def pullback(adjoint: np.ndarray) -> np.ndarray:
            self.gradient_calls += len(members)
            adj = np.asarray(adjoint, dtype=float).reshape(len(members), n_t, n_c)
            grad = self.model.observe_grad(tape, self.monitor_cells, self.times, adj)
            return grad.reshape(len(members), -1)

        return pred, pullback
