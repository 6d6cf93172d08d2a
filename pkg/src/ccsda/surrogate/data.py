"""Input encoding, normalization and dataset assembly for the surrogate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geomodel import FieldRealization, GridSpec
from ..simulator import InjectionSchedule, StateTrajectory

IN_CHANNELS = ("log_perm", "porosity", "rate", "x", "y", "t")
OUT_CHANNELS = ("pressure", "co2_fraction")


def frame_rates(schedule: InjectionSchedule, nt: int) -> np.ndarray:
    """Rate attached to each of the ``nt`` frames.

    Frame ``j >= 1`` carries the rate of the step that ends at it; frame 0
    carries the first rate. A schedule already of length ``nt`` is used as is.
    """
    rates = schedule.as_array()
    if len(rates) == nt:
        return rates
    if len(rates) != nt - 1:
        raise ValueError(f"schedule has {len(rates)} rates, expected {nt - 1} or {nt}")
    return np.concatenate([rates[:1], rates])


def encode_input(fields: FieldRealization, schedule: InjectionSchedule, grid: GridSpec,
                 n_steps: int) -> np.ndarray:
    """(6, nx, ny, nt) tensor of (log_perm, porosity, q, x, y, t), nt = n_steps + 1.

    Static rasters are copied along t, the rate is copied over every cell and
    coordinates are scaled to [0, 1]. Tensor axis order is (x, y, t) while
    rasters are (y, x), so ``enc[0, :, :, 0] == fields.log_perm.T``.
    """
    if fields.grid.shape != grid.shape:
        raise ValueError(f"field grid {fields.grid.shape} does not match {grid.shape}")
    nt = n_steps + 1
    nx, ny = grid.nx, grid.ny
    q = frame_rates(schedule, nt)
    out = np.empty((6, nx, ny, nt))
    out[0] = fields.log_perm.T[:, :, None]
    out[1] = fields.porosity.T[:, :, None]
    out[2] = q[None, None, :]
    out[3] = (np.arange(nx) / (nx - 1))[:, None, None]
    out[4] = (np.arange(ny) / (ny - 1))[None, :, None]
    out[5] = (np.arange(nt) / (nt - 1))[None, None, :]
    return out


def encode_target(traj: StateTrajectory) -> np.ndarray:
    """(2, nx, ny, nt) tensor of pressure and CO2 fraction."""
    return np.stack([traj.pressure, traj.co2_fraction]).transpose(0, 3, 2, 1)


def decode_target(tensor: np.ndarray) -> StateTrajectory:
    arr = np.asarray(tensor).transpose(0, 3, 2, 1)
    return StateTrajectory(arr[0], arr[1])


@dataclass
class Normalizer:
    """Z-score of (N, C, ...) tensors.

    Statistics are either per channel (``mean.shape == (C,)``) or pointwise
    (``mean.shape == (C, ...)``, one value per channel, cell and frame).
    Pointwise statistics leave the network only the deviation from the
    ensemble-mean trajectory to learn.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray, pointwise: bool = False) -> "Normalizer":
        axes = (0,) if pointwise else (0,) + tuple(range(2, data.ndim))
        data = np.asarray(data, dtype=float)
        mean = data.mean(axis=axes)
        std = data.std(axis=axes)
        if pointwise:
            # nearly constant cells (far-field fraction) would otherwise dominate the loss
            peak = std.reshape(len(std), -1).max(axis=1)
            floor = 0.1 * peak.reshape((-1,) + (1,) * (std.ndim - 1))
            std = np.maximum(std, floor)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    @property
    def pointwise(self) -> bool:
        return self.mean.ndim > 1

    def _shape(self, ndim: int, channel_axis: int) -> tuple:
        if self.pointwise:
            return self.mean.shape
        shape = [1] * ndim
        shape[channel_axis] = -1
        return tuple(shape)

    def normalize(self, data: np.ndarray, channel_axis: int = 1) -> np.ndarray:
        s = self._shape(data.ndim, channel_axis)
        return (data - self.mean.reshape(s)) / self.std.reshape(s)

    def denormalize(self, data: np.ndarray, channel_axis: int = 1) -> np.ndarray:
        s = self._shape(data.ndim, channel_axis)
        return data * self.std.reshape(s) + self.mean.reshape(s)


@dataclass
class Dataset:
    """Normalized (input, target) pairs plus the split and normalization."""

    inputs: np.ndarray
    targets: np.ndarray
    in_norm: Normalizer
    out_norm: Normalizer
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.inputs)


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < fraction < 1.0:
        raise ValueError("split fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = max(1, min(n - 1, int(round(fraction * n))))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def build_dataset(raw_inputs: np.ndarray, raw_targets: np.ndarray, split_fraction: float = 0.8,
                  seed: int = 0, dtype=np.float32) -> Dataset:
    """Normalize raw (N, 6, ...) inputs and (N, 2, ...) targets.

    Statistics come from the training split only; inputs are scaled per
    channel and targets pointwise.
    """
    raw_inputs = np.asarray(raw_inputs)
    raw_targets = np.asarray(raw_targets)
    if len(raw_inputs) != len(raw_targets):
        raise ValueError("inputs and targets are not aligned")
    train_idx, test_idx = split_indices(len(raw_inputs), split_fraction, seed)
    in_norm = Normalizer.fit(raw_inputs[train_idx])
    out_norm = Normalizer.fit(raw_targets[train_idx], pointwise=True)
    return Dataset(
        inputs=in_norm.normalize(raw_inputs).astype(dtype),
        targets=out_norm.normalize(raw_targets).astype(dtype),
        in_norm=in_norm, out_norm=out_norm, train_idx=train_idx, test_idx=test_idx,
    )
