"""Trained surrogate bundle (weights + normalization) and its GCSW checkpoint."""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..geomodel import FieldRealization, GridSpec
from ..gcsf import FormatError
from ..simulator import InjectionSchedule, StateTrajectory
from .data import Normalizer, decode_target, encode_input
from .fno import FNO, FnoConfig, SurrogateWeights, parameter_names

GCSW_MAGIC = b"GCSW"
GCSW_VERSION = 1
_HEADER = struct.Struct("<4s16I")
_ACTIVATIONS = ("gelu", "relu")


class SurrogateModel:
    """FNO weights bound to a grid, a time axis and the training normalization.

    Inputs handed to the network are normalized tensors; everything returned
    to callers is in physical units (bar, molar fraction).
    """

    def __init__(self, weights: SurrogateWeights, in_norm: Normalizer, out_norm: Normalizer,
                 nt: int, dtype=np.float32):
        self.weights = weights
        self.config = weights.config
        self.in_norm = in_norm
        self.out_norm = out_norm
        self.nt = nt
        self.dtype = np.dtype(dtype)
        self._models: dict[tuple[int, int], FNO] = {}
        self._static: tuple = (None, None)
        # evaluation never updates the weights, so cast them to the compute precision once
        ctype = np.complex64 if self.dtype == np.float32 else np.complex128
        self._compute = SurrogateWeights(self.config, {
            k: v.astype(ctype if np.iscomplexobj(v) else self.dtype)
            for k, v in weights.params.items()})

    def _fno(self, nx: int, ny: int) -> FNO:
        key = (nx, ny)
        if key not in self._models:
            self._models[key] = FNO(self.config, (nx, ny, self.nt))
        return self._models[key]

    # -- encoding ----------------------------------------------------------

    def encode(self, fields: FieldRealization, schedule: InjectionSchedule) -> np.ndarray:
        """Normalized (6, nx, ny, nt) network input."""
        return self.encode_batch([fields], schedule)[0]

    def encode_batch(self, members, schedule: InjectionSchedule) -> np.ndarray:
        """Normalized (B, 6, nx, ny, nt) inputs for several realizations.

        The rate and coordinate channels are the same for every member and are
        normalized once per grid and schedule.
        """
        grid = members[0].grid
        key = (grid.shape, tuple(schedule.as_array()))
        if self._static[0] != key:
            raw = encode_input(members[0], schedule, grid, self.nt - 1)
            self._static = (key, self.in_norm.normalize(raw, channel_axis=0).astype(self.dtype))
        static = self._static[1]
        out = np.empty((len(members),) + static.shape, self.dtype)
        out[:, 2:] = static[2:]
        mean, std = self.in_norm.mean, self.in_norm.std
        for b, m in enumerate(members):
            if m.grid.shape != grid.shape:
                raise ValueError(f"field grid {m.grid.shape} does not match {grid.shape}")
            out[b, 0] = ((m.log_perm.T - mean[0]) / std[0]).astype(self.dtype)[:, :, None]
            out[b, 1] = ((m.porosity.T - mean[1]) / std[1]).astype(self.dtype)[:, :, None]
        return out

    def set_log_perm(self, inputs: np.ndarray, log_perm: np.ndarray) -> None:
        """Overwrite the log-perm channel of normalized ``inputs`` in place.

        ``inputs`` is (B, 6, nx, ny, nt) and ``log_perm`` is (B, ny, nx).
        """
        lp = (np.asarray(log_perm).transpose(0, 2, 1) - self.in_norm.mean[0]) / self.in_norm.std[0]
        inputs[:, 0] = lp[..., None]

    # -- prediction --------------------------------------------------------

    def predict_normalized(self, inputs: np.ndarray, batch_size: int = 8) -> np.ndarray:
        model = self._fno(*inputs.shape[2:4])
        outs = [model.forward(self._compute, inputs[i:i + batch_size], dtype=self.dtype)[0]
                for i in range(0, len(inputs), batch_size)]
        return np.concatenate(outs)

    def predict(self, fields: FieldRealization, schedule: InjectionSchedule) -> StateTrajectory:
        x = self.encode(fields, schedule)[None]
        out = self.predict_normalized(x).astype(float)
        return decode_target(self.out_norm.denormalize(out)[0])

    def observe(self, inputs: np.ndarray, cells, frames, keep_tape: bool = False):
        """Predicted pressure at ``cells`` and ``frames``, shape (B, n_frames, n_cells).

        Returns ``(pressure, tape)``; pass the tape to ``observe_grad``.
        """
        model = self._fno(*inputs.shape[2:4])
        out, tape = model.forward(self._compute, inputs, cells=cells, dtype=self.dtype,
                                  keep_tape=keep_tape)
        mean, std = self._cell_stats(cells, frames)
        p = out[:, 0][:, :, frames].astype(float) * std + mean           # (B, n_cells, n_frames)
        return p.transpose(0, 2, 1), tape

    def _cell_stats(self, cells, frames):
        mean, std = self.out_norm.mean[0], self.out_norm.std[0]
        xs = [c[0] for c in cells]
        ys = [c[1] for c in cells]
        if np.ndim(mean) == 0:
            return float(mean), float(std)
        return mean[xs, ys][:, frames], std[xs, ys][:, frames]

    def observe_grad(self, tape: dict, cells, frames, adjoint: np.ndarray) -> np.ndarray:
        """Chain dJ/d(observed pressure) (B, n_frames, n_cells) back to log-perm (B, ny, nx)."""
        model = self._fno(*tape["x"].shape[2:4])
        B = tape["x"].shape[0]
        _, std = self._cell_stats(cells, frames)
        g_out = np.zeros((B, self.config.out_channels, len(cells), self.nt))
        g_out[:, 0][:, :, frames] = np.asarray(adjoint).transpose(0, 2, 1) * std
        g_x = model.backward(self._compute, tape, g_out, need_weights=False, need_input=True)
        return self._logperm_grad(g_x)

    def _logperm_grad(self, g_x: np.ndarray) -> np.ndarray:
        # the log-perm raster is copied along t and scaled by 1/std before entering the net
        g = g_x[:, 0].astype(float).sum(axis=-1) / self.in_norm.std[0]
        return g.transpose(0, 2, 1)

    def grad_wrt_logperm(self, fields: FieldRealization, schedule: InjectionSchedule,
                         cost_adjoint: np.ndarray) -> np.ndarray:
        """dJ/d(log_perm) as a (ny, nx) raster.

        ``cost_adjoint`` is dJ/d(trajectory) in physical units with the
        trajectory layout (2, nt, ny, nx).
        """
        nx, ny = fields.grid.nx, fields.grid.ny
        cost_adjoint = np.asarray(cost_adjoint, dtype=float)
        if cost_adjoint.shape != (self.config.out_channels, self.nt, ny, nx):
            raise ValueError(f"cost adjoint shape {cost_adjoint.shape} does not match "
                             f"{(self.config.out_channels, self.nt, ny, nx)}")
        model = self._fno(nx, ny)
        x = self.encode(fields, schedule)[None]
        _, tape = model.forward(self._compute, x, dtype=self.dtype, keep_tape=True)
        std = self.out_norm.std
        if not self.out_norm.pointwise:
            std = std[:, None, None, None]
        g_norm = (cost_adjoint.transpose(0, 3, 2, 1) * std)[None]
        g_x = model.backward(self._compute, tape, g_norm, need_weights=False, need_input=True)
        return self._logperm_grad(g_x)[0]


# ---------------------------------------------------------------------------
# checkpoint


def _stats_arrays(norm: Normalizer) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(norm.mean, dtype=float), np.asarray(norm.std, dtype=float)


def write_checkpoint(path, model: SurrogateModel) -> None:
    """Write a GCSW checkpoint.

    Header: magic, version, FnoConfig fields, activation code, time-axis
    length, then the sizes of the input and output normalization tensors.
    Body: parameters in declaration order then normalization tensors, all
    float32 little-endian, complex values as interleaved (re, im).
    """
    cfg = model.config
    in_mean, in_std = _stats_arrays(model.in_norm)
    out_mean, out_std = _stats_arrays(model.out_norm)
    out_shape = out_mean.shape + (1,) * (4 - out_mean.ndim)
    header = _HEADER.pack(GCSW_MAGIC, GCSW_VERSION, cfg.n_layers, *cfg.modes, cfg.width,
                          cfg.in_channels, cfg.out_channels, _ACTIVATIONS.index(cfg.activation),
                          cfg.proj_width, model.nt, in_mean.size, out_mean.ndim, *out_shape[1:])
    chunks = [header]
    for name in parameter_names(cfg):
        arr = model.weights.params[name]
        if np.iscomplexobj(arr):
            arr = np.stack([arr.real, arr.imag], axis=-1)
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for arr in (in_mean, in_std, out_mean, out_std):
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def read_checkpoint(path, dtype=np.float32) -> SurrogateModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated GCSW header")
    (magic, version, n_layers, kx, ky, kt, width, c_in, c_out, act, proj_width, nt, n_in,
     out_ndim, *out_tail) = _HEADER.unpack_from(data)
    if magic != GCSW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != GCSW_VERSION:
        raise FormatError(f"{path}: unsupported GCSW version {version}")
    if act >= len(_ACTIVATIONS) or out_ndim not in (1, 4):
        raise FormatError(f"{path}: corrupt header")
    cfg = FnoConfig(n_layers=n_layers, modes=(kx, ky, kt), width=width, in_channels=c_in,
                    out_channels=c_out, activation=_ACTIVATIONS[act], proj_width=proj_width)
    offset = _HEADER.size

    def take(count: int) -> np.ndarray:
        nonlocal offset
        end = offset + 4 * count
        if end > len(data):
            raise FormatError(f"{path}: truncated GCSW body")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(float)
        offset = end
        return arr

    shapes = _param_shapes(cfg)
    params = {}
    for name in parameter_names(cfg):
        shape, is_complex = shapes[name]
        if is_complex:
            raw = take(2 * int(np.prod(shape))).reshape(*shape, 2)
            params[name] = raw[..., 0] + 1j * raw[..., 1]
        else:
            params[name] = take(int(np.prod(shape))).reshape(shape)
    out_shape = (c_out,) + (tuple(out_tail) if out_ndim == 4 else ())
    n_out = int(np.prod(out_shape))
    in_norm = Normalizer(take(n_in), take(n_in))
    out_norm = Normalizer(take(n_out).reshape(out_shape), take(n_out).reshape(out_shape))
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return SurrogateModel(SurrogateWeights(cfg, params), in_norm, out_norm, nt, dtype=dtype)


def _param_shapes(cfg: FnoConfig) -> dict[str, tuple[tuple[int, ...], bool]]:
    w, (kx, ky, kt) = cfg.width, cfg.modes
    shapes = {"lift_w": ((cfg.in_channels, w), False), "lift_b": ((w,), False)}
    for layer in range(cfg.n_layers):
        shapes[f"spec_{layer}"] = ((w, w, 2 * kx, 2 * ky, kt), True)
        shapes[f"pw_{layer}"] = ((w, w), False)
        shapes[f"pb_{layer}"] = ((w,), False)
    shapes["proj1_w"] = ((w, cfg.proj_width), False)
    shapes["proj1_b"] = ((cfg.proj_width,), False)
    shapes["proj2_w"] = ((cfg.proj_width, cfg.out_channels), False)
    shapes["proj2_b"] = ((cfg.out_channels,), False)
    return shapes


def check_grid(model: SurrogateModel, grid: GridSpec) -> None:
    """Raise if ``grid`` disagrees with the normalization stored in ``model``."""
    if model.out_norm.pointwise and model.out_norm.mean.shape[1:3] != (grid.nx, grid.ny):
        raise ValueError(f"surrogate was trained on a {model.out_norm.mean.shape[1:3]} grid, "
                         f"got ({grid.nx}, {grid.ny})")
