"""FNO-lite: lift -> Fourier layers -> projection, with a hand-written reverse pass.

Tensors are channel-first, ``(batch, channel, x, y, t)``. Each Fourier layer
computes ``act(W a + b + F^-1(R . F a))``; the activation is skipped on the
last layer. The forward pass records a tape that ``backward`` replays in
reverse to produce weight gradients and, optionally, input gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .spectral import SpectralBasis

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class SurrogateError(RuntimeError):
    pass


@dataclass(frozen=True)
class FnoConfig:
    n_layers: int = 4
    modes: tuple[int, int, int] = (6, 6, 8)
    width: int = 64
    in_channels: int = 6
    out_channels: int = 2
    activation: str = "gelu"
    proj_width: int = 128

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.width < self.out_channels:
            raise ValueError("width must be >= out_channels")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.modes) != 3 or min(self.modes) < 1:
            raise ValueError(f"modes must be three positive integers, got {self.modes}")

    def check_shape(self, shape: tuple[int, int, int]) -> None:
        nx, ny, nt = shape
        kx, ky, kt = self.modes
        if kx > nx // 2 or ky > ny // 2 or kt > nt // 2:
            raise ValueError(f"modes {self.modes} exceed half of transform lengths {shape}")


def parameter_names(cfg: FnoConfig) -> list[str]:
    names = ["lift_w", "lift_b"]
    for layer in range(cfg.n_layers):
        names += [f"spec_{layer}", f"pw_{layer}", f"pb_{layer}"]
    return names + ["proj1_w", "proj1_b", "proj2_w", "proj2_b"]


@dataclass
class SurrogateWeights:
    config: FnoConfig
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.grads:
            self.zero_grad()

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def copy(self) -> "SurrogateWeights":
        return SurrogateWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def squared_norm(self) -> float:
        return float(sum(np.sum(np.abs(v) ** 2) for v in self.params.values()))

    @property
    def n_params(self) -> int:
        """Real degrees of freedom (complex entries count twice)."""
        return sum(v.size * (2 if np.iscomplexobj(v) else 1) for v in self.params.values())


def init_weights(cfg: FnoConfig, seed: int) -> SurrogateWeights:
    rng = np.random.default_rng(seed)
    w, kx, ky, kt = cfg.width, *cfg.modes
    params: dict[str, np.ndarray] = {}

    def dense(n_in, n_out):
        bound = 1.0 / np.sqrt(n_in)
        return rng.uniform(-bound, bound, (n_in, n_out)), rng.uniform(-bound, bound, n_out)

    params["lift_w"], params["lift_b"] = dense(cfg.in_channels, w)
    scale = 1.0 / (w * w)
    for layer in range(cfg.n_layers):
        shape = (w, w, 2 * kx, 2 * ky, kt)
        params[f"spec_{layer}"] = scale * (rng.uniform(size=shape) + 1j * rng.uniform(size=shape))
        params[f"pw_{layer}"], params[f"pb_{layer}"] = dense(w, w)
    params["proj1_w"], params["proj1_b"] = dense(w, cfg.proj_width)
    params["proj2_w"], params["proj2_b"] = dense(cfg.proj_width, cfg.out_channels)
    return SurrogateWeights(cfg, params)


# ---------------------------------------------------------------------------
# activations


def _act(kind: str, z: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0, out=out)
    return np.multiply(z, ndtr(z), out=out)


def _act_grad(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    return ndtr(z) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


# ---------------------------------------------------------------------------


class FNO:
    """Evaluator bound to one grid shape; caches the spectral basis."""

    def __init__(self, cfg: FnoConfig, shape: tuple[int, int, int]):
        cfg.check_shape(shape)
        self.cfg = cfg
        self.shape = tuple(shape)
        self.basis = SpectralBasis(self.shape, cfg.modes)
        self._buffers: dict = {}

    def _buffer(self, name: str, shape: tuple, dtype) -> np.ndarray:
        """Reusable work array; fresh large allocations dominate tape-free evaluation."""
        key = (name, tuple(shape), np.dtype(dtype))
        if key not in self._buffers:
            self._buffers = {k: v for k, v in self._buffers.items() if k[0] != name}
            self._buffers[key] = np.empty(shape, dtype)
        return self._buffers[key]

    def _cast(self, w: SurrogateWeights, dtype) -> dict[str, np.ndarray]:
        ctype = np.complex64 if np.dtype(dtype) == np.float32 else np.complex128
        return {k: v.astype(ctype if np.iscomplexobj(v) else dtype, copy=False)
                for k, v in w.params.items()}

    def _mix(self, a_hat: np.ndarray, R: np.ndarray) -> np.ndarray:
        B, ci = a_hat.shape[:2]
        co = R.shape[1]
        m = int(np.prod(a_hat.shape[2:]))
        a2 = a_hat.reshape(B, ci, m).transpose(2, 0, 1)
        r2 = R.reshape(ci, co, m).transpose(2, 0, 1)
        return (a2 @ r2).transpose(1, 2, 0).reshape(B, co, *a_hat.shape[2:])

    def _mix_backward(self, a_hat, R, g_out):
        B, ci = a_hat.shape[:2]
        co = R.shape[1]
        m = int(np.prod(a_hat.shape[2:]))
        a2 = a_hat.reshape(B, ci, m).transpose(2, 0, 1)
        r2 = R.reshape(ci, co, m).transpose(2, 0, 1)
        g2 = g_out.reshape(B, co, m).transpose(2, 0, 1)
        g_a = (g2 @ np.conj(r2).transpose(0, 2, 1)).transpose(1, 2, 0).reshape(a_hat.shape)
        g_r = (np.conj(a2).transpose(0, 2, 1) @ g2).transpose(1, 2, 0).reshape(R.shape)
        return g_a, g_r

    def forward(self, w: SurrogateWeights, x: np.ndarray, cells: list[tuple[int, int]] | None = None,
                dtype=np.float64, keep_tape: bool = False):
        """Evaluate the network.

        ``x`` is (B, in_channels, nx, ny, nt). With ``cells`` the output is
        restricted to those (ix, iy) columns, shape (B, out_channels, n_cells, nt);
        otherwise it is (B, out_channels, nx, ny, nt). Returns ``(out, tape)``;
        the tape is None unless ``keep_tape``.
        """
        cfg = self.cfg
        x = np.asarray(x)
        if x.ndim != 5 or x.shape[1] != cfg.in_channels or x.shape[2:] != self.shape:
            raise ValueError(f"input shape {x.shape} does not match "
                             f"(B, {cfg.in_channels}, {self.shape})")
        p = self._cast(w, dtype)
        x = x.astype(dtype, copy=False)
        B = x.shape[0]
        spatial = self.shape
        S = int(np.prod(spatial))
        tape: dict = {"x": x, "cells": cells, "dtype": dtype, "layers": []}

        # The lift is linear, so without a tape the first spectrum and pointwise
        # term are taken from the narrower input and the lifted field is never
        # formed. Constant biases enter as the zero-frequency mode (value * S).
        fused = not keep_tape
        if fused:
            h = x
            lift_w = p["lift_w"]
        else:
            h = np.matmul(p["lift_w"].T, x.reshape(B, cfg.in_channels, S))
            h = (h + p["lift_b"][:, None]).reshape(B, cfg.width, *spatial)
        for layer in range(cfg.n_layers):
            last = layer == cfg.n_layers - 1
            pw, pb = p[f"pw_{layer}"], p[f"pb_{layer}"]
            a_hat = self.basis.forward(h)
            if fused and layer == 0:
                a_hat = np.einsum("ic,bi...->bc...", lift_w, a_hat)
                a_hat[:, :, 0, 0, 0] += S * p["lift_b"]
                pb = p["lift_b"] @ pw + pb
                pw = lift_w @ pw
            # every retained mode sums over all cells, so checking the small
            # spectrum catches a non-finite value anywhere in h
            if not np.all(np.isfinite(a_hat)):
                source = "lifting layer" if layer == 0 else f"Fourier layer {layer - 1}"
                raise SurrogateError(f"non-finite activations in {source}")
            o_hat = self._mix(a_hat, p[f"spec_{layer}"])
            o_hat[:, :, 0, 0, 0] += S * pb
            n_in = h.shape[1]
            if last and cells is not None:
                xs = [c[0] for c in cells]
                ys = [c[1] for c in cells]
                z = self.basis.inverse_at(o_hat, cells, real_dtype=dtype)
                h_loc = h[:, :, xs, ys, :]                              # (B, c_in, n_cells, nt)
                z += np.matmul(pw.T, h_loc.reshape(B, n_in, -1)).reshape(z.shape)
            elif fused:
                # work buffers alternate so a layer never overwrites its own input
                shape = (B, cfg.width, *spatial)
                z = self.basis.inverse(o_hat, real_dtype=dtype,
                                       out=self._buffer(f"z{layer % 2}", shape, dtype))
                tmp = self._buffer("pointwise", (B, cfg.width, S), dtype)
                z += np.matmul(pw.T, h.reshape(B, n_in, S), out=tmp).reshape(shape)
            else:
                z = self.basis.inverse(o_hat, real_dtype=dtype)
                z += np.matmul(pw.T, h.reshape(B, n_in, S)).reshape(z.shape)
            if keep_tape:
                tape["layers"].append({"h_in": h, "a_hat": a_hat, "z": z})
                h = z if last else _act(cfg.activation, z)
            else:
                h = z if last else _act(cfg.activation, z, out=z)

        out_shape = h.shape[2:]
        flat = h.reshape(B, cfg.width, -1)
        u1 = np.matmul(p["proj1_w"].T, flat) + p["proj1_b"][:, None]
        q1 = _act(cfg.activation, u1)
        out = np.matmul(p["proj2_w"].T, q1) + p["proj2_b"][:, None]
        if not np.all(np.isfinite(out)):
            raise SurrogateError(f"non-finite activations in Fourier layer {cfg.n_layers - 1} "
                                 "or the projection")
        if keep_tape:
            tape.update(h_last=flat, u1=u1, q1=q1)
        return out.reshape(B, cfg.out_channels, *out_shape), (tape if keep_tape else None)

    def backward(self, w: SurrogateWeights, tape: dict | None, g_out: np.ndarray,
                 need_weights: bool = True, need_input: bool = False) -> np.ndarray | None:
        """Reverse pass from dL/d(out).

        Weight gradients are written into ``w.grads`` (overwritten, not
        accumulated). Returns dL/dx when ``need_input``.
        """
        if tape is None or not tape.get("layers"):
            raise SurrogateError("backward called without a forward tape (use keep_tape=True)")
        cfg = self.cfg
        dtype = tape["dtype"]
        cells = tape["cells"]
        p = self._cast(w, dtype)
        x = tape["x"]
        B = x.shape[0]
        S = int(np.prod(self.shape))
        grads: dict[str, np.ndarray] = {}

        g = np.asarray(g_out, dtype=dtype).reshape(B, cfg.out_channels, -1)
        q1, u1, h_last = tape["q1"], tape["u1"], tape["h_last"]
        if need_weights:
            grads["proj2_w"] = np.tensordot(q1, g, axes=([0, 2], [0, 2]))
            grads["proj2_b"] = g.sum(axis=(0, 2))
        g = np.matmul(p["proj2_w"], g) * _act_grad(cfg.activation, u1)
        if need_weights:
            grads["proj1_w"] = np.tensordot(h_last, g, axes=([0, 2], [0, 2]))
            grads["proj1_b"] = g.sum(axis=(0, 2))
        g_h = np.matmul(p["proj1_w"], g)                                  # (B, w, S_out)

        for layer in reversed(range(cfg.n_layers)):
            rec = tape["layers"][layer]
            last = layer == cfg.n_layers - 1
            h_in, a_hat, z = rec["h_in"], rec["a_hat"], rec["z"]
            g_z = g_h.reshape(z.shape)
            if not last:
                g_z = g_z * _act_grad(cfg.activation, z)
            if last and cells is not None:
                xs = [c[0] for c in cells]
                ys = [c[1] for c in cells]
                h_loc = h_in[:, :, xs, ys, :]
                gz_flat = g_z.reshape(B, cfg.width, -1)
                if need_weights:
                    grads[f"pw_{layer}"] = np.tensordot(h_loc.reshape(B, cfg.width, -1), gz_flat,
                                                        axes=([0, 2], [0, 2]))
                    grads[f"pb_{layer}"] = gz_flat.sum(axis=(0, 2))
                g_hin = np.zeros_like(h_in)
                g_loc = np.matmul(p[f"pw_{layer}"], gz_flat).reshape(h_loc.shape)
                for c, (cx, cy) in enumerate(cells):
                    g_hin[:, :, cx, cy, :] += g_loc[:, :, c, :]
                g_o = self.basis.inverse_at_adjoint(g_z, cells)
            else:
                gz_flat = g_z.reshape(B, cfg.width, S)
                if need_weights:
                    grads[f"pw_{layer}"] = np.tensordot(h_in.reshape(B, cfg.width, S), gz_flat,
                                                        axes=([0, 2], [0, 2]))
                    grads[f"pb_{layer}"] = gz_flat.sum(axis=(0, 2))
                g_hin = np.matmul(p[f"pw_{layer}"], gz_flat).reshape(h_in.shape)
                g_o = self.basis.inverse_adjoint(g_z)
            g_a, g_r = self._mix_backward(a_hat, p[f"spec_{layer}"], g_o)
            if need_weights:
                grads[f"spec_{layer}"] = g_r
            g_hin += self.basis.forward_adjoint(g_a, real_dtype=dtype)
            g_h = g_hin

        g_h = g_h.reshape(B, cfg.width, S)
        if need_weights:
            grads["lift_w"] = np.tensordot(x.reshape(B, cfg.in_channels, S), g_h,
                                            axes=([0, 2], [0, 2]))
            grads["lift_b"] = g_h.sum(axis=(0, 2))
            for k, v in grads.items():
                w.grads[k] = v.astype(w.params[k].dtype)
        if need_input:
            return np.matmul(p["lift_w"], g_h).reshape(x.shape)
        return None


def fno_forward(w: SurrogateWeights, x: np.ndarray, dtype=np.float64) -> np.ndarray:
    """One-shot forward for a (in_channels, nx, ny, nt) or batched input."""
    single = np.ndim(x) == 4
    xb = x[None] if single else x
    out, _ = FNO(w.config, xb.shape[2:]).forward(w, xb, dtype=dtype)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# loss


def data_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of the discretized squared L2 norm on the unit space-time cube.

    Returns (value, dvalue/dpred).
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    B = pred.shape[0]
    n_points = int(np.prod(pred.shape[2:]))
    r = pred - target
    weight = 1.0 / (B * n_points)
    return float(weight * np.sum(r * r)), 2.0 * weight * r


def loss(w: SurrogateWeights, model: FNO, x: np.ndarray, y: np.ndarray, weight_decay: float,
         dtype=np.float64) -> float:
    if len(x) == 0:
        raise ValueError("empty batch")
    pred, _ = model.forward(w, x, dtype=dtype)
    value, _ = data_loss(pred, y)
    return value + weight_decay * w.squared_norm()


def loss_and_backward(w: SurrogateWeights, model: FNO, x: np.ndarray, y: np.ndarray,
                      weight_decay: float, dtype=np.float64) -> float:
    """Loss value; fills ``w.grads`` with the full gradient (data + 2*lambda*theta)."""
    if len(x) == 0:
        raise ValueError("empty batch")
    pred, tape = model.forward(w, x, dtype=dtype, keep_tape=True)
    value, g = data_loss(pred, y)
    model.backward(w, tape, g)
    for k, v in w.params.items():
        w.grads[k] = w.grads[k] + 2.0 * weight_decay * v
    return value + weight_decay * w.squared_norm()
