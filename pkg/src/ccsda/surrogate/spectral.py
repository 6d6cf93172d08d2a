"""Truncated 3-D real Fourier transform over (x, y, t) and its adjoints.

Only the retained modes are ever needed, so the transform is evaluated as
three small DFT contractions instead of a full FFT followed by slicing. The
results equal ``np.fft.rfftn`` restricted to the retained index set, and
``inverse`` equals ``np.fft.irfftn`` of the zero-filled spectrum.

Retained indices: ``kx`` lowest positive and ``kx`` negative frequencies on
x and y, and the first ``kt`` half-spectrum bins on t.

Adjoints use the convention that the gradient of a real loss with respect
to a complex array ``z`` is ``dL/dRe(z) + 1j * dL/dIm(z)``.
"""
from __future__ import annotations

import numpy as np


def retained_indices(n: int, k: int, half: bool = False) -> np.ndarray:
    if not 1 <= k <= n // 2:
        raise ValueError(f"cannot retain {k} modes per sign of a length-{n} axis")
    if half:
        return np.arange(k)
    return np.concatenate([np.arange(k), np.arange(n - k, n)])


def _reduce(a, kt2, kyb, kx):
    """Real (L, nx, ny, nt) -> complex (L, mx, my, mt).

    ``kt2`` is (nt, 2*mt) holding real and imaginary kernel columns side by
    side, ``kyb`` is the (ny, 2*my) real block ``[Re Ky | Im Ky]`` and ``kx``
    is (nx, mx). The t and y contractions run as real GEMMs; complex
    arithmetic starts once the array is small.
    """
    L, nx, ny, nt = a.shape
    mt = kt2.shape[1] // 2
    my, mx = kyb.shape[1] // 2, kx.shape[1]
    t = (a.reshape(-1, nt) @ kt2).reshape(L * nx, ny, 2 * mt)
    t = np.ascontiguousarray(t.transpose(0, 2, 1)).reshape(-1, ny)        # rows: (L, nx, re/im, mt)
    y = (t @ kyb).reshape(L, nx, 2, mt, 2, my)
    zy = (y[:, :, 0, :, 0] - y[:, :, 1, :, 1]) + 1j * (y[:, :, 0, :, 1] + y[:, :, 1, :, 0])
    zx = np.matmul(kx.T, zy.reshape(L, nx, mt * my))                      # (L, mx, mt*my)
    return zx.reshape(L, mx, mt, my).transpose(0, 1, 3, 2)


def _expand(z, kx, kyb, kt2, out=None):
    """Complex (L, mx, my, mt) -> real (L, nx, ny, nt).

    Computes ``Re(sum_k z_k Kx Ky Kt)``. ``kx`` is (nx, mx); ``kyb`` is the
    (2*my, 2*ny) real block ``[[Re Ky, Im Ky], [-Im Ky, Re Ky]]`` of a
    (my, ny) kernel, so ``[zr | zi] @ kyb = [Re(z Ky) | Im(z Ky)]``; ``kt2``
    stacks [Re Kt; -Im Kt] as a (2*mt, nt) real matrix.
    """
    L, mx, my, mt = z.shape
    nx, ny = kx.shape[0], kyb.shape[1] // 2
    nt = kt2.shape[1]
    zx = np.matmul(kx, z.reshape(L, mx, my * mt)).reshape(L, nx, my, mt)
    zx = zx.transpose(0, 1, 3, 2)                                          # (L, nx, mt, my)
    stacked = np.concatenate([zx.real, zx.imag], axis=-1).reshape(-1, 2 * my)
    y = (stacked @ kyb).reshape(L * nx, mt, 2, ny)
    y = np.ascontiguousarray(y.transpose(0, 3, 2, 1)).reshape(-1, 2 * mt)  # (L*nx*ny, [re mt | im mt])
    if out is None:
        return (y @ kt2).reshape(L, nx, ny, nt)
    np.matmul(y, kt2, out=out.reshape(-1, nt))
    return out


def _reduce_block(k: np.ndarray) -> np.ndarray:
    return np.concatenate([k.real, k.imag], axis=1)


def _expand_block(k: np.ndarray) -> np.ndarray:
    return np.block([[k.real, k.imag], [-k.imag, k.real]])


class SpectralBasis:
    def __init__(self, shape: tuple[int, int, int], modes: tuple[int, int, int]):
        nx, ny, nt = shape
        self.shape = (nx, ny, nt)
        self.modes = tuple(modes)
        ix = retained_indices(nx, modes[0])
        iy = retained_indices(ny, modes[1])
        it = retained_indices(nt, modes[2], half=True)
        self.mode_shape = (len(ix), len(iy), len(it))
        # forward kernels E, (n, M): A_k = sum_x a_x E[x, k]
        self.ex = np.exp(-2j * np.pi * np.outer(np.arange(nx), ix) / nx)
        self.ey = np.exp(-2j * np.pi * np.outer(np.arange(ny), iy) / ny)
        self.et = np.exp(-2j * np.pi * np.outer(np.arange(nt), it) / nt)
        # inverse kernels B, (M, n); the half-spectrum weight doubles non-zero t bins
        weight = np.where(it == 0, 1.0, 2.0)
        self.bx = np.conj(self.ex).T / nx
        self.by = np.conj(self.ey).T / ny
        self.bt = (np.conj(self.et) * weight).T / nt
        self._cache: dict = {}

    def _k(self, dtype) -> dict[str, np.ndarray]:
        key = np.dtype(dtype)
        if key not in self._cache:
            c = np.complex64 if key == np.float32 else np.complex128
            et, bt = self.et, self.bt
            self._cache[key] = {
                # forward: reduce with E
                "f_t": np.concatenate([et.real, et.imag], axis=1).astype(key),
                "f_y": _reduce_block(self.ey).astype(key), "f_x": self.ex.astype(c),
                # inverse: expand with B
                "i_x": self.bx.T.astype(c), "i_y": _expand_block(self.by).astype(key),
                "i_t": np.concatenate([bt.real, -bt.imag], axis=0).astype(key),
                # adjoint of forward: expand with conj(E)
                "fa_x": np.conj(self.ex).astype(c), "fa_y": _expand_block(np.conj(self.ey).T).astype(key),
                "fa_t": np.concatenate([et.real.T, et.imag.T], axis=0).astype(key),
                # adjoint of inverse: reduce with conj(B)
                "ia_t": np.concatenate([bt.real.T, -bt.imag.T], axis=1).astype(key),
                "ia_y": _reduce_block(np.conj(self.by).T).astype(key), "ia_x": np.conj(self.bx).T.astype(c),
                "bx": self.bx.astype(c), "by": self.by.astype(c),
                "bt_re": bt.real.astype(key), "bt_im": bt.imag.astype(key),
            }
        return self._cache[key]

    def _flat(self, arr, n_trailing=3):
        lead = arr.shape[:-n_trailing]
        return lead, arr.reshape(-1, *arr.shape[-n_trailing:])

    def forward(self, a: np.ndarray) -> np.ndarray:
        """Real (..., nx, ny, nt) -> complex (..., Mx, My, Mt) retained spectrum."""
        k = self._k(a.dtype)
        lead, flat = self._flat(a)
        out = _reduce(flat, k["f_t"], k["f_y"], k["f_x"])
        return out.reshape(*lead, *self.mode_shape)

    def inverse(self, z: np.ndarray, real_dtype=np.float64, out: np.ndarray | None = None
                ) -> np.ndarray:
        """Complex (..., Mx, My, Mt) -> real (..., nx, ny, nt).

        ``out``, if given, is a C-contiguous array of the result's shape and dtype.
        """
        k = self._k(real_dtype)
        lead, flat = self._flat(z)
        if out is not None:
            out = out.reshape(-1, *self.shape)
        res = _expand(flat, k["i_x"], k["i_y"], k["i_t"], out=out)
        return res.reshape(*lead, *self.shape)

    def forward_adjoint(self, g: np.ndarray, real_dtype=np.float64) -> np.ndarray:
        """Adjoint of ``forward``: complex mode gradient -> real space-time gradient."""
        k = self._k(real_dtype)
        lead, flat = self._flat(g)
        out = _expand(flat, k["fa_x"], k["fa_y"], k["fa_t"])
        return out.reshape(*lead, *self.shape)

    def inverse_adjoint(self, g: np.ndarray) -> np.ndarray:
        """Adjoint of ``inverse``: real space-time gradient -> complex mode gradient."""
        k = self._k(g.dtype)
        lead, flat = self._flat(g)
        out = _reduce(flat, k["ia_t"], k["ia_y"], k["ia_x"])
        return out.reshape(*lead, *self.mode_shape)

    def _column_weights(self, k, cells):
        xs = np.array([c[0] for c in cells])
        ys = np.array([c[1] for c in cells])
        return k["bx"][:, xs][:, None, :] * k["by"][:, ys][None, :, :]      # (mx, my, n_cells)

    def inverse_at(self, z: np.ndarray, cells, real_dtype=np.float64) -> np.ndarray:
        """``inverse`` evaluated only at the (ix, iy) columns, shape (..., n_cells, nt)."""
        k = self._k(real_dtype)
        w = self._column_weights(k, cells)
        zc = np.einsum("...abt,abc->...ct", z, w)
        return zc.real @ k["bt_re"] - zc.imag @ k["bt_im"]

    def inverse_at_adjoint(self, g: np.ndarray, cells) -> np.ndarray:
        k = self._k(g.dtype)
        w = self._column_weights(k, cells)
        gt = (g @ k["bt_re"].T) - 1j * (g @ k["bt_im"].T)                   # (..., n_cells, mt)
        return np.einsum("...ct,abc->...abt", gt, np.conj(w))
