"""Two-field reservoir simulator.

Single-phase slightly-compressible pressure with an implicit two-point flux
discretization, followed by explicit first-order upwind transport of the CO2
molar fraction. The pore volume of a cell is ``phi * V * (1 + c_t (p - p_init))``,
so the tracer amount ``PV * f`` is conserved exactly up to the injected volume.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spilu

from .gcsf import read_gcsf, write_gcsf
from .geomodel import FieldRealization, GridSpec

# mD * m^2 / (cP * m) * bar  ->  m^3 / day
DARCY_FACTOR = 9.869233e-16 * 1e5 * 86400.0 / 1e-3
CFL_LIMIT = 0.9


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int | None = None, residual: float | None = None):
        super().__init__(message)
        self.step = step
        self.residual = residual


@dataclass(frozen=True)
class InjectionSchedule:
    rates: tuple[float, ...]

    def __post_init__(self):
        r = np.asarray(self.rates, dtype=float)
        if r.ndim != 1 or len(r) == 0:
            raise ValueError("injection schedule must be a non-empty 1-D sequence")
        if np.any(r < 0) or not np.any(r > 0):
            raise ValueError("rates must be >= 0 with at least one positive entry")

    @classmethod
    def constant(cls, rate: float, n_steps: int) -> "InjectionSchedule":
        return cls(tuple([float(rate)] * n_steps))

    @classmethod
    def ramp(cls, levels: tuple[float, ...], n_steps: int) -> "InjectionSchedule":
        """Piecewise-constant schedule with ``len(levels)`` equal-length stages."""
        idx = (np.arange(n_steps) * len(levels)) // n_steps
        return cls(tuple(float(levels[i]) for i in idx))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.rates, dtype=float)


DEFAULT_RAMP = (200.0, 320.0, 440.0)


@dataclass(frozen=True)
class SimConfig:
    n_steps: int = 61
    dt: float = 30.0
    p_init: float = 200.0
    viscosity: float = 0.15
    total_compressibility: float = 2e-4
    injection: InjectionSchedule | None = None
    well_cell: tuple[int, int] | None = None
    f_init: float = 0.02
    linear_solver_tol: float = 1e-10
    max_cg_iters: int = 500

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.dt <= 0 or self.p_init <= 0:
            raise ValueError("dt and p_init must be positive")
        if self.viscosity <= 0 or self.total_compressibility <= 0:
            raise ValueError("viscosity and compressibility must be positive")
        if not 0.0 < self.linear_solver_tol <= 1e-3:
            raise ValueError("linear_solver_tol must lie in (0, 1e-3]")
        if not 0.0 <= self.f_init <= 1.0:
            raise ValueError("f_init must lie in [0, 1]")
        if self.injection is not None and len(self.injection.rates) != self.n_steps:
            raise ValueError(
                f"injection schedule has {len(self.injection.rates)} entries, expected {self.n_steps}")

    @property
    def schedule(self) -> InjectionSchedule:
        if self.injection is not None:
            return self.injection
        return InjectionSchedule.ramp(DEFAULT_RAMP, self.n_steps)

    def well(self, grid: GridSpec) -> tuple[int, int]:
        return self.well_cell if self.well_cell is not None else grid.center


@dataclass
class StateTrajectory:
    pressure: np.ndarray
    co2_fraction: np.ndarray
    substeps: list[int] = field(default_factory=list)
    cg_iterations: list[int] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return self.pressure.shape[0]

    def as_array(self) -> np.ndarray:
        """(2, n_frames, ny, nx) stack: pressure, CO2 fraction."""
        return np.stack([self.pressure, self.co2_fraction])


# ---------------------------------------------------------------------------
# discretization


def transmissibilities(fields: FieldRealization, viscosity: float) -> tuple[np.ndarray, np.ndarray]:
    """Harmonic-mean face transmissibilities (m^3/day/bar) for x- and y-faces."""
    g = fields.grid
    k = fields.perm
    kx = 2.0 * k[:, 1:] * k[:, :-1] / (k[:, 1:] + k[:, :-1])
    ky = 2.0 * k[1:, :] * k[:-1, :] / (k[1:, :] + k[:-1, :])
    tx = DARCY_FACTOR * kx * (g.dy * g.thickness) / (g.dx * viscosity)
    ty = DARCY_FACTOR * ky * (g.dx * g.thickness) / (g.dy * viscosity)
    return tx, ty


def _net_outflow(tx: np.ndarray, ty: np.ndarray, p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    fx = tx * (p[:, :-1] - p[:, 1:])
    fy = ty * (p[:-1, :] - p[1:, :])
    out[:, :-1] += fx
    out[:, 1:] -= fx
    out[:-1, :] += fy
    out[1:, :] -= fy
    return out


def assemble_pressure_matrix(tx: np.ndarray, ty: np.ndarray, storage: np.ndarray) -> sp.csr_matrix:
    """Sparse form of ``diag(storage) + L_T`` with no-flow boundaries."""
    ny, nx = storage.shape
    idx = np.arange(nx * ny).reshape(ny, nx)
    rows = [idx[:, :-1].ravel(), idx[:, 1:].ravel(), idx[:-1, :].ravel(), idx[1:, :].ravel()]
    cols = [idx[:, 1:].ravel(), idx[:, :-1].ravel(), idx[1:, :].ravel(), idx[:-1, :].ravel()]
    vals = [-tx.ravel(), -tx.ravel(), -ty.ravel(), -ty.ravel()]
    diag = storage.copy()
    diag[:, :-1] += tx
    diag[:, 1:] += tx
    diag[:-1, :] += ty
    diag[1:, :] += ty
    A = sp.coo_matrix(
        (np.concatenate(vals + [diag.ravel()]),
         (np.concatenate(rows + [idx.ravel()]), np.concatenate(cols + [idx.ravel()]))),
        shape=(nx * ny, nx * ny),
    )
    return A.tocsr()


def conjugate_gradient(apply_A, b: np.ndarray, x0: np.ndarray, precond, tol: float,
                       max_iter: int) -> tuple[np.ndarray, int, float]:
    """Preconditioned CG. Returns (x, iterations, relative residual)."""
    bnorm = np.linalg.norm(b)
    x = x0.copy()
    r = b - apply_A(x)
    if bnorm == 0.0:
        bnorm = 1.0
    rel = np.linalg.norm(r) / bnorm
    if rel <= tol:
        return x, 0, rel
    z = precond(r)
    d = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ad = apply_A(d)
        step = rz / (d @ Ad)
        x += step * d
        r -= step * Ad
        rel = np.linalg.norm(r) / bnorm
        if rel <= tol:
            return x, it, rel
        z = precond(r)
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    return x, max_iter, rel


def _transport(f: np.ndarray, pv: np.ndarray, tx: np.ndarray, ty: np.ndarray, p: np.ndarray,
               q: float, well: tuple[int, int], dt: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Advance (f, pv) over one pressure step with CFL-limited upwind substeps."""
    ix, iy = well
    fx = tx * (p[:, :-1] - p[:, 1:])
    fy = ty * (p[:-1, :] - p[1:, :])
    fxp, fxm = np.maximum(fx, 0.0), np.maximum(-fx, 0.0)
    fyp, fym = np.maximum(fy, 0.0), np.maximum(-fy, 0.0)
    outflow = np.zeros_like(p)
    outflow[:, :-1] += fxp
    outflow[:, 1:] += fxm
    outflow[:-1, :] += fyp
    outflow[1:, :] += fym
    dpv = -_net_outflow(tx, ty, p)
    dpv[iy, ix] += q
    pv_end = pv + dt * dpv
    if np.any(pv_end <= 0):
        raise SimulationError("pore volume became non-positive")
    courant = dt * np.max(outflow / np.minimum(pv, pv_end))
    n_sub = max(1, math.ceil(courant / CFL_LIMIT))
    h = dt / n_sub
    for _ in range(n_sub):
        d = np.zeros_like(f)
        ax = fxp * f[:, :-1] - fxm * f[:, 1:]
        ay = fyp * f[:-1, :] - fym * f[1:, :]
        d[:, :-1] -= ax
        d[:, 1:] += ax
        d[:-1, :] -= ay
        d[1:, :] += ay
        d[iy, ix] += q
        pv_new = pv + h * dpv
        f = (pv * f + h * d) / pv_new
        pv = pv_new
    # clip removes only round-off; the CFL bound keeps f in [0, 1] analytically
    return np.clip(f, 0.0, 1.0), pv, n_sub


def run_forward(fields: FieldRealization, cfg: SimConfig, check_spd: bool = False) -> StateTrajectory:
    grid = fields.grid
    ix, iy = cfg.well(grid)
    if not (0 <= ix < grid.nx and 0 <= iy < grid.ny):
        raise ValueError(f"well cell {(ix, iy)} outside {grid.nx}x{grid.ny} grid")
    rates = cfg.schedule.as_array()
    tx, ty = transmissibilities(fields, cfg.viscosity)
    pv0 = fields.porosity * grid.cell_volume
    storage = pv0 * cfg.total_compressibility / cfg.dt

    A = assemble_pressure_matrix(tx, ty, storage)
    if check_spd:
        assert abs(A - A.T).max() == 0.0, "pressure matrix not symmetric"
        assert np.all(A.diagonal() > 0), "pressure matrix diagonal not positive"
    ilu = spilu(A.tocsc(), drop_tol=1e-5, fill_factor=20, diag_pivot_thresh=0.0,
                permc_spec="MMD_AT_PLUS_A")

    shape = grid.shape
    # flux form keeps A @ const exactly equal to storage * const
    def apply_A(v):
        vv = v.reshape(shape)
        return (storage * vv + _net_outflow(tx, ty, vv)).ravel()

    p = np.full(shape, cfg.p_init, dtype=float)
    f = np.full(shape, cfg.f_init, dtype=float)
    pv = pv0.copy()
    pressures, fracs = [p.copy()], [f.copy()]
    subs, iters = [], []
    for n in range(cfg.n_steps):
        q = float(rates[n])
        b = storage * p
        b[iy, ix] += q
        x, it, rel = conjugate_gradient(apply_A, b.ravel(), p.ravel(), ilu.solve,
                                        cfg.linear_solver_tol, cfg.max_cg_iters)
        if rel > cfg.linear_solver_tol:
            raise SimulationError(
                f"CG did not converge at step {n + 1}: residual {rel:.3e}", step=n + 1, residual=rel)
        p = x.reshape(shape)
        if not np.all(np.isfinite(p)):
            raise SimulationError(f"non-finite pressure at step {n + 1}", step=n + 1)
        f, pv, n_sub = _transport(f, pv, tx, ty, p, q, (ix, iy), cfg.dt)
        if not np.all(np.isfinite(f)):
            raise SimulationError(f"non-finite CO2 fraction at step {n + 1}", step=n + 1)
        pressures.append(p.copy())
        fracs.append(f)
        subs.append(n_sub)
        iters.append(it)
    return StateTrajectory(np.stack(pressures), np.stack(fracs), subs, iters)


# ---------------------------------------------------------------------------
# diagnostics


def pore_volume(fields: FieldRealization, cfg: SimConfig, pressure: np.ndarray) -> np.ndarray:
    return fields.porosity * fields.grid.cell_volume * (
        1.0 + cfg.total_compressibility * (pressure - cfg.p_init))


def tracer_balance_errors(fields: FieldRealization, cfg: SimConfig, traj: StateTrajectory) -> np.ndarray:
    """Per-step relative error between stored-CO2 change and injected volume."""
    rates = cfg.schedule.as_array()
    errs = np.zeros(cfg.n_steps)
    for n in range(cfg.n_steps):
        before = np.sum(pore_volume(fields, cfg, traj.pressure[n]) * traj.co2_fraction[n])
        after = np.sum(pore_volume(fields, cfg, traj.pressure[n + 1]) * traj.co2_fraction[n + 1])
        injected = rates[n] * cfg.dt
        scale = injected if injected > 0 else max(before, 1.0)
        errs[n] = abs((after - before) - injected) / scale
    return errs


def front_radius(mask: np.ndarray, well: tuple[int, int]) -> float:
    """Largest distance (cells) from the well to a cell where ``mask`` holds."""
    if not np.any(mask):
        return 0.0
    iy, ix = np.nonzero(mask)
    return float(np.max(np.hypot(ix - well[0], iy - well[1])))


# ---------------------------------------------------------------------------
# observations


@dataclass
class ObservationSet:
    monitor_cells: list[tuple[int, int]]
    times: list[int]
    values: np.ndarray
    noise_std: float
    truth_seed: int

    def __post_init__(self):
        cells = [tuple(int(v) for v in c) for c in self.monitor_cells]
        if len(set(cells)) != len(cells):
            raise ValueError("monitor cells must be distinct")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        self.monitor_cells = cells
        self.times = [int(t) for t in self.times]
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.times), len(self.monitor_cells)):
            raise ValueError(f"values shape {self.values.shape} does not match times x cells")

    @property
    def vector(self) -> np.ndarray:
        """Flattened observations, time-major."""
        return self.values.ravel()

    @property
    def n_obs(self) -> int:
        return self.values.size


def default_monitor_cells(grid: GridSpec) -> list[tuple[int, int]]:
    """Quarter-diagonal positions, numbered from top-left and proceeding clockwise."""
    qx, qy = grid.nx // 4, grid.ny // 4
    return [(qx, qy), (grid.nx - qx, qy), (grid.nx - qx, grid.ny - qy), (qx, grid.ny - qy)]


def observe(traj: StateTrajectory, monitor_cells, times) -> np.ndarray:
    """Pressure at the given cells and frame indices, shape (len(times), len(cells))."""
    nt, ny, nx = traj.pressure.shape
    cells = list(monitor_cells)
    for ix, iy in cells:
        if not (0 <= ix < nx and 0 <= iy < ny):
            raise IndexError(f"monitor cell {(ix, iy)} outside {nx}x{ny} grid")
    for t in times:
        if not 0 <= t < nt:
            raise IndexError(f"time index {t} outside [0, {nt})")
    t_idx = np.asarray(list(times), dtype=int)
    xs = np.array([c[0] for c in cells], dtype=int)
    ys = np.array([c[1] for c in cells], dtype=int)
    return traj.pressure[t_idx[:, None], ys[None, :], xs[None, :]].copy()


def make_synthetic_truth(reference: FieldRealization, cfg: SimConfig, noise_std: float, seed: int,
                         monitor_cells=None, times=None) -> ObservationSet:
    if noise_std <= 0:
        raise ValueError("noise_std must be positive")
    cells = monitor_cells if monitor_cells is not None else default_monitor_cells(reference.grid)
    well = cfg.well(reference.grid)
    if tuple(well) in {tuple(c) for c in cells}:
        raise ValueError("monitor cells must differ from the well cell")
    times = list(times) if times is not None else list(range(1, cfg.n_steps + 1))
    clean = observe(run_forward(reference, cfg), cells, times)
    rng = np.random.default_rng(seed)
    noisy = clean + noise_std * rng.standard_normal(clean.shape)
    return ObservationSet(list(cells), times, noisy, float(noise_std), int(seed))


# ---------------------------------------------------------------------------
# persistence


def write_trajectory(path: str | Path, traj: StateTrajectory) -> None:
    write_gcsf(path, traj.as_array())


def read_trajectory(path: str | Path) -> StateTrajectory:
    arr = read_gcsf(path)
    if arr.shape[0] != 2:
        raise ValueError(f"{path}: expected 2 channels, found {arr.shape[0]}")
    return StateTrajectory(arr[0], arr[1])


def write_observations(path: str | Path, obs: ObservationSet) -> None:
    path = Path(path)
    lines = ["step,point,value_bar"]
    for i, t in enumerate(obs.times):
        for j in range(len(obs.monitor_cells)):
            lines.append(f"{t},{j},{float(obs.values[i, j])!r}")
    path.write_text("\n".join(lines) + "\n")
    side = {"noise_std": obs.noise_std, "monitor_cells": [list(c) for c in obs.monitor_cells],
            "truth_seed": obs.truth_seed}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True))


def read_observations(path: str | Path) -> ObservationSet:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    rows = path.read_text().strip().splitlines()
    if rows[0].strip() != "step,point,value_bar":
        raise ValueError(f"{path}: unexpected header {rows[0]!r}")
    data: dict[int, dict[int, float]] = {}
    for line in rows[1:]:
        s, pt, val = line.split(",")
        data.setdefault(int(s), {})[int(pt)] = float(val)
    times = sorted(data)
    n_pts = len(side["monitor_cells"])
    values = np.array([[data[t][j] for j in range(n_pts)] for t in times])
    return ObservationSet([tuple(c) for c in side["monitor_cells"]], times, values,
                          float(side["noise_std"]), int(side["truth_seed"]))


def sim_config_dict(cfg: SimConfig) -> dict:
    d = asdict(cfg)
    d["injection"] = list(cfg.schedule.rates)
    return d
