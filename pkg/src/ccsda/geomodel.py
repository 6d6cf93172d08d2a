"""Channelized permeability / porosity realizations.

Channels are sinusoidal centerlines rasterized with a constant width and a
levee halo. Each cell's log-permeability is drawn from the log-normal
distribution of its facies, modulated by a smooth unit-variance noise field
so that properties are spatially correlated within a facies body.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from scipy.ndimage import gaussian_filter

from .gcsf import read_gcsf, write_gcsf

BACKGROUND, LEVEE, CHANNEL = 0, 1, 2
FACIES_NAMES = ("background", "levee", "channel")

MIN_CHANNEL_FRACTION = 0.05
MAX_CHANNEL_FRACTION = 0.6
# smooth field is clipped so every cell stays well inside 5 log-stds of its facies mean
_Z_CLIP = 4.0


class GeomodelError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    nx: int = 32
    ny: int = 32
    dx: float = 192.0
    dy: float = 192.0
    thickness: float = 10.0

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise ValueError(f"grid must be at least 8x8, got {self.nx}x{self.ny}")
        if min(self.dx, self.dy, self.thickness) <= 0:
            raise ValueError("cell sizes and thickness must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        """Raster shape, (ny, nx)."""
        return (self.ny, self.nx)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.thickness

    @property
    def center(self) -> tuple[int, int]:
        """(ix, iy) of the central cell."""
        return (self.nx // 2, self.ny // 2)


@dataclass(frozen=True)
class ChannelPriorSpec:
    """Ranges of the channel geometry parameters.

    Every ``(lo, hi)`` pair is a uniform distribution. Facies permeabilities
    are log-normal with the given geometric mean (mD) and log standard
    deviation. The defaults are desk-scale assumptions chosen to give the
    visual character of a fluvial system on a 32x32 grid; they are not
    calibrated to any field.
    """

    n_channels: tuple[int, int] = (2, 4)
    orientation_deg: tuple[float, float] = (-15.0, 15.0)
    amplitude_cells: tuple[float, float] = (1.0, 3.5)
    wavelength_cells: tuple[float, float] = (14.0, 32.0)
    width_cells: tuple[float, float] = (2.0, 3.5)
    levee_width_cells: tuple[float, float] = (0.8, 1.6)
    avulsion_probability: float = 0.2
    aggradation_weight: float = 0.5
    facies_perm_md: tuple[float, float, float] = (5.0, 80.0, 800.0)
    facies_log_std: tuple[float, float, float] = (0.5, 0.4, 0.35)
    porosity_per_facies: tuple[float, float, float] = (0.18, 0.20, 0.22)
    porosity_noise: float = 0.01
    smoothing_cells: float = 1.5
    max_retries: int = 50

    def __post_init__(self):
        lo, hi = self.n_channels
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid n_channels range {self.n_channels}")
        for name in ("orientation_deg", "amplitude_cells", "wavelength_cells",
                     "width_cells", "levee_width_cells"):
            a, b = getattr(self, name)
            if not (math.isfinite(a) and math.isfinite(b)) or b < a:
                raise ValueError(f"invalid range for {name}: {(a, b)}")
        if self.wavelength_cells[0] <= 0 or self.width_cells[0] <= 0:
            raise ValueError("wavelength and width must be positive")
        if not 0.0 <= self.avulsion_probability <= 1.0:
            raise ValueError("avulsion_probability must lie in [0, 1]")
        if self.aggradation_weight < 0:
            raise ValueError("aggradation_weight must be >= 0")
        bg, lev, ch = self.facies_perm_md
        if not ch > lev > bg > 0:
            raise ValueError("facies permeability means must satisfy channel > levee > background > 0")
        if any(s <= 0 for s in self.facies_log_std):
            raise ValueError("facies log-stds must be positive")
        if any(not 0.0 < p < 0.4 for p in self.porosity_per_facies):
            raise ValueError("porosity per facies must lie in (0, 0.4)")

    def rotated(self, degrees: float) -> "ChannelPriorSpec":
        """Same prior with the orientation range shifted by ``degrees``."""
        lo, hi = self.orientation_deg
        return replace(self, orientation_deg=(lo + degrees, hi + degrees))


def reference_prior(prior: ChannelPriorSpec) -> ChannelPriorSpec:
    """Prior used for the synthetic truth: channels rotated by 90 degrees."""
    return prior.rotated(90.0)


@dataclass
class FieldRealization:
    grid: GridSpec
    log_perm: np.ndarray
    porosity: np.ndarray
    facies: np.ndarray
    seed: int
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def perm(self) -> np.ndarray:
        return np.exp(self.log_perm)

    @property
    def channel_fraction(self) -> float:
        return float(np.mean(self.facies == CHANNEL))

    def with_log_perm(self, log_perm: np.ndarray) -> "FieldRealization":
        """Copy with replaced log-permeability (porosity and facies frozen)."""
        lp = np.asarray(log_perm, dtype=float).reshape(self.grid.shape)
        return replace(self, log_perm=lp.copy())


@dataclass
class Ensemble:
    """Ordered parameter realizations plus provenance."""

    members: list[FieldRealization]
    metadata: dict[str, Any] = field(default_factory=dict)
    history: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def grid(self) -> GridSpec:
        return self.members[0].grid

    @property
    def seeds(self) -> list[int]:
        return [m.seed for m in self.members]

    def log_perm_matrix(self) -> np.ndarray:
        """(n_members, nx*ny) matrix of flattened log-permeability."""
        return np.stack([m.log_perm.ravel() for m in self.members])

    def with_log_perm(self, matrix: np.ndarray, note: str | None = None) -> "Ensemble":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape[0] != len(self.members):
            raise ValueError("row count does not match ensemble size")
        members = [m.with_log_perm(row) for m, row in zip(self.members, matrix)]
        history = self.history + ([note] if note else [])
        return Ensemble(members, dict(self.metadata), history)


# ---------------------------------------------------------------------------
# sampling


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return float(lo) if hi == lo else float(rng.uniform(lo, hi))


def _transverse_extent(grid: GridSpec, theta: float) -> float:
    return abs(grid.nx * math.sin(theta)) + abs(grid.ny * math.cos(theta))


def nominal_channel_fraction(prior: ChannelPriorSpec, grid: GridSpec) -> float:
    """Analytic channel-facies areal fraction expected from the prior.

    Treats channels as straight bands of the mean width placed uniformly
    across the transverse extent of the grid, with independent overlap, and
    counts an avulsion branch as half a channel.
    """
    theta = math.radians(0.5 * sum(prior.orientation_deg))
    extent = _transverse_extent(grid, theta)
    width = 0.5 * sum(prior.width_cells)
    n_mean = 0.5 * sum(prior.n_channels) * (1.0 + 0.5 * prior.avulsion_probability)
    return 1.0 - (1.0 - min(width / extent, 1.0)) ** n_mean


def _draw_geometry(prior: ChannelPriorSpec, grid: GridSpec, rng: np.random.Generator) -> list[dict]:
    lo, hi = prior.n_channels
    n = int(rng.integers(lo, hi + 1))
    channels: list[dict] = []
    for k in range(n):
        theta_deg = _uniform(rng, prior.orientation_deg)
        theta = math.radians(theta_deg)
        half = 0.5 * _transverse_extent(grid, theta)
        width = _uniform(rng, prior.width_cells)
        # aggradation: a new channel stacks near an older one with probability w / (1 + w)
        stack_p = prior.aggradation_weight / (1.0 + prior.aggradation_weight)
        if channels and rng.random() < stack_p:
            anchor = channels[int(rng.integers(len(channels)))]["offset"]
            offset = anchor + rng.normal(0.0, width)
        else:
            offset = rng.uniform(-half + 0.5 * width, half - 0.5 * width)
        ch = {
            "orientation_deg": theta_deg,
            "offset": float(np.clip(offset, -half, half)),
            "amplitude": _uniform(rng, prior.amplitude_cells),
            "wavelength": _uniform(rng, prior.wavelength_cells),
            "phase": float(rng.uniform(0.0, 2 * math.pi)),
            "width": width,
            "levee": _uniform(rng, prior.levee_width_cells),
            "avulsion": None,
        }
        if rng.random() < prior.avulsion_probability:
            span = 0.5 * (abs(grid.nx * math.cos(theta)) + abs(grid.ny * math.sin(theta)))
            ch["avulsion"] = {
                "split": float(rng.uniform(-0.5 * span, 0.5 * span)),
                "slope": float(rng.choice([-1.0, 1.0]) * rng.uniform(0.25, 0.6)),
                "amplitude": _uniform(rng, prior.amplitude_cells),
                "wavelength": _uniform(rng, prior.wavelength_cells),
            }
        channels.append(ch)
    return channels


def _render(channels: list[dict], grid: GridSpec) -> np.ndarray:
    ys, xs = np.mgrid[0:grid.ny, 0:grid.nx].astype(float)
    xc = xs + 0.5 - 0.5 * grid.nx
    yc = ys + 0.5 - 0.5 * grid.ny
    facies = np.full(grid.shape, BACKGROUND, dtype=np.int8)
    levee_mask = np.zeros(grid.shape, dtype=bool)
    channel_mask = np.zeros(grid.shape, dtype=bool)
    for ch in channels:
        th = math.radians(ch["orientation_deg"])
        u = xc * math.cos(th) + yc * math.sin(th)
        v = -xc * math.sin(th) + yc * math.cos(th)
        k = 2 * math.pi / ch["wavelength"]
        vc = ch["offset"] + ch["amplitude"] * np.sin(k * u + ch["phase"])
        slope = ch["amplitude"] * k * np.cos(k * u + ch["phase"])
        dist = np.abs(v - vc) / np.sqrt(1.0 + slope**2)
        av = ch["avulsion"]
        if av is not None:
            us = av["split"]
            vs = ch["offset"] + ch["amplitude"] * math.sin(k * us + ch["phase"])
            kb = 2 * math.pi / av["wavelength"]
            vb = vs + av["slope"] * (u - us) + av["amplitude"] * np.sin(kb * (u - us))
            sb = av["slope"] + av["amplitude"] * kb * np.cos(kb * (u - us))
            db = np.abs(v - vb) / np.sqrt(1.0 + sb**2)
            dist = np.where(u >= us, np.minimum(dist, db), dist)
        half_w = 0.5 * ch["width"]
        channel_mask |= dist <= half_w
        levee_mask |= dist <= half_w + ch["levee"]
    facies[levee_mask] = LEVEE
    facies[channel_mask] = CHANNEL
    return facies


def _smooth_unit_field(rng: np.random.Generator, grid: GridSpec, sigma: float) -> np.ndarray:
    z = rng.standard_normal(grid.shape)
    if sigma > 0:
        z = gaussian_filter(z, sigma, mode="wrap")
    z = (z - z.mean()) / z.std()
    return np.clip(z, -_Z_CLIP, _Z_CLIP)


def _properties(prior: ChannelPriorSpec, grid: GridSpec, facies: np.ndarray,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    z = _smooth_unit_field(rng, grid, prior.smoothing_cells)
    log_mean = np.log(np.asarray(prior.facies_perm_md, dtype=float))[facies]
    log_std = np.asarray(prior.facies_log_std, dtype=float)[facies]
    log_perm = log_mean + log_std * z
    poro = np.asarray(prior.porosity_per_facies, dtype=float)[facies]
    poro = poro + prior.porosity_noise * rng.standard_normal(grid.shape)
    return log_perm, np.clip(poro, 0.02, 0.38)


def sample_realization(prior: ChannelPriorSpec, grid: GridSpec, seed: int) -> FieldRealization:
    """Draw one realization; deterministic in (prior, grid, seed).

    A draw whose channel fraction falls outside [0.05, 0.6] is rejected and
    redrawn from the stream ``(seed, attempt)``. The no-channel prior is
    exempt from the lower bound since it cannot satisfy it by construction.
    """
    forced_empty = prior.n_channels[1] == 0
    for attempt in range(prior.max_retries):
        rng = np.random.default_rng([seed, attempt])
        channels = _draw_geometry(prior, grid, rng)
        facies = _render(channels, grid)
        frac = float(np.mean(facies == CHANNEL))
        if forced_empty or MIN_CHANNEL_FRACTION <= frac <= MAX_CHANNEL_FRACTION:
            log_perm, poro = _properties(prior, grid, facies, rng)
            return FieldRealization(
                grid=grid, log_perm=log_perm, porosity=poro, facies=facies, seed=int(seed),
                params={"channels": channels, "attempt": attempt},
            )
    raise GeomodelError(
        f"seed {seed}: no realization with channel fraction in "
        f"[{MIN_CHANNEL_FRACTION}, {MAX_CHANNEL_FRACTION}] after {prior.max_retries} attempts"
    )


def generate_ensemble(prior: ChannelPriorSpec, grid: GridSpec, n: int, base_seed: int) -> Ensemble:
    if n < 1:
        raise ValueError(f"ensemble size must be >= 1, got {n}")
    members = []
    for i in range(n):
        try:
            members.append(sample_realization(prior, grid, base_seed + i))
        except GeomodelError as exc:
            raise GeomodelError(f"member {i}: {exc}") from exc
    meta = {"prior": asdict(prior), "grid": asdict(grid), "base_seed": base_seed, "n": n}
    return Ensemble(members, meta, ["prior"])


# ---------------------------------------------------------------------------
# persistence


def member_dirname(i: int) -> str:
    return f"member_{i:04d}"


def write_realization(directory: str | Path, real: FieldRealization, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stack = np.stack([real.log_perm, real.porosity, real.facies.astype(float)])[:, None]
    write_gcsf(directory / "fields.gcsf", stack)
    meta = {"seed": real.seed, "grid": asdict(real.grid), "params": real.params}
    if extra:
        meta.update(extra)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_realization(directory: str | Path) -> FieldRealization:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    arr = read_gcsf(directory / "fields.gcsf")
    grid = GridSpec(**meta["grid"])
    if arr.shape != (3, 1, grid.ny, grid.nx):
        raise ValueError(f"{directory}: fields raster has shape {arr.shape}")
    return FieldRealization(
        grid=grid, log_perm=arr[0, 0], porosity=arr[1, 0],
        facies=arr[2, 0].astype(np.int8), seed=int(meta["seed"]), params=meta.get("params", {}),
    )


def write_ensemble(directory: str | Path, ens: Ensemble) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(ens.members):
        write_realization(directory / member_dirname(i), m, {"index": i})
    meta = {"n": len(ens), "metadata": ens.metadata, "history": ens.history}
    (directory / "ensemble.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_ensemble(directory: str | Path) -> Ensemble:
    directory = Path(directory)
    dirs = sorted(p for p in directory.glob("member_*") if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no member directories under {directory}")
    members = [read_realization(d) for d in dirs]
    info_path = directory / "ensemble.json"
    info = json.loads(info_path.read_text()) if info_path.exists() else {}
    return Ensemble(members, info.get("metadata", {}), info.get("history", []))
