"""Experiment configuration: INI sections mapped onto the module dataclasses.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#``
starts a comment (``;`` only at the start of a line). Tuples are
comma-separated, ``none`` (or an empty value) selects the computed default.
Unknown sections or keys are errors that name the offending line.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from ..da.esmda import EsmdaConfig
from ..da.rml import RmlConfig
from ..geomodel import ChannelPriorSpec, GridSpec
from ..simulator import InjectionSchedule, SimConfig
from ..surrogate.fno import FnoConfig
from ..surrogate.training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSettings:
    n_members: int = 100
    truth_rotation_deg: float = 90.0
    noise_std: float = 1.0
    monitor_cells: tuple[tuple[int, int], ...] | None = None
    n_train: int = 500
    size_study: tuple[int, ...] = ()
    eval_batch_size: int = 1
    compute_dtype: str = "float32"


SEED_NAMES = ("prior", "truth", "noise", "train_data", "perturbation", "shuffle", "init", "rml")


@dataclass(frozen=True)
class Seeds:
    prior: int = 1000
    truth: int = 7
    noise: int = 11
    train_data: int = 50000
    perturbation: int = 21
    shuffle: int = 0
    init: int = 0
    rml: int = 31


# Desk-scale network: the module defaults (width 64, projection 128, GELU) are
# kept in FnoConfig, the shipped scenario uses a lighter net so that every
# experiment fits a single CPU core.
DESK_FNO = FnoConfig(n_layers=3, modes=(6, 6, 8), width=12, activation="relu", proj_width=32)
DESK_TRAIN = TrainConfig(lr=3e-3, epochs=20, batch_size=4)


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    prior: ChannelPriorSpec = field(default_factory=ChannelPriorSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    surrogate: FnoConfig = DESK_FNO
    train: TrainConfig = DESK_TRAIN
    esmda: EsmdaConfig = field(default_factory=EsmdaConfig)
    rml: RmlConfig = field(default_factory=RmlConfig)
    scenario: ScenarioSettings = field(default_factory=ScenarioSettings)
    seeds: Seeds = field(default_factory=Seeds)
    out_dir: str = "runs/default"

    def monitor_cells(self) -> list[tuple[int, int]]:
        from ..simulator import default_monitor_cells
        cells = self.scenario.monitor_cells
        return [tuple(c) for c in cells] if cells else default_monitor_cells(self.grid)

    def observation_times(self) -> list[int]:
        return list(range(1, self.sim.n_steps + 1))

    def to_dict(self) -> dict:
        out = {}
        for name in ("grid", "prior", "sim", "surrogate", "train", "esmda", "rml", "scenario",
                     "seeds"):
            out[name] = asdict(getattr(self, name))
        out["sim"]["injection"] = list(self.sim.schedule.rates)
        return json.loads(json.dumps(out))

    def hash(self) -> str:
        """SHA-256 over the materialized settings (output location excluded)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# section name -> (attribute, dataclass type)
_SECTIONS = {
    "grid": ("grid", GridSpec),
    "prior": ("prior", ChannelPriorSpec),
    "sim": ("sim", SimConfig),
    "surrogate": ("surrogate", FnoConfig),
    "train": ("train", TrainConfig),
    "esmda": ("esmda", EsmdaConfig),
    "rml": ("rml", RmlConfig),
    "seeds": ("seeds", Seeds),
}
# keys living in a section but stored on ScenarioSettings
_SCENARIO_KEYS = {
    "prior": ("n_members", "truth_rotation_deg"),
    "sim": ("noise_std", "monitor_cells"),
    "train": ("n_train", "size_study"),
    "surrogate": ("eval_batch_size", "compute_dtype"),
}
_SIM_ALIASES = {"rates": "injection"}


def _line_of(text: str, section: str, key: str | None) -> int | None:
    current = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if key is None and current == section:
                return no
        elif current == section and key is not None and "=" in line:
            if line.split("=", 1)[0].strip().lower() == key:
                return no
    return None


def _parse_value(raw: str, default: Any, key: str) -> Any:
    text = raw.strip()
    if text.lower() in ("", "none"):
        return None
    if key == "monitor_cells":
        pairs = [p.strip() for p in text.split(";") if p.strip()]
        return tuple(tuple(int(v) for v in p.split(",")) for p in pairs)
    if key == "well_cell":
        return tuple(int(v) for v in text.split(","))
    if key in ("injection", "rates"):
        return InjectionSchedule(tuple(float(v) for v in text.split(",")))
    if isinstance(default, bool):
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, tuple) or key in ("alphas", "size_study"):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        kind = type(default[0]) if default else float
        if key == "size_study":
            kind = int
        return tuple(kind(p) for p in parts)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        try:
            return float(text)
        except ValueError:
            if default is None:
                return text
            raise
    return text


def _defaults() -> dict[str, Any]:
    base = ExperimentConfig()
    return {section: getattr(base, attr) for section, (attr, _) in _SECTIONS.items()}


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None,
                text: str | None = None) -> ExperimentConfig:
    """Read an INI file (or ``text``) on top of the defaults and validate it."""
    if text is None:
        text = Path(path).read_text() if path is not None else ""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str.lower
    try:
        parser.read_string(text, source=str(path or "<config>"))
    except configparser.Error as exc:
        raise ConfigError(f"{path or '<config>'}: {exc}") from exc

    base = _defaults()
    updates: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    scenario: dict[str, Any] = {}
    out_dir = ExperimentConfig().out_dir
    where = str(path or "<config>")

    for section in parser.sections():
        name = section.lower()
        if name == "paths":
            for key, raw in parser.items(section):
                if key != "out":
                    raise ConfigError(f"{where}:{_line_of(text, name, key)}: unknown key "
                                      f"'{key}' in [paths]")
                out_dir = raw.strip()
            continue
        if name not in _SECTIONS:
            raise ConfigError(f"{where}:{_line_of(text, name, None)}: unknown section [{section}]")
        obj = base[name]
        names = {f.name for f in fields(obj)}
        for key, raw in parser.items(section):
            target = _SIM_ALIASES.get(key, key) if name == "sim" else key
            line = _line_of(text, name, key)
            if key == "seed" and name != "seeds":
                raise ConfigError(f"{where}:{line}: seeds are set in the [seeds] section, "
                                  f"not [{name}]")
            try:
                if target in _SCENARIO_KEYS.get(name, ()):
                    value = _parse_value(raw, getattr(ScenarioSettings(), target), target)
                    if value is None and target == "size_study":
                        value = ()
                    elif value is None and target != "monitor_cells":
                        raise ValueError("a value is required")
                    scenario[target] = value
                elif target in names:
                    value = _parse_value(raw, getattr(obj, target), target)
                    if value is None and getattr(obj, target) is not None and \
                            target not in ("alphas", "noise_std", "corr_length", "variance"):
                        raise ValueError("a value is required")
                    updates[name][target] = value
                else:
                    raise ConfigError(f"{where}:{line}: unknown key '{key}' in [{name}]")
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{where}:{line}: bad value for {name}.{key}: {exc}") from exc

    for key, raw in (overrides or {}).items():
        seed_key = key.split(".", 1)[1] if key.startswith("seeds.") else key
        if seed_key not in SEED_NAMES:
            raise ConfigError(f"unknown seed '{key}' (known: {', '.join(SEED_NAMES)})")
        try:
            updates["seeds"][seed_key] = int(raw)
        except ValueError as exc:
            raise ConfigError(f"seed override {key}={raw!r} is not an integer") from exc

    built = {}
    for name, (attr, _) in _SECTIONS.items():
        try:
            built[attr] = replace(base[name], **updates[name])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: invalid [{name}] section: {exc}") from exc
    try:
        built["scenario"] = _validate_scenario(ScenarioSettings(**scenario), built)
    except _FieldError as exc:
        section = next(sec for sec, keys in _SCENARIO_KEYS.items() if exc.key in keys)
        line = _line_of(text, section, exc.key)
        raise ConfigError(f"{where}:{line if line else '-'}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return ExperimentConfig(**built, out_dir=out_dir)


class _FieldError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key


def _validate_scenario(s: ScenarioSettings, built: dict) -> ScenarioSettings:
    if s.n_members < 2:
        raise _FieldError("n_members", f"n_members must be >= 2, got {s.n_members}")
    if s.n_train < 10:
        raise _FieldError("n_train", f"n_train must be >= 10, got {s.n_train}")
    if any(n < 10 or n > s.n_train for n in s.size_study):
        raise _FieldError("size_study", "size_study entries must lie in [10, n_train]")
    if s.noise_std <= 0:
        raise _FieldError("noise_std", "noise_std must be positive")
    if s.compute_dtype not in ("float32", "float64"):
        raise _FieldError("compute_dtype", "compute_dtype must be float32 or float64")
    if s.eval_batch_size < 1:
        raise _FieldError("eval_batch_size", "eval_batch_size must be >= 1")
    grid = built["grid"]
    for ix, iy in s.monitor_cells or ():
        if not (0 <= ix < grid.nx and 0 <= iy < grid.ny):
            raise _FieldError("monitor_cells", f"monitor cell {(ix, iy)} outside the grid")
    nt = built["sim"].n_steps + 1
    built["surrogate"].check_shape((grid.nx, grid.ny, nt))
    return s


def render_config(cfg: ExperimentConfig) -> str:
    """INI text that reloads to ``cfg`` (used to record materialized settings)."""
    d = cfg.to_dict()
    lines = []
    scen = d.pop("scenario")
    placement = {k: sec for sec, keys in _SCENARIO_KEYS.items() for k in keys}
    for section in _SECTIONS:
        lines.append(f"[{section}]")
        values = dict(d[section])
        values.update({k: scen[k] for k, sec in placement.items() if sec == section})
        for key, value in values.items():
            if key == "seed" and section != "seeds":
                continue
            if section == "sim" and key == "injection":
                key = "rates"
            lines.append(f"{key} = {_format_value(key, value)}")
        lines.append("")
    lines += ["[paths]", f"out = {cfg.out_dir}", ""]
    return "\n".join(lines)


def _format_value(key: str, value: Any) -> str:
    if value is None:
        return "none"
    if key == "monitor_cells":
        return "; ".join(f"{a}, {b}" for a, b in value)
    if isinstance(value, (list, tuple)):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)
