"""Experiment stages behind the CLI subcommands.

Layout under the output directory::

    manifest.json  config.ini
    prior/   member_####/fields.gcsf      assimilation prior
    train/   member_####/{fields,traj}.gcsf  surrogate training set
    truth/   fields.gcsf  obs.csv  obs.json
    surrogate/  model.gcsw  loss_history.csv  train_report.json
    runs/<method>/  posterior/  diagnostics.json  misfits.csv  timings.json
    report/  report.json  misfit_quantiles.csv  calls.csv  rmse_vs_size.csv  timings.csv
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..da.esmda import run_esmda, run_sh_esmda
from ..da.forward import HighFidelityForward, SurrogateForward
from ..da.rml import run_rml, run_sh_rml
from ..gcsf import FormatError
from ..geomodel import (generate_ensemble, member_dirname, read_ensemble, sample_realization,
                        write_ensemble, write_realization)
from ..simulator import (SimulationError, make_synthetic_truth, read_observations,
                         read_trajectory, run_forward, write_observations, write_trajectory)
from ..surrogate.data import build_dataset, encode_input, encode_target
from ..surrogate.fno import FNO, init_weights
from ..surrogate.model import SurrogateModel, check_grid, read_checkpoint, write_checkpoint
from ..surrogate.training import (mean_predictor_rmse, rmse_report, size_study, train,
                                  write_history)
from .config import ExperimentConfig, render_config

log = logging.getLogger(__name__)

METHODS = ("esmda", "rml", "sh-esmda", "sh-rml")
TRAJ_NAME = "traj.gcsf"
CHECKPOINT_NAME = "model.gcsw"


class PipelineError(RuntimeError):
    """Missing or inconsistent inputs between stages (a usage problem)."""


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _train_config(cfg: ExperimentConfig):
    return replace(cfg.train, seed=cfg.seeds.shuffle)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    sc = cfg.scenario
    prior = generate_ensemble(cfg.prior, cfg.grid, sc.n_members, cfg.seeds.prior)
    write_ensemble(out / "prior", prior)
    train_set = generate_ensemble(cfg.prior, cfg.grid, sc.n_train, cfg.seeds.train_data)
    write_ensemble(out / "train", train_set)

    truth_dir = out / "truth"
    truth = sample_realization(cfg.prior.rotated(sc.truth_rotation_deg), cfg.grid, cfg.seeds.truth)
    write_realization(truth_dir, truth, extra={"rotation_deg": sc.truth_rotation_deg})
    obs = make_synthetic_truth(truth, cfg.sim, sc.noise_std, cfg.seeds.noise,
                               cfg.monitor_cells(), cfg.observation_times())
    write_observations(truth_dir / "obs.csv", obs)

    (out / "config.ini").write_text(render_config(cfg))
    manifest = {
        "config_hash": cfg.hash(),
        "truth_hash": _file_hash(truth_dir / "obs.csv"),
        "n_members": sc.n_members,
        "n_train": sc.n_train,
        "n_obs": obs.n_obs,
        "truth_channel_fraction": truth.channel_fraction,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def _manifest(out: Path) -> dict:
    path = out / "manifest.json"
    if not path.exists():
        raise PipelineError(f"{out} has no manifest.json; run 'generate' first")
    return json.loads(path.read_text())


# ---------------------------------------------------------------------------
# simulate


def _simulate_one(args) -> str | None:
    member_dir, fields, sim_cfg = args
    try:
        traj = run_forward(fields, sim_cfg)
    except SimulationError as exc:
        return str(exc)
    write_trajectory(member_dir / TRAJ_NAME, traj)
    return None


def _valid_trajectory(path: Path, n_frames: int, shape: tuple[int, int]) -> bool:
    try:
        traj = read_trajectory(path)
    except (OSError, FormatError, ValueError):
        return False
    return traj.pressure.shape == (n_frames, *shape)


def cmd_simulate(cfg: ExperimentConfig, out: Path, ensemble_dir: Path | None = None,
                 workers: int = 1) -> dict:
    """Simulate every member lacking a valid trajectory; failures are recorded."""
    ensemble_dir = ensemble_dir or out / "train"
    if not (ensemble_dir / "ensemble.json").exists():
        raise PipelineError(f"no ensemble at {ensemble_dir}; run 'generate' first")
    ens = read_ensemble(ensemble_dir)
    n_frames = cfg.sim.n_steps + 1
    jobs, skipped = [], 0
    for i, fields in enumerate(ens.members):
        member_dir = ensemble_dir / member_dirname(i)
        if _valid_trajectory(member_dir / TRAJ_NAME, n_frames, cfg.grid.shape):
            skipped += 1
            continue
        jobs.append((i, (member_dir, fields, cfg.sim)))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            errors = list(pool.map(_simulate_one, [job for _, job in jobs]))
    else:
        errors = [_simulate_one(job) for _, job in jobs]
    failures = {str(i): err for (i, _), err in zip(jobs, errors) if err is not None}
    for i, err in failures.items():
        log.error("member %s failed: %s", i, err)
    summary = {"n_members": len(ens), "simulated": len(jobs) - len(failures),
               "skipped": skipped, "failures": failures}
    _write_json(ensemble_dir / "simulate.json", summary)
    return summary


# ---------------------------------------------------------------------------
# train


def load_training_arrays(cfg: ExperimentConfig, dataset_dir: Path) -> tuple[np.ndarray, np.ndarray]:
    ens = read_ensemble(dataset_dir)
    schedule = cfg.sim.schedule
    inputs, targets = [], []
    for i, fields in enumerate(ens.members):
        path = dataset_dir / member_dirname(i) / TRAJ_NAME
        if not path.exists():
            raise PipelineError(f"member {i} has no trajectory; run 'simulate' first")
        inputs.append(encode_input(fields, schedule, cfg.grid, cfg.sim.n_steps))
        targets.append(encode_target(read_trajectory(path)))
    return np.array(inputs, dtype=np.float32), np.array(targets, dtype=np.float32)


def cmd_train(cfg: ExperimentConfig, out: Path, dataset_dir: Path | None = None) -> dict:
    dataset_dir = dataset_dir or out / "train"
    if not (dataset_dir / "ensemble.json").exists():
        raise PipelineError(f"no dataset at {dataset_dir}; run 'generate' and 'simulate' first")
    raw_x, raw_y = load_training_arrays(cfg, dataset_dir)
    if len(raw_x) < 10:
        raise PipelineError(f"need at least 10 training samples, found {len(raw_x)}")
    tcfg = _train_config(cfg)
    data = build_dataset(raw_x, raw_y, tcfg.split_fraction, tcfg.seed, dtype=tcfg.dtype)
    init = init_weights(cfg.surrogate, cfg.seeds.init)
    result = train(data, cfg.surrogate, tcfg, init=init)

    model_dir = out / "surrogate"
    model_dir.mkdir(parents=True, exist_ok=True)
    model = SurrogateModel(result.weights, data.in_norm, data.out_norm, cfg.sim.n_steps + 1)
    write_checkpoint(model_dir / CHECKPOINT_NAME, model)
    write_history(model_dir / "loss_history.csv", result.history)

    fno = FNO(cfg.surrogate, data.inputs.shape[2:])
    report = {
        "config_hash": cfg.hash(),
        "n_samples": int(data.n_samples),
        "n_train": int(len(data.train_idx)),
        "n_test": int(len(data.test_idx)),
        "test_rmse": rmse_report(fno, result.weights, data, data.test_idx, dtype=tcfg.dtype),
        "untrained_rmse": rmse_report(fno, result.initial, data, data.test_idx, dtype=tcfg.dtype),
        "mean_predictor_rmse": mean_predictor_rmse(data),
        "units": {"rmse_p": "bar", "rmse_f": "molar fraction"},
    }
    if cfg.scenario.size_study:
        rows = size_study(raw_x, raw_y, cfg.scenario.size_study, cfg.surrogate, tcfg,
                          cfg.seeds.init)
        report["size_study"] = rows
        _write_rmse_table(model_dir / "rmse_vs_size.csv", rows)
    _write_json(model_dir / "train_report.json", report)
    return report


def _write_rmse_table(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_train", "test_rmse_p", "test_rmse_f"])
        for r in rows:
            writer.writerow([r["n_train"], f"{r['rmse_p']:.6f}", f"{r['rmse_f']:.6f}"])


# ---------------------------------------------------------------------------
# assimilate


def load_surrogate(cfg: ExperimentConfig, path: Path) -> SurrogateModel:
    model = read_checkpoint(path, dtype=np.dtype(cfg.scenario.compute_dtype))
    check_grid(model, cfg.grid)
    if model.nt != cfg.sim.n_steps + 1:
        raise PipelineError(f"surrogate covers {model.nt} frames, scenario has {cfg.sim.n_steps + 1}")
    return model


def cmd_assimilate(cfg: ExperimentConfig, out: Path, method: str, checkpoint: Path | None = None,
                   workers: int = 1, run_name: str | None = None) -> dict:
    if method not in METHODS:
        raise PipelineError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    manifest = _manifest(out)
    prior = read_ensemble(out / "prior")
    obs = read_observations(out / "truth" / "obs.csv")
    cells, times = obs.monitor_cells, obs.times
    hf = HighFidelityForward(cfg.sim, cells, times, workers=workers)

    surrogate = None
    if method != "esmda":
        checkpoint = checkpoint or out / "surrogate" / CHECKPOINT_NAME
        if not checkpoint.exists():
            need = "a gradient-capable forward model" if method == "rml" else "a trained surrogate"
            raise PipelineError(f"method {method} needs {need}: no checkpoint at {checkpoint}; "
                                f"run 'train' first or pass --checkpoint")
        model = load_surrogate(cfg, checkpoint)
        surrogate = SurrogateForward(model, cfg.sim.schedule, cells, times,
                                     batch_size=cfg.scenario.eval_batch_size)

    ecfg = replace(cfg.esmda, seed=cfg.seeds.perturbation)
    rcfg = replace(cfg.rml, seed=cfg.seeds.rml)
    if method == "esmda":
        posterior, diag = run_esmda(hf, prior, obs, ecfg)
    elif method == "sh-esmda":
        posterior, diag = run_sh_esmda(hf, surrogate, prior, obs, ecfg)
    elif method == "rml":
        posterior, diag = run_rml(prior, obs, surrogate, rcfg)
    else:
        posterior, diag = run_sh_rml(prior, obs, surrogate, hf, rcfg)

    run_dir = out / "runs" / (run_name or method)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_ensemble(run_dir / "posterior", posterior)
    extra = {"config_hash": cfg.hash(), "truth_hash": manifest["truth_hash"],
             "n_assimilations": cfg.esmda.n_assimilations, "n_opt_steps": cfg.rml.n_opt_steps}
    diag.write_json(run_dir / "diagnostics.json", extra=extra, include_timings=False)
    diag.write_misfits_csv(run_dir / "misfits.csv")
    _write_json(run_dir / "timings.json", {"wall_clock_s": diag.wall_clock,
                                           "phases_s": diag.timings})
    return diag.to_dict()


# ---------------------------------------------------------------------------
# report


def _load_run(run_dir: Path) -> dict:
    path = run_dir / "diagnostics.json"
    if not path.exists():
        raise PipelineError(f"{run_dir} is not a completed run (no diagnostics.json)")
    data = json.loads(path.read_text())
    timings = run_dir / "timings.json"
    data["_wall_clock"] = json.loads(timings.read_text())["wall_clock_s"] if timings.exists() else None
    data["_name"] = run_dir.name
    return data


def cmd_report(cfg: ExperimentConfig, out: Path, run_dirs: list[Path] | None = None) -> dict:
    if run_dirs is None:
        root = out / "runs"
        run_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.exists() else []
    if not run_dirs:
        raise PipelineError("no completed runs to report on")
    runs = [_load_run(Path(d)) for d in run_dirs]
    truths = {r["truth_hash"] for r in runs}
    if len(truths) > 1:
        raise PipelineError("runs were assimilated against different truths; refusing to compare")

    methods = {}
    for r in runs:
        methods[r["_name"]] = {
            "method": r["method"],
            "config_hash": r["config_hash"],
            "forward_calls": r["forward_calls"],
            "prior": r.get("prior"),
            "posterior": r.get("posterior"),
            "cost": r.get("cost"),
            "flagged_members": r["flagged_members"],
            "warnings": r["warnings"],
        }
    base = next((r for r in runs if r["method"] == "esmda"), None)
    speedup = {}
    if base is not None:
        for r in runs:
            if r is not base and r["forward_calls"].get("hf"):
                speedup[r["_name"]] = base["forward_calls"]["hf"] / r["forward_calls"]["hf"]

    report = {
        "scenario": next(iter(truths)),
        "config_hashes": sorted({r["config_hash"] for r in runs}),
        "methods": methods,
        "hf_call_speedup_vs_esmda": speedup,
    }
    train_report = out / "surrogate" / "train_report.json"
    if train_report.exists():
        tr = json.loads(train_report.read_text())
        report["surrogate"] = {k: tr[k] for k in ("test_rmse", "mean_predictor_rmse", "n_train")}
        report["rmse_vs_size"] = tr.get("size_study", [])

    rep_dir = out / "report"
    rep_dir.mkdir(parents=True, exist_ok=True)
    _write_json(rep_dir / "report.json", report)
    _write_quantiles(rep_dir / "misfit_quantiles.csv", runs)
    _write_calls(rep_dir / "calls.csv", runs, speedup)
    _write_rmse_table(rep_dir / "rmse_vs_size.csv", report.get("rmse_vs_size", []))
    _write_timings(rep_dir / "timings.csv", runs, base)
    return report


def _write_quantiles(path: Path, runs: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "stage", "point", "min", "q1", "median", "q3", "max"])
        for r in runs:
            for stage in ("prior", "posterior"):
                if not r.get(stage):
                    continue
                for k, box in enumerate(r[stage]["box"]):
                    writer.writerow([r["_name"], stage, k] + [f"{box[q]:.6f}" for q in
                                                              ("min", "q1", "median", "q3", "max")])


def _write_calls(path: Path, runs: list[dict], speedup: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "hf_calls", "surrogate_calls", "hf_call_speedup_vs_esmda"])
        for r in runs:
            calls = r["forward_calls"]
            ratio = speedup.get(r["_name"])
            writer.writerow([r["_name"], calls.get("hf", 0), calls.get("surrogate", 0),
                             f"{ratio:.4f}" if ratio is not None else ""])


def _write_timings(path: Path, runs: list[dict], base: dict | None) -> None:
    """Wall-clock table; unlike the other outputs it varies between runs."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "wall_clock_s", "speedup_vs_esmda"])
        for r in runs:
            wall = r["_wall_clock"]
            ratio = ""
            if base is not None and wall and base["_wall_clock"]:
                ratio = f"{base['_wall_clock'] / wall:.3f}"
            writer.writerow([r["_name"], f"{wall:.3f}" if wall is not None else "", ratio])
