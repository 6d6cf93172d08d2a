import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccsda.geomodel import ChannelPriorSpec, GridSpec, sample_realization
from ccsda.simulator import (InjectionSchedule, ObservationSet, SimConfig, SimulationError,
                             assemble_pressure_matrix, default_monitor_cells, front_radius,
                             make_synthetic_truth, observe, read_observations, read_trajectory,
                             run_forward, tracer_balance_errors, transmissibilities,
                             write_observations, write_trajectory)

from conftest import homogeneous_field


def test_no_injection_leaves_the_state_untouched():
    grid = GridSpec(nx=12, ny=12)
    # a schedule needs one positive rate; the first six steps inject nothing
    cfg = SimConfig(n_steps=7, injection=InjectionSchedule((0.0,) * 6 + (100.0,)))
    traj = run_forward(homogeneous_field(grid), cfg)
    assert np.all(traj.pressure[:7] == cfg.p_init)
    assert np.all(traj.co2_fraction[:7] == cfg.f_init)
    assert traj.pressure[7].max() > cfg.p_init


def test_constant_injection_raises_well_pressure_and_orders_fronts():
    grid = GridSpec()
    cfg = SimConfig(n_steps=20, injection=InjectionSchedule.constant(300.0, 20))
    traj = run_forward(homogeneous_field(grid), cfg)
    ix, iy = cfg.well(grid)
    well_p = traj.pressure[:, iy, ix]
    assert np.all(np.diff(well_p) > 0)
    for n in range(1, cfg.n_steps + 1):
        r_p = front_radius(traj.pressure[n] - cfg.p_init > 0.1, (ix, iy))
        r_f = front_radius(traj.co2_fraction[n] > 0.5, (ix, iy))
        assert r_p >= r_f


@settings(max_examples=6, deadline=None)
@given(seed=st.integers(0, 10 ** 5))
def test_tracer_mass_balance_and_bounds(seed):
    grid = GridSpec(nx=16, ny=16)
    cfg = SimConfig(n_steps=12)
    real = sample_realization(ChannelPriorSpec(), grid, seed)
    traj = run_forward(real, cfg)
    assert np.max(tracer_balance_errors(real, cfg, traj)) < 1e-6
    assert traj.co2_fraction.min() >= 0.0 and traj.co2_fraction.max() <= 1.0
    assert np.all(np.isfinite(traj.pressure))


def test_homogeneous_centered_well_is_rotation_symmetric():
    grid = GridSpec(nx=17, ny=17)
    cfg = SimConfig(n_steps=6)
    traj = run_forward(homogeneous_field(grid), cfg)
    assert cfg.well(grid) == (8, 8)
    for p in traj.pressure:
        for k in (1, 2, 3):
            assert np.max(np.abs(np.rot90(p, k) - p)) < 1e-8


def test_doubling_permeability_never_raises_the_well_pressure_rise():
    grid = GridSpec(nx=16, ny=16)
    cfg = SimConfig(n_steps=10)
    ix, iy = cfg.well(grid)
    low = run_forward(homogeneous_field(grid, 50.0), cfg).pressure[:, iy, ix]
    high = run_forward(homogeneous_field(grid, 100.0), cfg).pressure[:, iy, ix]
    assert np.all(high - cfg.p_init <= low - cfg.p_init + 1e-12)


def test_pressure_matrix_is_symmetric_with_positive_diagonal():
    grid = GridSpec(nx=10, ny=9)
    real = sample_realization(ChannelPriorSpec(), grid, 4)
    tx, ty = transmissibilities(real, 0.15)
    A = assemble_pressure_matrix(tx, ty, np.full(grid.shape, 0.3))
    assert abs(A - A.T).max() == 0.0
    assert np.all(A.diagonal() > 0)
    run_forward(real, SimConfig(n_steps=2), check_spd=True)


def test_default_calibration_spans_the_target_pressure_range():
    grid = GridSpec()
    cfg = SimConfig()
    real = sample_realization(ChannelPriorSpec(), grid, 0)
    traj = run_forward(real, cfg)
    ix, iy = cfg.well(grid)
    assert traj.pressure[0, iy, ix] == 200.0
    assert 250.0 < traj.pressure[-1, iy, ix] < 380.0


def test_solver_failure_reports_step_and_residual():
    grid = GridSpec(nx=12, ny=12)
    cfg = SimConfig(n_steps=3, max_cg_iters=1)
    real = sample_realization(ChannelPriorSpec(), grid, 2)
    with pytest.raises(SimulationError) as info:
        run_forward(real, cfg)
    assert info.value.step == 1
    assert info.value.residual > cfg.linear_solver_tol


@pytest.mark.parametrize("kwargs", [{"n_steps": 0}, {"dt": 0.0}, {"p_init": -1.0},
                                    {"linear_solver_tol": 0.1}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SimConfig(**kwargs)


def test_schedule_validation():
    with pytest.raises(ValueError):
        InjectionSchedule((0.0, 0.0))
    with pytest.raises(ValueError):
        InjectionSchedule((1.0, -1.0))
    with pytest.raises(ValueError):
        SimConfig(n_steps=3, injection=InjectionSchedule((1.0, 1.0)))
    assert InjectionSchedule.ramp((1.0, 2.0, 3.0), 6).rates == (1.0, 1.0, 2.0, 2.0, 3.0, 3.0)


def test_observe_shapes_and_initial_row():
    grid = GridSpec()
    cfg = SimConfig()
    traj = run_forward(homogeneous_field(grid), cfg)
    cells = default_monitor_cells(grid)
    assert cells == [(8, 8), (24, 8), (24, 24), (8, 24)]
    np.testing.assert_array_equal(observe(traj, cells, [0]), np.full((1, 4), cfg.p_init))
    full = observe(traj, cells, range(1, 62))
    assert full.shape == (61, 4)
    np.testing.assert_array_equal(full, observe(traj, cells, range(1, 62)))
    with pytest.raises(IndexError):
        observe(traj, [(32, 0)], [1])
    with pytest.raises(IndexError):
        observe(traj, cells, [62])


def test_synthetic_truth_noise_statistics():
    grid = GridSpec()
    cfg = SimConfig()
    ref = sample_realization(ChannelPriorSpec().rotated(90.0), grid, 7)
    clean = make_synthetic_truth(ref, cfg, 1e-12, seed=1)
    noiseless = observe(run_forward(ref, cfg), default_monitor_cells(grid), range(1, 62))
    assert np.max(np.abs(clean.values - noiseless)) < 1e-9
    noisy = make_synthetic_truth(ref, cfg, 1.0, seed=11)
    assert abs(np.std(noisy.values - noiseless) - 1.0) < 0.1
    again = make_synthetic_truth(ref, cfg, 1.0, seed=11)
    np.testing.assert_array_equal(noisy.values, again.values)
    with pytest.raises(ValueError):
        make_synthetic_truth(ref, cfg, 1.0, seed=1, monitor_cells=[cfg.well(grid)])


def test_observation_set_validation():
    with pytest.raises(ValueError):
        ObservationSet([(1, 1), (1, 1)], [1], np.zeros((1, 2)), 1.0, 0)
    with pytest.raises(ValueError):
        ObservationSet([(1, 1)], [1], np.zeros((1, 1)), 0.0, 0)


def test_trajectory_and_observation_files_round_trip(tmp_path, short_sim):
    grid = GridSpec(nx=12, ny=12)
    real = sample_realization(ChannelPriorSpec(), grid, 5)
    traj = run_forward(real, short_sim)
    write_trajectory(tmp_path / "traj.gcsf", traj)
    back = read_trajectory(tmp_path / "traj.gcsf")
    np.testing.assert_allclose(back.pressure, traj.pressure, rtol=1e-6)
    obs = make_synthetic_truth(real, short_sim, 0.5, seed=3, monitor_cells=[(2, 2), (9, 3)])
    write_observations(tmp_path / "obs.csv", obs)
    assert (tmp_path / "obs.csv").read_text().splitlines()[0] == "step,point,value_bar"
    loaded = read_observations(tmp_path / "obs.csv")
    np.testing.assert_array_equal(loaded.values, obs.values)
    assert loaded.monitor_cells == obs.monitor_cells and loaded.times == obs.times
    assert loaded.noise_std == 0.5
