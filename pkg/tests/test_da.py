import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccsda.da import (EsmdaConfig, ForwardModelError, HighFidelityForward, RmlConfig,
                      SurrogateForward, esmda_update, perturb_observations, rml_cost, run_esmda,
                      run_rml, run_sh_esmda, run_sh_rml)
from ccsda.da.esmda import truncated_inverse
from ccsda.da.rml import GaussianKernelCovariance, data_precision, fit_prior_covariance
from ccsda.geomodel import ChannelPriorSpec, Ensemble, GridSpec, sample_realization
from ccsda.simulator import SimConfig, observe, run_forward

from conftest import (LinearForward, finite_difference, linear_problem, relative_error,
                      tiny_surrogate)


def _copy_forward(fwd, kind):
    return LinearForward(fwd.matrix, fwd.monitor_cells, fwd.times, kind=kind)


# -- observation perturbation ---------------------------------------------

def test_vanishing_noise_returns_the_observations():
    d = np.arange(5.0)
    np.testing.assert_allclose(perturb_observations(d, 1e-14, 4.0, [0, 1, 2]), d, atol=1e-12)


@pytest.mark.parametrize("alpha", [1.0, 4.0])
def test_perturbation_covariance_is_alpha_sigma_squared(alpha):
    d = np.zeros(6)
    sigma = 0.7
    draws = np.stack([perturb_observations(d, sigma, alpha, [3, 0, j]) for j in range(20000)])
    cov = np.cov(draws.T)
    target = alpha * sigma ** 2
    assert np.all(np.abs(np.diag(cov) / target - 1.0) < 0.05)
    assert np.max(np.abs(cov - np.diag(np.diag(cov)))) < 0.05 * target
    with pytest.raises(ValueError):
        perturb_observations(d, sigma, 0.0, 0)


# -- analysis step ----------------------------------------------------------

def test_zero_spread_skips_the_update():
    params = np.ones((5, 3))
    pred = np.tile([1.0, 2.0], (5, 1))
    res = esmda_update(params, pred, np.zeros(2), 1.0, 1.0, EsmdaConfig())
    assert res.degenerate and res.warnings
    np.testing.assert_array_equal(res.params, params)


def test_update_input_validation():
    cfg = EsmdaConfig()
    with pytest.raises(ValueError):
        esmda_update(np.ones((1, 3)), np.ones((1, 2)), np.zeros(2), 1.0, 1.0, cfg)
    with pytest.raises(ValueError):
        esmda_update(np.ones((3, 3)), np.ones((2, 2)), np.zeros(2), 1.0, 1.0, cfg)
    with pytest.raises(ValueError):
        esmda_update(np.ones((3, 3)), np.ones((3, 2)), np.zeros(4), 1.0, 1.0, cfg)


def test_inflation_schedule_validation():
    assert EsmdaConfig(n_assimilations=4).alpha_schedule == (4.0,) * 4
    EsmdaConfig(n_assimilations=2, alphas=(1.5, 3.0))
    with pytest.raises(ValueError, match="sum"):
        EsmdaConfig(n_assimilations=2, alphas=(2.0, 3.0))
    with pytest.raises(ValueError):
        EsmdaConfig(n_assimilations=3, alphas=(2.0, 2.0))
    with pytest.raises(ValueError):
        EsmdaConfig(n_assimilations=0)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 8), seed=st.integers(0, 2 ** 16))
def test_full_energy_truncated_inverse_is_the_inverse(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    spd = a @ a.T + n * np.eye(n)
    inv, keep = truncated_inverse(spd, 1.0)
    assert keep == n
    np.testing.assert_allclose(inv @ spd, np.eye(n), atol=1e-10)


def test_single_update_matches_the_kalman_gain_formula():
    rng = np.random.default_rng(0)
    params = rng.normal(size=(30, 4))
    pred = params @ rng.normal(size=(4, 3)) + 0.1 * rng.normal(size=(30, 3))
    d_obs = rng.normal(size=3)
    cfg = EsmdaConfig(n_assimilations=1, svd_energy_cutoff=1.0, seed=5)
    res = esmda_update(params, pred, d_obs, 1.0, 0.3, cfg, bounds=None)
    c_md = np.cov(params.T, pred.T)[:4, 4:]
    c_dd = np.cov(pred.T)
    gain = c_md @ np.linalg.inv(c_dd + 0.09 * np.eye(3))
    perturbed = np.stack([perturb_observations(d_obs, 0.3, 1.0, [5, 0, j]) for j in range(30)])
    np.testing.assert_allclose(res.params, params + (perturbed - pred) @ gain.T, atol=1e-10)


# -- smoother drivers -------------------------------------------------------

def test_esmda_call_counts_and_fit():
    ens, obs, fwd = linear_problem(30)
    post, diag = run_esmda(fwd, ens, obs, EsmdaConfig(n_assimilations=4))
    assert diag.forward_calls == {"hf": 5 * 30, "surrogate": 0}
    assert diag.rmse("posterior") < diag.rmse("prior")
    assert post.history[-1].startswith("esmda")


def test_sh_esmda_call_counts():
    ens, obs, hf = linear_problem(12)
    sur = _copy_forward(hf, "surrogate")
    _, diag = run_sh_esmda(hf, sur, ens, obs, EsmdaConfig(n_assimilations=8, seed=2))
    assert diag.forward_calls == {"hf": 2 * 12, "surrogate": 7 * 12}


def test_substituting_the_simulator_for_the_surrogate_reproduces_esmda_bitwise():
    ens, obs, hf = linear_problem(15)
    cfg = EsmdaConfig(n_assimilations=4, seed=9)
    a, da = run_esmda(hf, ens, obs, cfg)
    b, db = run_sh_esmda(hf, hf, ens, obs, cfg)
    assert a.log_perm_matrix().tobytes() == b.log_perm_matrix().tobytes()
    assert da.posterior_predictions.tobytes() == db.posterior_predictions.tobytes()


def test_small_ensemble_warns():
    ens, obs, fwd = linear_problem(2)
    _, diag = run_esmda(fwd, ens, obs, EsmdaConfig())
    assert any("rank" in w for w in diag.warnings)


def test_mismatched_observation_layout_is_rejected():
    ens, obs, fwd = linear_problem(4)
    other = LinearForward(fwd.matrix, [(1, 1), (5, 5)], fwd.times)
    with pytest.raises(ValueError, match="different cells"):
        run_esmda(other, ens, obs, EsmdaConfig())


def test_esmda_is_deterministic_for_a_fixed_seed():
    ens, obs, fwd = linear_problem(10)
    a = run_esmda(fwd, ens, obs, EsmdaConfig(seed=4))[0].log_perm_matrix()
    b = run_esmda(fwd, ens, obs, EsmdaConfig(seed=4))[0].log_perm_matrix()
    c = run_esmda(fwd, ens, obs, EsmdaConfig(seed=5))[0].log_perm_matrix()
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


# -- RML cost and gradient --------------------------------------------------

def _rml_pieces(seed=0):
    ens, obs, fwd = linear_problem(12, seed=seed)
    cov = fit_prior_covariance(ens, nugget=0.1)
    precision = data_precision(obs, obs.noise_std, "measurement")
    return ens, obs, fwd, cov, precision


def test_rml_cost_is_zero_at_a_consistent_prior_point():
    ens, obs, fwd, cov, precision = _rml_pieces()
    member = ens.members[0]
    m = member.log_perm.ravel()
    cost, _ = rml_cost(m, m, fwd.matrix @ m, fwd, member, cov, precision)
    assert cost == pytest.approx(0.0, abs=1e-20)


def test_doubling_the_residual_quadruples_the_cost():
    ens, obs, fwd, cov, precision = _rml_pieces(1)
    member = ens.members[0]
    m0 = member.log_perm.ravel()
    step = np.random.default_rng(0).normal(size=m0.size)
    target = fwd.matrix @ m0
    once = rml_cost(m0 + step, m0, target, fwd, member, cov, precision, with_grad=False)[0]
    twice = rml_cost(m0 + 2 * step, m0, target, fwd, member, cov, precision, with_grad=False)[0]
    assert twice == pytest.approx(4.0 * once, rel=1e-12)


def test_rml_gradient_matches_finite_differences_for_a_linear_model():
    ens, obs, fwd, cov, precision = _rml_pieces(2)
    member = ens.members[1]
    m0 = member.log_perm.ravel().copy()
    m = m0 + 0.3
    target = obs.vector
    _, grad = rml_cost(m, m0, target, fwd, member, cov, precision)
    for i in np.random.default_rng(1).choice(m.size, size=6, replace=False):
        fd = finite_difference(
            lambda: rml_cost(m, m0, target, fwd, member, cov, precision, with_grad=False)[0],
            m, i, 1e-4)
        assert relative_error(grad[i], fd) < 1e-6


def test_rml_gradient_through_the_surrogate_matches_finite_differences():
    grid = GridSpec(nx=8, ny=8)
    cfg = SimConfig(n_steps=7)
    model = tiny_surrogate(grid, 8, seed=3)
    cells, times = [(2, 2), (5, 6)], [2, 4, 7]
    fwd = SurrogateForward(model, cfg.schedule, cells, times)
    member = sample_realization(ChannelPriorSpec(), grid, 0)
    ens_like = [sample_realization(ChannelPriorSpec(), grid, k) for k in range(12)]
    cov = fit_prior_covariance(Ensemble(ens_like, {}, []), nugget=0.1)
    precision = np.eye(6) / 0.25
    m0 = member.log_perm.ravel().copy()
    m = m0 + 0.2 * np.random.default_rng(5).normal(size=m0.size)
    target = fwd.evaluate([member])[0] + 1.0
    _, grad = rml_cost(m, m0, target, fwd, member, cov, precision)
    for i in np.random.default_rng(6).choice(m.size, size=5, replace=False):
        fd = finite_difference(
            lambda: rml_cost(m, m0, target, fwd, member, cov, precision, with_grad=False)[0],
            m, i, 1e-4)
        assert relative_error(grad[i], fd) < 1e-3


def test_scaling_the_cost_scales_the_gradient_only():
    ens, obs, fwd, cov, precision = _rml_pieces(3)
    member = ens.members[0]
    m0 = member.log_perm.ravel()
    m = m0 + 0.1
    c1, g1 = rml_cost(m, m0, obs.vector, fwd, member, cov, precision)
    c7, g7 = rml_cost(m, m0, obs.vector, fwd, member, cov, precision, scale=7.0)
    assert c7 == pytest.approx(7.0 * c1, rel=1e-12)
    d1, d7 = g1 / np.linalg.norm(g1), g7 / np.linalg.norm(g7)
    assert np.max(np.abs(d1 - d7)) < 1e-10


def test_kernel_covariance_solve_inverts_the_matrix():
    cov = GaussianKernelCovariance((6, 5), 1.5, 2.0, 0.05)
    c = cov.matrix()
    np.testing.assert_allclose(c, c.T, atol=1e-12)
    r = np.random.default_rng(0).normal(size=(3, 30))
    np.testing.assert_allclose(cov.solve(r @ c), r, atol=1e-8)
    with pytest.raises(ValueError):
        GaussianKernelCovariance((6, 5), 0.0, 1.0, 0.1)


def test_ensemble_data_precision_is_symmetric_positive_definite():
    ens, obs, fwd = linear_problem(10)
    pred = fwd.evaluate(ens.members)
    p = data_precision(obs, obs.noise_std, "ensemble", pred)
    np.testing.assert_allclose(p, p.T, atol=1e-10)
    assert np.all(np.linalg.eigvalsh(p) > 0)
    with pytest.raises(ValueError):
        data_precision(obs, obs.noise_std, "ensemble", None)


# -- RML driver -------------------------------------------------------------

def test_rml_reduces_cost_and_misfit_on_a_linear_problem():
    ens, obs, fwd = linear_problem(12, seed=4)
    post, diag = run_rml(ens, obs, fwd, RmlConfig(n_opt_steps=60, lr=0.05))
    summary = diag.to_dict()["cost"]
    assert summary["fraction_reduced"] == 1.0
    assert diag.rmse("posterior") < diag.rmse("prior")
    assert diag.gradient_calls == 12 * 60
    assert len(post) == 12


def test_zero_steps_keep_the_prior():
    ens, obs, fwd = linear_problem(6)
    post, diag = run_rml(ens, obs, fwd, RmlConfig(n_opt_steps=0))
    assert post.log_perm_matrix().tobytes() == ens.log_perm_matrix().tobytes()
    assert diag.cost_history.shape == (6, 1)


def test_rml_is_deterministic():
    ens, obs, fwd = linear_problem(5)
    cfg = RmlConfig(n_opt_steps=10, seed=3)
    a = run_rml(ens, obs, fwd, cfg)[0].log_perm_matrix()
    b = run_rml(ens, obs, fwd, cfg)[0].log_perm_matrix()
    assert a.tobytes() == b.tobytes()


def test_sh_rml_uses_the_simulator_for_prior_and_posterior_only():
    ens, obs, hf = linear_problem(8)
    sur = _copy_forward(hf, "surrogate")
    _, diag = run_sh_rml(ens, obs, sur, hf, RmlConfig(n_opt_steps=5))
    assert diag.forward_calls["hf"] == 2 * 8
    assert diag.forward_calls["surrogate"] == 6 * 8
    assert diag.method == "sh-rml"


def test_rml_without_gradients_is_rejected():
    grid = GridSpec(nx=8, ny=8)
    ens, obs, _ = linear_problem(4, grid=grid)
    hf = HighFidelityForward(SimConfig(n_steps=3), obs.monitor_cells, obs.times)
    with pytest.raises(ForwardModelError, match="gradient"):
        run_rml(ens, obs, hf, RmlConfig(n_opt_steps=1))


class _PoisonedForward(LinearForward):
    """Returns NaN for members whose first log-perm cell exceeds a threshold."""

    def _apply(self, members):
        out = super()._apply(members)
        bad = np.array([m.log_perm.flat[0] > 50.0 for m in members])
        out[bad] = np.nan
        return out


def test_non_finite_member_is_flagged_and_excluded():
    ens, obs, fwd = linear_problem(6)
    ens.members[2] = ens.members[2].with_log_perm(
        np.where(np.arange(64) == 0, 60.0, ens.members[2].log_perm.ravel()))
    poisoned = _PoisonedForward(fwd.matrix, fwd.monitor_cells, fwd.times)
    post, diag = run_rml(ens, obs, poisoned, RmlConfig(n_opt_steps=3), hf_forward=fwd)
    assert diag.flagged_members == [2]
    assert len(post) == 5 and diag.posterior_members == [0, 1, 3, 4, 5]
    assert any("member 2" in w for w in diag.warnings)


def test_rml_config_validation():
    for kwargs in ({"n_opt_steps": -1}, {"lr": 0.0}, {"nugget": 0.0},
                   {"data_covariance": "full"}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            RmlConfig(**kwargs)


# -- forward adapters ---------------------------------------------------------

def test_high_fidelity_forward_counts_and_matches_the_simulator():
    grid = GridSpec(nx=10, ny=10)
    cfg = SimConfig(n_steps=4)
    cells, times = [(2, 3), (7, 7)], [1, 4]
    members = [sample_realization(ChannelPriorSpec(), grid, k) for k in range(3)]
    fwd = HighFidelityForward(cfg, cells, times)
    pred = fwd.evaluate(members)
    assert fwd.calls == 3 and pred.shape == (3, 4)
    np.testing.assert_array_equal(pred[1], observe(run_forward(members[1], cfg), cells, times).ravel())
    pooled = HighFidelityForward(cfg, cells, times, workers=2).evaluate(members)
    assert pooled.tobytes() == pred.tobytes()


def test_simulator_failure_names_the_member():
    grid = GridSpec(nx=12, ny=12)
    fwd = HighFidelityForward(SimConfig(n_steps=3, max_cg_iters=1), [(1, 1)], [1])
    with pytest.raises(ForwardModelError) as info:
        fwd.evaluate([sample_realization(ChannelPriorSpec(), grid, 2)])
    assert info.value.member == 0


def test_surrogate_forward_rejects_frames_beyond_its_horizon():
    model = tiny_surrogate(GridSpec(nx=8, ny=8), 8)
    with pytest.raises(ValueError, match="horizon"):
        SurrogateForward(model, SimConfig(n_steps=7).schedule, [(1, 1)], [8])
