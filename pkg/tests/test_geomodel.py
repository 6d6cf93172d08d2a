from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import find_peaks

from ccsda.geomodel import (ChannelPriorSpec, GeomodelError, GridSpec, generate_ensemble,
                            nominal_channel_fraction, read_ensemble, sample_realization,
                            write_ensemble)

DEFAULT = ChannelPriorSpec()
GRID = GridSpec()


def test_default_field_is_bimodal_in_log_perm():
    real = sample_realization(DEFAULT, GRID, seed=7)
    counts, edges = np.histogram(real.log_perm, bins=40)
    smooth = np.convolve(counts, np.ones(3) / 3, mode="same")
    peaks, _ = find_peaks(smooth, prominence=0.05 * smooth.max())
    centers = 0.5 * (edges[1:] + edges[:-1])
    top = peaks[np.argsort(smooth[peaks])[-2:]]
    assert len(top) == 2
    assert abs(centers[top[1]] - centers[top[0]]) >= 1.5


def test_no_channel_prior_gives_background_statistics():
    prior = replace(DEFAULT, n_channels=(0, 0))
    real = sample_realization(prior, GRID, seed=3)
    assert np.all(real.facies == 0)
    target = prior.facies_log_std[0]
    assert abs(real.log_perm.std() - target) <= 0.1 * target


def test_same_inputs_give_bit_identical_rasters():
    a = sample_realization(DEFAULT, GRID, seed=11)
    b = sample_realization(DEFAULT, GRID, seed=11)
    for name in ("log_perm", "porosity", "facies"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_realization_invariants(seed):
    real = sample_realization(DEFAULT, GRID, seed)
    perm = real.perm
    assert np.all(np.isfinite(perm)) and np.all(perm > 0)
    assert np.all((real.porosity > 0) & (real.porosity < 0.4))
    assert 0.05 <= real.channel_fraction <= 0.6
    # every cell within 5 log-stds of its facies mean
    means = np.log(np.asarray(DEFAULT.facies_perm_md))[real.facies]
    stds = np.asarray(DEFAULT.facies_log_std)[real.facies]
    assert np.all(np.abs(real.log_perm - means) <= 5 * stds)


def test_ensemble_members_are_distinct_and_fraction_matches_target():
    ens = generate_ensemble(DEFAULT, GRID, 100, base_seed=0)
    assert len(ens) == 100
    m = ens.log_perm_matrix()
    d2 = np.sum((m[:, None, :] - m[None, :, :]) ** 2, axis=-1)
    assert np.all(d2[~np.eye(100, dtype=bool)] > 0)
    mean_fraction = np.mean([r.channel_fraction for r in ens.members])
    assert abs(mean_fraction - nominal_channel_fraction(DEFAULT, GRID)) <= 0.1


def test_singleton_ensemble():
    ens = generate_ensemble(DEFAULT, GRID, 1, base_seed=5)
    assert len(ens) == 1
    with pytest.raises(ValueError):
        generate_ensemble(DEFAULT, GRID, 0, base_seed=5)


def _lag_correlation(fields: np.ndarray, lag: int, axis: int) -> float:
    a = fields - fields.mean(axis=0)
    n = a.shape[axis + 1]
    head = np.take(a, np.arange(n - lag), axis=axis + 1)
    tail = np.take(a, np.arange(lag, n), axis=axis + 1)
    return float(np.mean(head * tail) / np.mean(a * a))


def test_correlation_is_longer_along_channels_than_across():
    # orientation near 0 degrees: channels run along x
    ens = generate_ensemble(DEFAULT, GRID, 40, base_seed=300)
    fields = np.stack([r.log_perm for r in ens.members])        # (n, ny, nx)
    along = _lag_correlation(fields, 4, axis=1)                # x axis of the raster
    across = _lag_correlation(fields, 4, axis=0)
    assert along > across
    rotated = generate_ensemble(DEFAULT.rotated(90.0), GRID, 40, base_seed=300)
    fields = np.stack([r.log_perm for r in rotated.members])
    assert _lag_correlation(fields, 4, axis=0) > _lag_correlation(fields, 4, axis=1)


def test_impossible_fraction_exhausts_retries():
    prior = replace(DEFAULT, n_channels=(12, 12), width_cells=(6.0, 7.0), max_retries=3)
    with pytest.raises(GeomodelError, match="attempts"):
        sample_realization(prior, GRID, seed=1)


@pytest.mark.parametrize("kwargs", [
    {"facies_perm_md": (100.0, 80.0, 800.0)},
    {"porosity_per_facies": (0.1, 0.2, 0.5)},
    {"orientation_deg": (10.0, -10.0)},
    {"avulsion_probability": 1.5},
    {"facies_log_std": (0.0, 0.4, 0.35)},
])
def test_prior_validation(kwargs):
    with pytest.raises(ValueError):
        replace(DEFAULT, **kwargs)


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec(nx=4)
    with pytest.raises(ValueError):
        GridSpec(dx=0.0)


def test_ensemble_round_trip(tmp_path):
    ens = generate_ensemble(DEFAULT, GridSpec(nx=12, ny=10), 3, base_seed=9)
    write_ensemble(tmp_path / "ens", ens)
    assert sorted(p.name for p in (tmp_path / "ens").iterdir()) == [
        "ensemble.json", "member_0000", "member_0001", "member_0002"]
    back = read_ensemble(tmp_path / "ens")
    assert back.seeds == ens.seeds
    for a, b in zip(ens.members, back.members):
        np.testing.assert_allclose(a.log_perm, b.log_perm, rtol=1e-6)
        np.testing.assert_array_equal(a.facies, b.facies)
