import json

import numpy as np
import pandas as pd
import pytest

from conftest import RHO_PLUS_M3_Z4
from local_sim import (ParticleEnsemble, default_bandwidth, export_trajectory, init_from_edge_law, init_iid_normal,
                       nadaraya_watson, run_ergodic_average, run_relaxation, run_stationarity_test, step_local,
                       trajectory_row)
from tree import sample_tree


def test_ensemble_validation():
    with pytest.raises(ValueError, match="same length"):
        ParticleEnsemble(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError, match="finite"):
        ParticleEnsemble(np.array([np.inf]), np.zeros(1))
    with pytest.raises(ValueError, match="unknown mode"):
        ParticleEnsemble(np.zeros(2), np.zeros(2), mode='mean-field')
    with pytest.raises(ValueError, match="bandwidth"):
        ParticleEnsemble(np.zeros(2), np.zeros(2), bandwidth=0.0)


def test_bandwidth_ignores_order_and_labels():
    rng = np.random.default_rng(1)
    X, Y = rng.standard_normal(1000), rng.standard_normal(1000)
    order = rng.permutation(1000)
    h = default_bandwidth(X, Y)
    assert h == default_bandwidth(X[order], Y[order])
    assert h == default_bandwidth(Y, X)
    assert h == pytest.approx(1000 ** -0.2 * np.std(np.concatenate([X, Y])))


def test_nadaraya_watson_binned_matches_exact():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(5000)
    y = np.sin(x) + 0.1 * rng.standard_normal(5000)
    grid = np.linspace(-1.5, 1.5, 31)
    exact = nadaraya_watson(x, y, grid, 0.2, binned=False)
    binned = nadaraya_watson(x, y, grid, 0.2)
    assert np.max(np.abs(exact - binned)) < 0.01
    assert np.max(np.abs(exact - np.sin(grid))) < 0.05


def test_nadaraya_watson_permutation_invariant():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(2000)
    y = x ** 2 + rng.standard_normal(2000)
    order = rng.permutation(2000)
    grid = np.linspace(-2.0, 2.0, 17)
    for binned in (True, False):
        assert np.array_equal(nadaraya_watson(x, y, grid, 0.3, binned),
                              nadaraya_watson(x[order], y[order], grid, 0.3, binned))


def test_nadaraya_watson_argument_checks():
    with pytest.raises(ValueError, match="bandwidth"):
        nadaraya_watson(np.zeros(3), np.zeros(3), np.zeros(1), 0.0)
    with pytest.raises(ValueError, match="same length"):
        nadaraya_watson(np.zeros(3), np.zeros(2), np.zeros(1), 0.1)


def test_regression_recovers_linear_drift(linear_law):
    sample = sample_tree(linear_law, 1, np.random.default_rng(4), 200_000)
    X, Y = sample.column(''), sample.column('0')
    grid = np.linspace(-1.0, 1.0, 21)
    fitted = nadaraya_watson(X, X - Y, grid, default_bandwidth(X, Y))
    assert np.max(np.abs(fitted - (1.0 - RHO_PLUS_M3_Z4) * grid)) < 0.03


def test_step_argument_checks(linear_model, linear_solution):
    ens = ParticleEnsemble(np.zeros(10), np.zeros(10))
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="dt must be positive"):
        step_local(linear_model, ens, linear_solution, 0.0, rng=rng)
    with pytest.raises(ValueError, match="rng or noise"):
        step_local(linear_model, ens, linear_solution, 1e-3)
    with pytest.raises(ValueError, match="noise must have shape"):
        step_local(linear_model, ens, linear_solution, 1e-3, noise=np.zeros((10, 2)))
    with pytest.raises(ValueError, match="requires a fixed-point solution"):
        step_local(linear_model, ens, None, 1e-3, rng=rng)
    estimated = ParticleEnsemble(np.zeros(10), np.zeros(10), mode='estimated')
    with pytest.raises(ValueError, match="too small for regression"):
        step_local(linear_model, estimated, None, 1e-3, rng=rng)


def test_step_without_noise_follows_drift(linear_model, linear_solution):
    ens = ParticleEnsemble(np.array([1.0]), np.array([0.0]))
    out = step_local(linear_model, ens, linear_solution, 0.1, noise=np.zeros((2, 1)))
    # U' = x, K'(X-Y) = X-Y, (m-1)F'(x) = 2(1-ρ₊)x
    expected_X = 1.0 - 0.1 * (1.0 + 1.0 + 2.0 * (1.0 - RHO_PLUS_M3_Z4))
    assert out.X[0] == pytest.approx(expected_X, abs=1e-6)
    assert out.Y[0] == pytest.approx(0.1, abs=1e-6)
    assert out.time == pytest.approx(0.1)


@pytest.mark.parametrize('mode', ['decoupled', 'estimated'])
def test_step_is_permutation_and_swap_invariant(linear_model, linear_solution, linear_law, mode):
    rng = np.random.default_rng(8)
    ens = init_from_edge_law(linear_law, 500, rng, mode=mode)
    noise = rng.standard_normal((2, 500))
    base = step_local(linear_model, ens, linear_solution, 1e-2, noise=noise)

    order = rng.permutation(500)
    permuted = step_local(linear_model, ens.permuted(order), linear_solution, 1e-2, noise=noise[:, order])
    assert np.array_equal(permuted.X, base.X[order])
    assert np.array_equal(permuted.Y, base.Y[order])

    swapped = step_local(linear_model, ens.swapped(), linear_solution, 1e-2, noise=noise[::-1])
    assert np.array_equal(swapped.X, base.Y)
    assert np.array_equal(swapped.Y, base.X)


def test_dyson_step_stays_finite(dyson_m2_model, dyson_m2_solution):
    ens = ParticleEnsemble(np.array([0.3, -1.0]), np.array([0.3, 2.0]))
    out = step_local(dyson_m2_model, ens, dyson_m2_solution, 1e-3, noise=np.zeros((2, 2)))
    assert np.isfinite(out.X).all() and np.isfinite(out.Y).all()


def test_decoupled_stationarity(linear_model, linear_solution, linear_law):
    res = run_stationarity_test(linear_model, linear_solution, linear_law, 5000, 1e-2, 1.0,
                                rng=np.random.default_rng(5))
    assert res['ks_marginal'] < 0.04
    assert res['symmetry_ks'] < 0.06
    summary = res['summary']
    assert list(summary.columns) == ['time', 'mean_X', 'var_X', 'cov_XY', 'ks_to_rho_X']
    assert len(summary) == 11
    assert summary['time'].iloc[-1] == pytest.approx(1.0)


def test_estimated_stationarity(linear_model, linear_solution, linear_law):
    res = run_stationarity_test(linear_model, linear_solution, linear_law, 4000, 1e-2, 1.0, mode='estimated',
                                rng=np.random.default_rng(6))
    assert res['ensemble'].mode == 'estimated'
    assert res['ks_marginal'] < 0.05


def test_stationarity_needs_large_ensemble(linear_model, linear_solution, linear_law):
    with pytest.raises(ValueError, match="N ≥ 1000"):
        run_stationarity_test(linear_model, linear_solution, linear_law, 999, 1e-2, 1.0)


def test_relaxation_from_wrong_law(linear_model, linear_solution, linear_law):
    rng = np.random.default_rng(7)
    init = init_iid_normal(5000, rng, scale=2.0)
    df = run_relaxation(linear_model, linear_solution, linear_law, init, 1e-2, [0.05, 1.0, 3.0], rng)
    assert list(df.columns) == ['time', 'ks']
    assert df['ks'].iloc[0] > 0.2
    assert df['ks'].iloc[-1] < 0.05
    with pytest.raises(ValueError, match="increasing"):
        run_relaxation(linear_model, linear_solution, linear_law, init, 1e-2, [1.0, 0.5], rng)


@pytest.mark.slow
def test_ergodic_average(linear_model, linear_solution):
    res = run_ergodic_average(linear_model, linear_solution, 1e-2, 1e3, np.random.default_rng(9), burn_in=5.0)
    assert res['steps'] == 100_000
    assert abs(res['mean']) < 4 * res['se'] + 1e-3


def test_trajectory_row_and_export(tmp_path, linear_law):
    ens = init_from_edge_law(linear_law, 1000, np.random.default_rng(3))
    row = trajectory_row(ens, linear_law)
    assert row['time'] == 0.0
    assert row['cov_XY'] > 0
    paths = export_trajectory(pd.DataFrame([row]), tmp_path, ensemble=ens)
    assert [p.name for p in paths] == ['local_trajectory.csv', 'local_ensemble.csv', 'local_ensemble.json']
    meta = json.loads(paths[2].read_text())
    assert meta['N'] == 1000 and meta['mode'] == 'decoupled'


@pytest.mark.parametrize('mode', ['decoupled', 'estimated'])
def test_free_model_reduces_to_one_dimensional_diffusions(free_model, free_solution, free_law, mode):
    ens = init_from_edge_law(free_law, 200, np.random.default_rng(13), mode=mode)
    out = step_local(free_model, ens, free_solution, 0.1, noise=np.zeros((2, 200)))
    # only U' = x acts on each coordinate
    assert np.allclose(out.X, 0.9 * ens.X, atol=1e-9)
    assert np.allclose(out.Y, 0.9 * ens.Y, atol=1e-9)

    res = run_stationarity_test(free_model, free_solution, free_law, 4000, 1e-2, 1.0, mode=mode,
                                rng=np.random.default_rng(14))
    assert res['ks_marginal'] < 0.04
    assert abs(res['summary']['cov_XY'].iloc[-1]) < 0.05
