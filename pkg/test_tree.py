import json

import numpy as np
import pandas as pd
import pytest

from conftest import RHO_PLUS_M3_Z4
from numerics import ks_to_density
from tree import (TreeBall, TreeSample, consistency_check, distance_correlations, export_samples, homogeneity_test,
                  markov_test, sample_tree, sample_tree_parallel, shuffle_grandchildren, simulate_tree_sde)


@pytest.fixture(scope='module')
def linear_samples(linear_law):
    return sample_tree_parallel(linear_law, 3, 200_000, seed=11)


def test_ball_structure():
    ball = TreeBall(3, 2)
    assert ball.size == TreeBall.expected_count(3, 2) == 10
    assert ball.vertices[:4] == ['', '0', '1', '2']
    assert ball.children('') == ['0', '1', '2']
    assert ball.children('1') == ['1.0', '1.1']
    assert ball.children('1.0') == []
    assert TreeBall.parent('2.1') == '2'
    assert TreeBall.parent('2') == ''
    assert ball.distance_from_root('0.1') == 2
    assert list(ball.parent_index[:4]) == [-1, 0, 0, 0]
    assert len(ball.leaves) == 6
    assert TreeBall.path_vertex(3) == '0.0.0'
    assert TreeBall(2, 4).size == TreeBall.expected_count(2, 4) == 9
    assert TreeBall(4, 0).size == 1 and len(TreeBall(4, 0).leaves) == 0


def test_ball_errors():
    with pytest.raises(ValueError, match="no parent"):
        TreeBall.parent('')
    with pytest.raises(ValueError, match="depth"):
        TreeBall(3, -1)
    with pytest.raises(ValueError, match="not in the ball"):
        TreeBall(3, 1).distance_from_root('0.0')


def test_tree_sample_validation():
    ball = TreeBall(3, 1)
    with pytest.raises(ValueError, match="expected 4 vertex values"):
        TreeSample(ball, np.zeros((5, 3)))
    with pytest.raises(ValueError, match="finite"):
        TreeSample(ball, np.full((1, 4), np.nan))


def test_sample_tree_is_reproducible(linear_law):
    a = sample_tree(linear_law, 2, np.random.default_rng(5), 1000)
    b = sample_tree(linear_law, 2, np.random.default_rng(5), 1000)
    assert a.values.shape == (1000, 10)
    assert np.array_equal(a.values, b.values)


def test_parallel_sampling_ignores_worker_count(linear_law):
    one = sample_tree_parallel(linear_law, 1, 120_000, seed=3, max_workers=1)
    three = sample_tree_parallel(linear_law, 1, 120_000, seed=3, max_workers=3)
    assert np.array_equal(one.values, three.values)


def test_progress_callback(linear_law):
    calls = []
    sample_tree_parallel(linear_law, 0, 120_000, seed=1, progress_callback=lambda *a: calls.append(a))
    assert len(calls) == 3
    assert all(ok for _, ok, _, total in calls if total == 3)
    assert sorted(done for _, _, done, _ in calls) == [1, 2, 3]


def test_root_marginal(linear_law, linear_samples):
    assert ks_to_density(linear_samples.column(''), linear_law.rho_X) < 0.01


def test_distance_correlations_decay_geometrically(linear_samples):
    table = distance_correlations(linear_samples)
    assert list(table['d']) == [0, 1, 2, 3]
    for _, row in table[table['d'] > 0].iterrows():
        assert abs(row['correlation'] - RHO_PLUS_M3_Z4 ** row['d']) < 4 * row['se']


def test_markov_and_homogeneity(linear_samples):
    linear = markov_test(linear_samples)
    assert linear['pass'] and linear['method'] == 'partial correlation'
    binned = markov_test(linear_samples, kind='tabulated')
    assert binned['pass'] and binned['method'] == 'binned conditional covariance'
    assert homogeneity_test(linear_samples)['pass']


def test_markov_requires_enough_samples(linear_law):
    small = sample_tree(linear_law, 2, np.random.default_rng(0), 100)
    with pytest.raises(ValueError, match="insufficient samples"):
        markov_test(small)
    with pytest.raises(ValueError, match="depth ≥ 2"):
        markov_test(sample_tree(linear_law, 1, np.random.default_rng(0), 100))


def test_shuffled_grandchildren_are_detected(linear_samples):
    shuffled = shuffle_grandchildren(linear_samples, np.random.default_rng(2))
    corr = np.corrcoef(shuffled.column(''), shuffled.column('0.0'))[0, 1]
    assert abs(corr) < 0.01
    assert abs(corr - RHO_PLUS_M3_Z4 ** 2) > 0.05
    assert not homogeneity_test(shuffled)['pass']


def test_consistency(linear_model, linear_law, dyson_m2_model, dyson_m2_law):
    assert consistency_check(linear_law, linear_model) < 1e-6
    assert consistency_check(dyson_m2_law, dyson_m2_model) < 1e-6


def test_tree_sde_keeps_root_marginal(linear_model, linear_solution, linear_law):
    init = sample_tree_parallel(linear_law, 1, 500, seed=4)
    state = simulate_tree_sde(linear_model, linear_solution, 1, 1e-2, 2.0, init, seed=9)
    assert state.values.shape == (500, 4)
    assert state.time == pytest.approx(2.0)
    assert state.root_snapshots.shape == (500, 6)
    assert not state.is_escaped
    assert ks_to_density(state.root_snapshots.ravel(), linear_law.rho_X) < 0.1


def test_tree_sde_ignores_worker_count(linear_model, linear_solution, linear_law):
    init = sample_tree_parallel(linear_law, 2, 600, seed=4)
    one = simulate_tree_sde(linear_model, linear_solution, 2, 1e-2, 0.2, init, seed=9, max_workers=1)
    three = simulate_tree_sde(linear_model, linear_solution, 2, 1e-2, 0.2, init, seed=9, max_workers=3)
    assert np.array_equal(one.values, three.values)
    assert np.array_equal(one.root_snapshots, three.root_snapshots)


def test_tree_sde_depth_zero(linear_model, linear_solution, linear_law):
    init = sample_tree_parallel(linear_law, 0, 300, seed=1)
    state = simulate_tree_sde(linear_model, linear_solution, 0, 1e-2, 0.5, init, seed=2)
    assert state.values.shape == (300, 1)


def test_tree_sde_argument_checks(linear_model, linear_solution, linear_law):
    init = sample_tree_parallel(linear_law, 1, 10, seed=1)
    with pytest.raises(ValueError, match="dt must be positive"):
        simulate_tree_sde(linear_model, linear_solution, 1, 0.0, 1.0, init, seed=1)
    with pytest.raises(ValueError, match="requested ball"):
        simulate_tree_sde(linear_model, linear_solution, 2, 1e-2, 1.0, init, seed=1)


def test_export_samples(tmp_path, linear_law):
    samples = sample_tree(linear_law, 2, np.random.default_rng(1), 50)
    paths = export_samples(samples, tmp_path)
    df = pd.read_csv(paths[0])
    assert list(df.columns)[:2] == ['root', '0']
    assert df.shape == (50, 10)
    summary = json.loads(paths[1].read_text())
    assert summary['m'] == 3 and summary['depth'] == 2
    assert len(summary['correlation']) == 3


def test_tree_sde_dt_halving(linear_model, linear_solution, linear_law):
    init = sample_tree_parallel(linear_law, 1, 2000, seed=21)
    coarse = simulate_tree_sde(linear_model, linear_solution, 1, 2e-2, 1.0, init, seed=22)
    fine = simulate_tree_sde(linear_model, linear_solution, 1, 1e-2, 1.0, init, seed=22)
    ms_coarse = np.mean(coarse.values[:, 0] ** 2)
    ms_fine = np.mean(fine.values[:, 0] ** 2)
    assert 0.5 < ms_coarse / ms_fine < 2.0
    assert abs(ms_coarse - ms_fine) < 0.05


def test_tree_sde_flags_escape(capsys, linear_model, linear_solution):
    ball = TreeBall(3, 1)
    init = TreeSample(ball, np.full((20, ball.size), 9.0))
    state = simulate_tree_sde(linear_model, linear_solution, 1, 1e-2, 1.0, init, seed=3)
    assert state.is_escaped
    assert state.escaped > 0
    assert np.isfinite(state.values).all()
    assert np.abs(state.values).max() < 8.0
    assert "left the grid" in capsys.readouterr().out


def test_free_tree_sde_root_is_independent(free_model, free_solution, free_law):
    init = sample_tree_parallel(free_law, 1, 2000, seed=6)
    state = simulate_tree_sde(free_model, free_solution, 1, 1e-2, 2.0, init, seed=7)
    root = state.values[:, 0]
    se = np.sqrt(2.0 / len(root))
    # stationary law of dX = -X dt + √2 dW is N(0, 1)
    assert abs(np.var(root) - 1.0) < 3 * se + 0.01
    assert abs(np.corrcoef(root, state.values[:, 1])[0, 1]) < 0.1
    assert ks_to_density(state.root_snapshots.ravel(), free_law.rho_X) < 0.05
