import numpy as np
import pandas as pd
import pytest

import solution_cache
from config import DEFAULT_DAMPING, DEFAULT_TOL, MEMORY_CACHE_TTL
from potentials import make_confinement, make_dyson_model, make_model_from_config
from solution_cache import (cache_solution, clear_solution_cache, get_cache_stats, get_cached_solution, solution_key,
                            solve_cached)


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setattr(solution_cache, 'CACHE_DIR', tmp_path / 'cache')
    monkeypatch.setattr(solution_cache, 'CACHE_DB', tmp_path / 'cache' / 'solutions.db')
    solution_cache._memory_cache.clear()
    yield
    solution_cache._memory_cache.clear()


def _refuse(*args, **kwargs):
    raise AssertionError("solver should not run on a cache hit")


def test_key_depends_on_settings(linear_model):
    key = solution_key(linear_model, 'picard', 1e-8, 0.5)
    assert key == solution_key(linear_model, 'picard', 1e-8, 0.5)
    assert key != solution_key(linear_model, 'picard', 1e-9, 0.5)
    assert key != solution_key(linear_model, 'picard', 1e-8, 0.7)
    assert key != solution_key(linear_model, 'power', 1e-8, 0.5)
    # damping is irrelevant to power iteration
    assert solution_key(linear_model, 'power', 1e-8, 0.5) == solution_key(linear_model, 'power', 1e-8, 0.7)


def test_models_without_description_are_not_cached(linear_solution):
    U, dU, kind_U, _ = make_confinement('gaussian')
    cfg = make_dyson_model(2, U, dU, kind_U=kind_U)
    assert solution_key(cfg, 'power', 1e-8, 0.5) is None
    assert get_cached_solution(cfg, 'power') is None
    assert cache_solution(cfg, linear_solution) is False


def test_miss_on_empty_cache(linear_model):
    assert get_cached_solution(linear_model) is None
    assert get_cache_stats()['status'] == 'No cache'


def test_memory_hit(linear_model, linear_solution):
    assert cache_solution(linear_model, linear_solution)
    assert get_cached_solution(linear_model) is linear_solution


def test_reload_from_database(linear_model, linear_solution):
    cache_solution(linear_model, linear_solution)
    solution_cache._memory_cache.clear()
    sol = get_cached_solution(linear_model)
    assert sol is not linear_solution
    assert np.array_equal(sol.F.values, linear_solution.F.values)
    assert sol.C == linear_solution.C
    assert sol.converged and sol.method == 'picard'
    assert sol.grid == linear_model.grid


def test_solve_cached_reuses_solution(linear_model, linear_solution, monkeypatch):
    cache_solution(linear_model, linear_solution)
    solution_cache._memory_cache.clear()
    monkeypatch.setattr(solution_cache, 'solve_picard', _refuse)
    sol = solve_cached(linear_model)
    assert np.array_equal(sol.F.values, linear_solution.F.values)


def test_solve_cached_stores_converged(linear_model, linear_solution, monkeypatch):
    monkeypatch.setattr(solution_cache, 'solve_picard', lambda *a, **k: linear_solution)
    solve_cached(linear_model)
    stats = get_cache_stats()
    assert stats['status'] == 'Active'
    assert stats['total_solutions'] == 1
    assert stats['converged'] == 1
    assert stats['by_method'] == {'picard': 1}


def test_custom_init_bypasses_cache(linear_model, linear_solution, monkeypatch):
    cache_solution(linear_model, linear_solution)
    calls = []

    def fake_solve(cfg, **kwargs):
        calls.append(kwargs['init'])
        return linear_solution

    monkeypatch.setattr(solution_cache, 'solve_picard', fake_solve)
    solve_cached(linear_model, init=linear_solution.F)
    assert calls == [linear_solution.F]


def test_no_cache_flag_skips_lookup(linear_model, linear_solution, monkeypatch):
    cache_solution(linear_model, linear_solution)
    calls = []
    monkeypatch.setattr(solution_cache, 'solve_picard', lambda *a, **k: calls.append(1) or linear_solution)
    solve_cached(linear_model, use_cache=False)
    assert calls == [1]


def test_clear(linear_model, linear_solution):
    assert clear_solution_cache() == 0
    cache_solution(linear_model, linear_solution)
    assert clear_solution_cache() == 1
    assert get_cached_solution(linear_model) is None
    assert get_cache_stats()['total_solutions'] == 0


def test_unknown_method(linear_model):
    with pytest.raises(ValueError, match="unknown method"):
        solve_cached(linear_model, method='newton')


def test_edited_table_is_not_served_from_cache(tmp_path):
    table = tmp_path / 'pair.csv'
    x = np.linspace(-8.0, 8.0, 321)
    raw = {'m': 3, 'potential_kind': 'tabulated', 'parameters': {'table': str(table)},
           'grid': {'lo': -6.0, 'hi': 6.0, 'n': 601}}

    pd.DataFrame({'x': x, 'U': 0.5 * x ** 2, 'K': 0.5 * x ** 2}).to_csv(table, index=False)
    first = solve_cached(make_model_from_config(raw))
    assert first.converged

    pd.DataFrame({'x': x, 'U': 0.5 * x ** 2, 'K': 2.0 * x ** 2}).to_csv(table, index=False)
    second = solve_cached(make_model_from_config(raw))
    assert second.converged
    assert abs(second.F(1.0) - first.F(1.0)) > 0.5
    assert get_cache_stats()['total_solutions'] == 2


def test_expired_memory_entries_are_dropped(linear_model, linear_solution):
    cache_solution(linear_model, linear_solution)
    key = solution_key(linear_model, 'picard', DEFAULT_TOL, DEFAULT_DAMPING)
    solution_cache._memory_cache[key]['timestamp'] -= MEMORY_CACHE_TTL + 1
    assert not solution_cache._is_memory_valid(key)
    assert key not in solution_cache._memory_cache
