from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

import verification
from verification import COLUMNS, CheckContext, format_results_dataframe, list_checks, run_checks, run_model_checks


def test_registered_checks():
    listing = list_checks()
    assert list(listing.columns) == ['check', 'description']
    assert len(listing) == 13
    assert {'linear-fixed-point', 'dyson-m3', 'tree-sampler', 'local-stationarity'} <= set(listing['check'])


def test_unknown_check():
    with pytest.raises(ValueError, match="unknown check 'nope'"):
        run_checks(['nope'])


def test_context_scale():
    ctx = CheckContext(scale=0.1)
    assert ctx.size(200_000, 10_000) == 20_000
    assert ctx.size(50_000, 10_000) == 10_000
    with pytest.raises(ValueError, match="scale"):
        CheckContext(scale=0.0)


@pytest.mark.parametrize('name', ['regime-table', 'kesten-mckay', 'dyson-m2', 'dyson-m3'])
def test_closed_form_checks_pass(name):
    df = run_checks([name], use_cache=False)
    assert list(df.columns) == COLUMNS
    assert (df['check'] == name).all()
    assert df['passed'].all(), df.to_string()


def test_failing_check_becomes_error_row(monkeypatch):
    def boom(ctx):
        raise ValueError("quadrature diverged")

    monkeypatch.setitem(verification.CHECKS, 'kesten-mckay', (boom, 'always fails'))
    calls = []
    df = run_checks(['regime-table', 'kesten-mckay'], progress_callback=lambda *a: calls.append(a))
    error = df[df['check'] == 'kesten-mckay']
    assert len(error) == 1
    assert error['item'].iloc[0] == 'error'
    assert not error['passed'].iloc[0]
    assert error['detail'].iloc[0] == 'quadrature diverged'
    assert calls == [('regime-table', True, 1, 2), ('kesten-mckay', False, 2, 2)]


def test_format_results_dataframe():
    df = pd.DataFrame([{'check': 'c', 'item': 'i', 'value': 1.23456e-9, 'threshold': 1e-8, 'passed': True,
                        'lhs': np.nan, 'rhs': np.nan, 'err': np.nan, 'detail': ''}])
    out = format_results_dataframe(df)
    assert out['value'].iloc[0] == '1.235e-09'
    assert out['threshold'].iloc[0] == '1.000e-08'
    assert out['err'].iloc[0] == ''
    assert df['value'].iloc[0] == 1.23456e-9


def test_model_checks_on_linear(linear_model):
    df = run_model_checks(linear_model, use_cache=False)
    assert list(df.columns) == COLUMNS
    assert df['passed'].all(), df.to_string()
    assert any("band" in item for item in df['item'])


def test_model_checks_stop_when_not_converged(monkeypatch, linear_model, linear_solution):
    stalled = replace(linear_solution, converged=False, status='not converged', residual=1e-2)
    monkeypatch.setattr(verification, 'solve_cached', lambda *a, **k: stalled)
    df = run_model_checks(linear_model)
    assert len(df) == 1
    assert not df['passed'].iloc[0]


@pytest.mark.slow
def test_full_suite_passes():
    df = run_checks(use_cache=False)
    assert set(df['check']) == set(verification.CHECKS)
    assert df['passed'].all(), df[~df['passed']].to_string()
