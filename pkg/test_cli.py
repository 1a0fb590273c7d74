import json

import pandas as pd
import pytest

from conftest import CONFIG_DIR
from shm_cli import EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_OK, main

SMALL = ['--grid-n', '801', '--grid-L', '8', '--no-cache']
LINEAR = ['--model', 'linear', '--m', '3', '--z', '4'] + SMALL


def _manifest(out):
    return json.loads((out / 'manifest.json').read_text())


def test_solve_writes_outputs_and_manifest(tmp_path):
    assert main(['solve'] + LINEAR + ['--edge-law', '--out', str(tmp_path)]) == EXIT_OK
    for name in ('solution_F.csv', 'solution_F.json', 'edge_rho.csv', 'edge_law.json'):
        assert (tmp_path / name).exists()
    manifest = _manifest(tmp_path)
    assert manifest['command'] == 'solve'
    assert manifest['config_path'] == 'inline'
    assert str(tmp_path / 'solution_F.csv') in manifest['outputs']
    df = pd.read_csv(tmp_path / 'solution_F.csv')
    assert df['F'].iloc[df['x'].abs().idxmin()] == pytest.approx(0.0, abs=1e-12)


def test_manifest_timestamp_is_reproducible(tmp_path, monkeypatch):
    monkeypatch.setenv('SOURCE_DATE_EPOCH', '0')
    assert main(['analytics', '--kesten-mckay', '--m', '3', '--out', str(tmp_path)]) == EXIT_OK
    assert _manifest(tmp_path)['timestamp'] == '1970-01-01T00:00:00+00:00'


def test_solve_not_converged(tmp_path):
    assert main(['solve'] + LINEAR + ['--max-iter', '2', '--out', str(tmp_path)]) == EXIT_NOT_CONVERGED
    sidecar = json.loads((tmp_path / 'solution_F.json').read_text())
    assert sidecar['converged'] is False


def test_usage_errors(tmp_path):
    out = ['--out', str(tmp_path)]
    assert main(['solve', '--model', 'linear', '--z', '4'] + out) == EXIT_ERROR
    assert main(['solve', '--model', 'linear', '--m', '3'] + out) == EXIT_ERROR
    assert main(['solve'] + out) == EXIT_ERROR
    assert main(['solve', '--model', 'dyson', '--m', '3', '--branch', 'plus'] + SMALL + out) == EXIT_ERROR
    assert main(['solve', '--config', str(tmp_path / 'missing.json')] + out) == EXIT_ERROR
    with pytest.raises(SystemExit) as exc:
        main(['integrate'])
    assert exc.value.code == EXIT_ERROR
    with pytest.raises(SystemExit) as exc:
        main(['solve', '--model', 'cubic'])
    assert exc.value.code == EXIT_ERROR


def test_regime_iii_plus_branch_from_config(tmp_path):
    args = ['solve', '--config', str(CONFIG_DIR / 'linear_m3_z2.9.json'), '--grid-n', '1201', '--branch', 'plus',
            '--no-cache', '--out', str(tmp_path)]
    assert main(args) == EXIT_OK
    assert _manifest(tmp_path)['config_path'].endswith('linear_m3_z2.9.json')


def test_verify_list_and_unknown(tmp_path, capsys):
    assert main(['verify', '--list']) == EXIT_OK
    assert 'dyson-m3' in capsys.readouterr().out
    assert main(['verify', '--check', 'nope', '--out', str(tmp_path)]) == EXIT_ERROR
    assert 'regime-table' in capsys.readouterr().out


def test_verify_named_check(tmp_path):
    assert main(['verify', '--check', 'regime-table', '--check', 'kesten-mckay', '--no-cache',
                 '--out', str(tmp_path)]) == EXIT_OK
    df = pd.read_csv(tmp_path / 'verify.csv')
    assert set(df['check']) == {'regime-table', 'kesten-mckay'}
    assert df['passed'].all()


def test_verify_model(tmp_path):
    assert main(['verify'] + LINEAR + ['--out', str(tmp_path)]) == EXIT_OK
    assert (tmp_path / 'verify.csv').exists()


def test_analytics(tmp_path):
    out = ['--out', str(tmp_path)]
    assert main(['analytics', '--kesten-mckay', '--m', '3'] + out) == EXIT_OK
    curve = pd.read_csv(tmp_path / 'kesten_mckay_m3.csv')
    assert float(curve['density'] @ curve['weight']) == pytest.approx(1.0, abs=1e-8)

    assert main(['analytics', '--dyson', '--m', '2', '--grid-n', '801', '--grid-L', '8'] + out) == EXIT_OK
    report = json.loads((tmp_path / 'dyson_m2_gaussian.json').read_text())
    assert report['r'] == pytest.approx(3 ** 0.5, abs=1e-8)
    assert (tmp_path / 'dyson_m2_gaussian_density.csv').exists()

    assert main(['analytics', '--linear', '--m', '3', '--z', '3'] + out) == EXIT_OK
    assert json.loads((tmp_path / 'linear_m3_z3.json').read_text())['regime'] == 'ii'


def test_analytics_errors(tmp_path):
    out = ['--out', str(tmp_path)]
    assert main(['analytics', '--linear', '--m', '3'] + out) == EXIT_ERROR
    assert main(['analytics', '--m', '3'] + out) == EXIT_ERROR
    assert main(['analytics', '--kesten-mckay', '--m', '1'] + out) == EXIT_ERROR


def test_sample_tree_is_deterministic(tmp_path):
    runs = []
    for name in ('a', 'b'):
        out = tmp_path / name
        args = ['sample-tree'] + LINEAR + ['--depth', '2', '--samples', '2000', '--seed', '5', '--out', str(out)]
        assert main(args) == EXIT_OK
        runs.append((out / 'tree_samples.csv').read_bytes())
        assert _manifest(out)['seed'] == 5
    assert runs[0] == runs[1]


def test_simulate_local(tmp_path):
    args = ['simulate'] + LINEAR + ['--N', '1000', '--dt', '1e-2', '--T', '0.1', '--seed', '2', '--out', str(tmp_path)]
    assert main(args) == EXIT_OK
    summary = json.loads((tmp_path / 'simulate_local_summary.json').read_text())
    assert summary['N'] == 1000
    assert summary['ks_marginal'] < 0.1
    assert (tmp_path / 'local_trajectory.csv').exists()


def test_simulate_tree(tmp_path):
    args = ['simulate'] + LINEAR + ['--target', 'tree', '--depth', '1', '--N', '300', '--dt', '1e-2', '--T', '0.2',
                                    '--out', str(tmp_path)]
    assert main(args) == EXIT_OK
    summary = json.loads((tmp_path / 'simulate_tree_summary.json').read_text())
    assert summary['replicas'] == 300
    assert (tmp_path / 'tree_sde_samples.csv').exists()


def test_simulate_argument_errors(tmp_path):
    out = ['--out', str(tmp_path)]
    assert main(['simulate'] + LINEAR + ['--N', '500'] + out) == EXIT_ERROR
    assert main(['simulate'] + LINEAR + ['--dt', '0'] + out) == EXIT_ERROR
