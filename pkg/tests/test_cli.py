import json

import pytest

from cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main


def _write_config(path, **fields):
    config = {'experiment': 'mixing-sweep', 'N': [50], 'C': [3], 'graphs': 2,
              'methods': ['local-exchange', 'fixed-regular'], **fields}
    path.write_text(json.dumps(config), encoding='utf-8')
    return str(path)


def _values(output: str) -> dict:
    return dict(line.split('=', 1) for line in output.splitlines() if '=' in line and ' ' not in line)


def test_oracle_command(capsys) -> None:
    assert main(['oracle', '--model', 'two-state', '--T', '1', '--C', '2', '--phi', 'one']) == EXIT_OK
    values = _values(capsys.readouterr().out)
    assert values['Z'] == '1.5'
    assert values['mu_1(1)'] == '2.375'
    assert float(values['pi_1(1)']) == pytest.approx(1.0)
    assert float(values['V_pi_1(1)']) == pytest.approx(0.0, abs=1e-12)


def test_oracle_command_exports_json(capsys, tmp_path) -> None:
    path = tmp_path / 'oracle.json'
    assert main(['oracle', '--model', 'two-state', '--T', '3', '--phi', 'state1', '--json', str(path)]) == EXIT_OK
    [record] = json.loads(path.read_text(encoding='utf-8'))
    assert record['C'] == 'inf' and record['phi'] == 'state1' and record['T'] == 3
    assert 'pi_3(1{x=1})=' in capsys.readouterr().out


def test_oracle_command_rejects_unsupported_model(capsys) -> None:
    assert main(['oracle', '--model', 'ar1-indicator', '--T', '2']) == EXIT_CONFIG
    assert 'exact representation' in capsys.readouterr().err


def test_mixing_command(capsys) -> None:
    assert main(['mixing', '--n', '4', '--c', '3', '--graphs', '2']) == EXIT_OK
    values = _values(capsys.readouterr().out)
    assert float(values['median_lambda']) == pytest.approx(1 / 3, abs=1e-9)
    assert float(values['alon_friedman']) == pytest.approx(2 ** 1.5 / 3)


def test_mixing_command_for_local_exchange(capsys) -> None:
    assert main(['mixing', '--n', '100', '--c', '5', '--kind', 'local-exchange', '--method', 'lanczos']) == EXIT_OK
    values = _values(capsys.readouterr().out)
    assert float(values['median_lambda']) == pytest.approx(float(values['circulant_exact']), abs=1e-8)


def test_mixing_command_rejects_infeasible_pair(capsys) -> None:
    assert main(['mixing', '--n', '100', '--c', '101']) == EXIT_CONFIG
    assert 'N=100, C=101' in capsys.readouterr().err


def test_validate_command(capsys, tmp_path) -> None:
    path = _write_config(tmp_path / 'config.json')
    assert main(['validate', '--config', path]) == EXIT_OK
    assert capsys.readouterr().out.startswith('valid experiment=mixing-sweep config_hash=')


def test_validate_reports_infeasible_config(capsys, tmp_path) -> None:
    path = _write_config(tmp_path / 'config.json', N=[100], C=[101], methods=['fixed-regular'])
    assert main(['validate', '--config', path]) == EXIT_CONFIG
    assert 'N=100, C=101' in capsys.readouterr().err


def test_usage_errors(capsys) -> None:
    assert main(['oracle', '--model', 'two-state']) == EXIT_CONFIG
    assert 'usage' in capsys.readouterr().err
    assert main(['frobnicate']) == EXIT_CONFIG
    assert main([]) == EXIT_CONFIG


def test_run_command_is_thread_independent(capsys, tmp_path) -> None:
    path = _write_config(tmp_path / 'config.json')
    first, second = tmp_path / 'one', tmp_path / 'two'
    assert main(['run', '--config', path, '--threads', '1', '--out-dir', str(first)]) == EXIT_OK
    assert main(['run', '--config', path, '--threads', '3', '--out-dir', str(second)]) == EXIT_OK
    assert (first / 'raw.csv').read_bytes() == (second / 'raw.csv').read_bytes()
    assert 'config_hash=' in capsys.readouterr().out


def test_run_command_rejects_bad_threads(tmp_path) -> None:
    path = _write_config(tmp_path / 'config.json')
    assert main(['run', '--config', path, '--threads', '0']) == EXIT_CONFIG


def test_runtime_failure_exit_code(capsys, tmp_path) -> None:
    path = _write_config(tmp_path / 'config.json')
    blocker = tmp_path / 'blocker'
    blocker.write_text('', encoding='utf-8')
    assert main(['run', '--config', path, '--threads', '1', '--out-dir', str(blocker)]) == EXIT_RUNTIME
    assert 'error:' in capsys.readouterr().err
