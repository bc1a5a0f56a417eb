import sys
from pathlib import Path

import pytest

# Ensure we can import the API when running from repo root
repo_root = Path(__file__).resolve().parents[1]
api_path = repo_root / 'services' / 'api'
if str(api_path) not in sys.path:
    sys.path.insert(0, str(api_path))

from fastapi.testclient import TestClient
from main import app

from ml.evaluation.metrics import MetricsReport
from ml.reporting import RunManifest, write_manifest


def _report(rmse: float) -> MetricsReport:
    return MetricsReport(
        abs_rel=0.1, sq_rel=0.05, rmse=rmse, rmse_log=0.2, log10=0.04,
        delta1=0.9, delta2=0.97, delta3=0.99, cap_min=0.001, cap_max=10.0, valid_count=256,
    )


@pytest.fixture
def runs_dir(tmp_path, monkeypatch):
    monkeypatch.setenv('TEDK_OUT', str(tmp_path))

    synthesized = tmp_path / 'a_synth'
    synthesized.mkdir()
    write_manifest(synthesized, RunManifest(run_id='a_synth', config_hash='h1'))

    evaluated = tmp_path / 'b_eval'
    (evaluated / 'checkpoints').mkdir(parents=True)
    (evaluated / 'checkpoints' / 'predictor_0.tedk').write_bytes(b'')
    (evaluated / 'metrics.csv').write_text('model\n')
    manifest = RunManifest(
        run_id='b_eval',
        config_hash='h2',
        checkpoints={'predictor_0': 'checkpoints/predictor_0.tedk'},
        csvs={'metrics': 'metrics.csv'},
        ranges=[
            {'model': 'predictor_0', 'cap_min': 0.001, 'cap_max': 5.0, 'rmse': 0.3,
             'rmse_std': 0.05, 'valid_count': 100},
            {'model': 'predictor_0', 'cap_min': 5.0, 'cap_max': 10.0, 'rmse': None,
             'rmse_std': None, 'valid_count': 0},
        ],
    )
    manifest.add_report('predictor_0', _report(0.42), params=321)
    write_manifest(evaluated, manifest)

    (tmp_path / 'no_manifest').mkdir()
    return tmp_path


def test_list_runs(runs_dir):
    client = TestClient(app)
    r = client.get('/runs/')
    assert r.status_code == 200
    data = r.json()
    assert [run['run_id'] for run in data] == ['a_synth', 'b_eval']
    assert [run['status'] for run in data] == ['synthesized', 'evaluated']
    assert data[1]['models'] == ['predictor_0']


def test_list_runs_without_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv('TEDK_OUT', str(tmp_path / 'missing'))
    client = TestClient(app)
    r = client.get('/runs/')
    assert r.status_code == 200
    assert r.json() == []


def test_get_run(runs_dir):
    client = TestClient(app)
    r = client.get('/runs/b_eval')
    assert r.status_code == 200
    data = r.json()
    assert data['config_hash'] == 'h2'
    assert data['csvs'] == {'metrics': 'metrics.csv'}
    assert data['params'] == {'predictor_0': 321}


def test_get_run_metrics(runs_dir):
    client = TestClient(app)
    r = client.get('/runs/b_eval/metrics')
    assert r.status_code == 200
    data = r.json()
    assert data['split'] == 'test'
    (row,) = data['metrics']
    assert row['model'] == 'predictor_0'
    assert row['rmse'] == pytest.approx(0.42)
    assert row['d1'] == pytest.approx(0.9)
    assert row['params'] == 321
    assert [band['rmse'] for band in data['ranges']] == [pytest.approx(0.3), None]
    assert [band['rmse_std'] for band in data['ranges']] == [pytest.approx(0.05), None]


def test_missing_runs_are_404(runs_dir):
    client = TestClient(app)
    assert client.get('/runs/nope').status_code == 404
    assert client.get('/runs/no_manifest').status_code == 404
    assert client.get('/runs/a_synth/metrics').status_code == 404


def test_unreadable_manifest_is_500(runs_dir):
    broken = runs_dir / 'c_broken'
    broken.mkdir()
    (broken / 'manifest.json').write_text('{not json')
    client = TestClient(app)
    assert client.get('/runs/c_broken').status_code == 500
    assert [run['run_id'] for run in client.get('/runs/').json()] == ['a_synth', 'b_eval']
