"""
Test the SQLite run ledger
"""

import json
from datetime import datetime

import pytest

from run_ledger import RunLedger


@pytest.fixture
def ledger(tmp_path):
    return RunLedger(str(tmp_path / 'runs.db'), 'Europe/Berlin')


def test_run_lifecycle(ledger):
    run_id = ledger.start_run('train', 7, {'corpus': 'data/corpus.smi', 'epochs': 3})
    run = ledger.get_run(run_id)
    assert run['status'] == 'running' and run['seed'] == 7
    assert json.loads(run['arguments']) == {'corpus': 'data/corpus.smi', 'epochs': 3}
    assert datetime.fromisoformat(run['started_at']).utcoffset() is not None

    ledger.record_metric(run_id, 'final_loss', 1.25)
    ledger.record_metric(run_id, 'epochs', 3)
    ledger.finish_run(run_id, 'ok', 'loss 2.0 -> 1.25')
    run = ledger.get_run(run_id)
    assert run['status'] == 'ok' and run['summary'] == 'loss 2.0 -> 1.25'
    assert run['finished_at'] >= run['started_at']
    assert ledger.get_metrics(run_id) == {'final_loss': 1.25, 'epochs': 3.0}


def test_missing_run(ledger):
    assert ledger.get_run(42) is None
    assert ledger.get_metrics(42) == {}


def test_stats(ledger):
    assert ledger.get_stats()['success_rate'] == 0
    for command, status in [('train', 'ok'), ('train', 'failed'), ('encode', 'ok'), ('decode', None)]:
        run_id = ledger.start_run(command, 0, {})
        if status:
            ledger.finish_run(run_id, status)
    stats = ledger.get_stats()
    assert stats['total_runs'] == 4
    assert (stats['ok'], stats['failed'], stats['running']) == (2, 1, 1)
    assert stats['success_rate'] == 50.0
    assert stats['by_command'] == {'decode': 1, 'encode': 1, 'train': 2}


def test_recent_runs_newest_first(ledger):
    ids = [ledger.start_run(f'cmd{i}', i, {}) for i in range(5)]
    recent = ledger.get_recent_runs(limit=3)
    assert [r['run_id'] for r in recent] == ids[::-1][:3]


def test_arguments_with_odd_values_are_stored(ledger):
    run_id = ledger.start_run('radius-scan', None, {'radii': [3, 5], 'handler': object()})
    assert json.loads(ledger.get_run(run_id)['arguments'])['radii'] == [3, 5]


def test_display(ledger, capsys):
    ledger.display_dashboard()
    assert 'No runs recorded yet' in capsys.readouterr().out

    run_id = ledger.start_run('eval', 0, {})
    ledger.record_metric(run_id, 'mhg-gnn_test_r2', 0.875)
    ledger.finish_run(run_id, 'failed', 'DatasetTooSmall: need at least 5 records')
    ledger.display_dashboard(limit=1)
    out = capsys.readouterr().out
    assert '❌ Run 1 | eval | seed 0' in out
    assert 'mhg-gnn_test_r2: 0.875' in out

    ledger.display_stats()
    assert 'Failed: 1' in capsys.readouterr().out
