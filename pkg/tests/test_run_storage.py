import json

import pytest

from run_storage import RECORD_FILE, RunRecord, RunStorage
from utils import InvariantViolation


def _record(tmp_path, command='simulate', content='x,y\n1,2\n'):
    out = tmp_path / 'out.csv'
    out.write_text(content)
    record = RunRecord(command=command, seed=7, config={'params': {'a': 2.0}}, summary={'status': 'extinct'})
    record.add_artifact(out)
    return record, out


class TestRunRecord:
    def test_json_round_trip(self, tmp_path):
        record, _ = _record(tmp_path)
        path = record.write_json(tmp_path)
        assert path.endswith(RECORD_FILE)
        loaded = RunRecord.read_json(path)
        assert loaded == record
        with open(path) as f:
            assert set(json.load(f)) >= {'command', 'seed', 'config', 'artifacts', 'version', 'format_version'}

    def test_verify_detects_edits(self, tmp_path):
        record, out = _record(tmp_path)
        assert record.verify() == []
        out.write_text('changed\n')
        assert record.verify() == [str(out)]

    def test_unique_ids(self):
        assert RunRecord('a', 1, {}).run_id != RunRecord('a', 1, {}).run_id


class TestRunStorage:
    def test_record_and_get(self, tmp_path, tmp_db):
        storage = RunStorage(tmp_db)
        record, out = _record(tmp_path)
        storage.record_run(record)
        loaded = storage.get_run(record.run_id)
        assert loaded.command == 'simulate'
        assert loaded.summary == {'status': 'extinct'}
        assert loaded.artifacts == {str(out): record.artifacts[str(out)]}

    def test_missing_run(self, tmp_db):
        assert RunStorage(tmp_db).get_run('nope') is None
        with pytest.raises(ValueError):
            RunStorage(tmp_db).verify_manifest('nope')

    def test_list_and_clear(self, tmp_path, tmp_db):
        storage = RunStorage(tmp_db)
        for command in ('simulate', 'simulate', 'isolated'):
            storage.record_run(_record(tmp_path, command)[0])
        assert len(storage.list_runs()) == 3
        assert len(storage.list_runs('simulate')) == 2
        storage.clear_runs('simulate')
        assert storage.list_runs()['command'].tolist() == ['isolated']
        storage.clear_runs()
        assert storage.list_runs().empty

    def test_verify_manifest(self, tmp_path, tmp_db):
        storage = RunStorage(tmp_db)
        record, out = _record(tmp_path)
        storage.record_run(record)
        assert storage.verify_manifest(record.run_id)
        out.write_text('tampered\n')
        with pytest.raises(InvariantViolation):
            storage.verify_manifest(record.run_id)
