import json

import pandas as pd
import pytest

from cli_experiments import EXIT_CAP, EXIT_CONFIG, EXIT_OK, build_parser, classify_cell, main, parse_overrides
from mean_field import window_for
from model_core import ModelParams
from run_storage import RunRecord, RunStorage
from utils import ConfigError


def _run(tmp_path, command, *extra, out='out'):
    argv = [command, '--out', str(tmp_path / out), '--db', str(tmp_path / 'runs.db'),
            '--log-level', 'WARNING', *extra]
    return main(argv)


def _record(tmp_path, out='out'):
    return RunRecord.read_json(tmp_path / out / 'run_record.json')


class TestParsing:
    def test_overrides(self):
        assert parse_overrides(['params.a=3', 'sim.K = 4']) == {'params.a': '3', 'sim.K': '4'}
        with pytest.raises(ConfigError):
            parse_overrides(['params.a'])

    def test_sweep_list(self):
        args = build_parser().parse_args(['simulate', '--sweep-N', '10,20'])
        assert args.sweep_N == [10, 20]

    def test_classify(self):
        assert classify_cell(None, None) == 'inconclusive'
        assert classify_cell(object(), object()) == 'both'


class TestSimulate:
    def test_no_births_goes_extinct(self, tmp_path):
        code = _run(tmp_path, 'simulate', '--set', 'params.a=0', '--set', 'params.b=0', '--seed', '3')
        assert code == EXIT_OK
        record = _record(tmp_path)
        assert record.summary['status'] == 'extinct'
        assert record.verify() == []
        frame = pd.read_csv(tmp_path / 'out' / 'trajectory.csv')
        assert list(frame.columns) == ['t', 'x', 'xi']

    def test_rerun_hashes_match(self, tmp_path):
        for out in ('first', 'second'):
            assert _run(tmp_path, 'simulate', '--seed', '11', '--set', 'sim.horizon=2', out=out) == EXIT_OK
        first, second = _record(tmp_path, 'first'), _record(tmp_path, 'second')
        assert sorted(first.artifacts.values()) == sorted(second.artifacts.values())

    def test_sweep(self, tmp_path):
        code = _run(tmp_path, 'simulate', '--sweep-N', '5,10,20', '--set', 'sim.horizon=1')
        assert code == EXIT_OK
        assert len(RunStorage(tmp_path / 'runs.db').list_runs('simulate')) == 3
        summary = pd.read_csv(tmp_path / 'out' / 'summary.csv')
        assert summary['N'].tolist() == [5, 10, 20]
        for N in (5, 10, 20):
            assert (tmp_path / 'out' / f'N{N}' / 'run_record.json').exists()

    def test_event_log(self, tmp_path):
        code = _run(tmp_path, 'simulate', '--set', 'sim.event_log=true', '--set', 'sim.horizon=1')
        assert code == EXIT_OK
        lines = (tmp_path / 'out' / 'events.jsonl').read_text().splitlines()
        assert all('kind' in json.loads(line) for line in lines)


class TestConfigErrors:
    def test_unknown_key(self, tmp_path):
        assert _run(tmp_path, 'simulate', '--set', 'params.c=1') == EXIT_CONFIG

    def test_bad_value(self, tmp_path):
        assert _run(tmp_path, 'simulate', '--set', 'params.N=ten') == EXIT_CONFIG

    def test_invalid_params(self, tmp_path):
        assert _run(tmp_path, 'simulate', '--set', 'params.a=-1') == EXIT_CONFIG

    def test_bad_replicas(self, tmp_path):
        assert _run(tmp_path, 'isolated', '--replicas', '0') == EXIT_CONFIG

    def test_dual_check_size(self, tmp_path):
        assert _run(tmp_path, 'dual-check', '--set', 'dual.check_N=5') == EXIT_CONFIG

    def test_dual_check_single_slot(self, tmp_path):
        assert _run(tmp_path, 'dual-check', '--set', 'dual.check_N=1', '--set', 'dual.checks=3') == EXIT_OK

    def test_missing_config_file(self, tmp_path):
        assert _run(tmp_path, 'simulate', '--config', str(tmp_path / 'missing.json')) == EXIT_CONFIG

    def test_config_file(self, tmp_path):
        path = tmp_path / 'experiment.json'
        path.write_text(json.dumps({'params': {'a': 0.0, 'b': 0.0}, 'sim': {'K': 2}}))
        assert _run(tmp_path, 'simulate', '--config', str(path)) == EXIT_OK
        assert _record(tmp_path).config['effective_sim']['K'] == 2


class TestCommands:
    def test_isolated(self, tmp_path):
        code = _run(tmp_path, 'isolated', '--replicas', '50', '--set', 'params.N=5', '--set', 'isolated.M=1000000')
        assert code == EXIT_OK
        bounds = pd.read_csv(tmp_path / 'out' / 'bounds.csv')
        assert bounds['export_bound'].iloc[0] == pytest.approx(10.0)
        assert bounds['survival_bound'].iloc[0] == pytest.approx(0.105)
        assert (tmp_path / 'out' / 'occupation.csv').exists()

    def test_percolation(self, tmp_path):
        code = _run(tmp_path, 'percolation', '--replicas', '20',
                    '--set', 'percolation.depth=5', '--set', 'percolation.gamma=0')
        assert code == EXIT_OK
        survival = pd.read_csv(tmp_path / 'out' / 'survival.csv')
        assert survival['survival'].iloc[0] == 1.0
        grid = pd.read_csv(tmp_path / 'out' / 'grid.csv')
        assert list(grid.columns) == ['n', 'z', 'open', 'wet']

    def test_dual_check(self, tmp_path):
        code = _run(tmp_path, 'dual-check', '--set', 'dual.checks=5')
        assert code == EXIT_OK
        frame = pd.read_csv(tmp_path / 'out' / 'duality.csv')
        assert frame['passed'].all()

    def test_meanfield(self, tmp_path):
        code = _run(tmp_path, 'meanfield', '--set', 'params.a=2', '--set', 'params.b=1',
                    '--set', 'meanfield.K=5', '--set', 'meanfield.t_end=1')
        assert code == EXIT_OK
        record = _record(tmp_path)
        assert record.summary['expansion'] is None
        assert record.summary['retreat']['axiomatic']
        assert pd.read_csv(tmp_path / 'out' / 'equilibria.csv')['root'].tolist() == [0.0]

    def test_phase_portrait(self, tmp_path):
        code = _run(tmp_path, 'phase-portrait',
                    '--set', 'portrait.a_min=1', '--set', 'portrait.a_max=1',
                    '--set', 'portrait.b_min=0.5', '--set', 'portrait.b_max=1', '--set', 'portrait.b_step=0.5')
        assert code == EXIT_OK
        frame = pd.read_csv(tmp_path / 'out' / 'portrait.csv')
        assert frame['outcome'].tolist() == ['retreat', 'retreat']

    def test_agreement(self, tmp_path):
        code = _run(tmp_path, 'agreement', '--replicas', '30', '--set', 'dual.N=20', '--set', 'dual.t=0.5')
        assert code == EXIT_OK
        frame = pd.read_csv(tmp_path / 'out' / 'agreement.csv')
        assert frame['N'].iloc[0] == 20
        assert 0.0 <= frame['density'].iloc[0] <= 1.0

    def test_range_study(self, tmp_path):
        code = _run(tmp_path, 'range-study', '--replicas', '20',
                    '--set', 'range.M_values=1,8', '--set', 'range.horizon=0.5')
        assert code == EXIT_OK
        frame = pd.read_csv(tmp_path / 'out' / 'range_study.csv')
        assert frame['M'].tolist() == [1, 8]
        assert (frame['bound'] == 1.0).all()

    def test_range_study_long_range(self, tmp_path):
        code = _run(tmp_path, 'range-study', '--replicas', '1', '--set', 'params.N=5',
                    '--set', 'range.M_values=10000')
        assert code == EXIT_OK
        frame = pd.read_csv(tmp_path / 'out' / 'range_study.csv')
        assert frame['K'].iloc[0] == window_for(ModelParams(a=2, b=1, N=5, M=10 ** 4), 0, 20.0)
        assert frame['K'].iloc[0] < 10 ** 6
        assert frame['bound'].iloc[0] == pytest.approx(10.5 * 10 ** (-4 / 3))

    def test_range_study_window_cap(self, tmp_path):
        code = _run(tmp_path, 'range-study', '--set', 'range.M_values=100', '--set', 'range.max_K=50')
        assert code == EXIT_CAP

    def test_range_study_needs_increasing_ladder(self, tmp_path):
        assert _run(tmp_path, 'range-study', '--set', 'range.M_values=8,1') == EXIT_CONFIG
