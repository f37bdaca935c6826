import json

import pandas as pd
import pytest
import yaml

import run
import workbench as wb
from data_ingest import DatasetSplit
from system_config import ConfigManager
from workbench import RunStatus, VecProbeWorkbench


def _overrides(out, **extra):
    overrides = {
        'paths.output_dir': str(out),
        'paths.tracks': str(out / 'scenario' / 'tracks.csv'),
        'paths.map': str(out / 'scenario' / 'map.json'),
        'horizons.t_f': 10,
        'model.hidden_dim': 8,
        'model.num_layers': 1,
        'train.epoch_count': 1,
        'train.batch_size': 8,
        'synth.agent_count': 2,
        'synth.duration_frames': 30,
        'synth.recording_count': 3,
        'attribution.steps': 2,
        'attribution.max_cases': 2,
        'attribution.sweep_sigmas': [0.0, 10.0],
        'render.max_cases': 1,
        'cross.seeds': [0, 1],
        'seed': 5,
    }
    overrides.update(extra)
    return overrides


def _workbench(out, **extra):
    return VecProbeWorkbench(ConfigManager(overrides=_overrides(out, **extra)))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    bench = _workbench(out)
    for command in ('synth', 'ingest', 'train', 'evaluate', 'attribute', 'sweep', 'render'):
        bench.run(command)
    return out, bench


def test_pipeline_writes_every_artifact(pipeline):
    out, bench = pipeline
    for name in ('scenario/tracks.csv', 'scenario/map.json', 'dataset.joblib', 'dataset_summary.json',
                 'model.joblib', 'loss_history.csv', 'metrics.json', 'attributions.csv',
                 'attribution_summary.json', 'baseline_sweep.csv'):
        assert (out / name).exists(), name
    assert len(list(out.glob('scene_*.svg'))) == 1
    assert [r.status for r in bench.history] == [RunStatus.COMPLETED] * 7


def test_manifests_record_config_and_artifacts(pipeline):
    out, bench = pipeline
    manifest = json.loads((out / 'train_manifest.json').read_text(encoding='utf-8'))
    assert manifest['command'] == 'train'
    assert manifest['config_hash'] == bench.config_manager.config_hash()
    assert manifest['seed'] == 5
    assert manifest['artifacts'] == ['loss_history.csv', 'model.joblib']
    assert 'numpy' in manifest['versions']


def test_metrics_include_constant_velocity_reference(pipeline):
    out, _ = pipeline
    metrics = json.loads((out / 'metrics.json').read_text(encoding='utf-8'))
    assert set(metrics['model']) == {'minADE', 'minFDE', 'MR', 'case_count'}
    # 合成直線車道上等速外插就是真值
    assert metrics['constant_velocity']['minADE'] < 1e-9


def test_attribution_outputs(pipeline):
    out, _ = pipeline
    frame = pd.read_csv(out / 'attributions.csv')
    assert list(frame.columns) == ['case_key', 'polyline_id', 'node_index', 'feature_index', 'ig']
    assert frame['case_key'].nunique() == 2
    summary = json.loads((out / 'attribution_summary.json').read_text(encoding='utf-8'))
    assert summary['steps'] == 2 and summary['case_count'] == 2
    sweep = pd.read_csv(out / 'baseline_sweep.csv')
    assert sweep['sigma'].tolist() == [0.0, 10.0]


def test_svg_is_written(pipeline):
    out, _ = pipeline
    svg = next(out.glob('scene_*.svg')).read_text(encoding='utf-8')
    assert svg.lstrip().startswith('<?xml') and '<svg' in svg


def test_training_is_byte_identical_across_runs(tmp_path):
    outputs = []
    for name in ('a', 'b'):
        out = tmp_path / name
        bench = _workbench(out)
        for command in ('synth', 'ingest', 'train'):
            bench.run(command)
        outputs.append(out)
    a, b = outputs
    for artifact in ('scenario/tracks.csv', 'model.joblib', 'loss_history.csv'):
        assert (a / artifact).read_bytes() == (b / artifact).read_bytes(), artifact


def test_cross_matrix_is_byte_identical_across_runs(tmp_path):
    texts = []
    for name in ('a', 'b'):
        out = tmp_path / name
        _workbench(out, **{'synth.recording_count': 4}).run('cross')
        texts.append((out / 'cross_matrix.json').read_text(encoding='utf-8'))
    assert texts[0] == texts[1]
    matrix = json.loads(texts[0])
    assert set(matrix['cells']) == {'straight-lane', 'curved-lane'}
    gap = pd.read_csv(tmp_path / 'a' / 'generalization_gap.csv')
    assert 'train_average_MR' in gap.columns


def test_failed_command_removes_partial_artifacts(tmp_path, monkeypatch):
    bench = _workbench(tmp_path)
    bench.run('synth')

    def broken_summary(self):
        raise RuntimeError("disk full")

    monkeypatch.setattr(DatasetSplit, 'summary', broken_summary)
    with pytest.raises(RuntimeError):
        bench.run('ingest')
    assert not (tmp_path / 'dataset.joblib').exists()
    assert bench.status is RunStatus.FAILED
    assert 'disk full' in bench.history[-1].error
    assert (tmp_path / 'scenario' / 'tracks.csv').exists()


def test_status_callbacks(tmp_path):
    bench = _workbench(tmp_path)
    seen = []
    bench.add_callback('status_change', seen.append)
    bench.run('synth')
    assert seen == [RunStatus.RUNNING, RunStatus.COMPLETED]
    with pytest.raises(ValueError):
        bench.add_callback('unknown', seen.append)
    with pytest.raises(ValueError):
        bench.run('deploy')


def test_checkpoint_and_dataset_outside_output_dir(tmp_path):
    out = tmp_path / 'out'
    checkpoint = tmp_path / 'elsewhere' / 'my_model.joblib'
    dataset = tmp_path / 'cache' / 'ds.joblib'
    bench = _workbench(out, **{'paths.checkpoint': str(checkpoint), 'paths.dataset': str(dataset)})
    for command in ('synth', 'ingest', 'train'):
        bench.run(command)
    assert checkpoint.exists() and dataset.exists()
    assert not (out / 'my_model.joblib').exists() and not (out / 'ds.joblib').exists()

    bench.config_manager.validate_config('evaluate')
    bench.run('evaluate')
    assert (out / 'metrics.json').exists()
    manifest = json.loads((out / 'train_manifest.json').read_text(encoding='utf-8'))
    assert str(checkpoint) in manifest['artifacts']


def test_synth_seed_is_derived_from_root_seed(tmp_path):
    a = wb.synth_spec_from(_workbench(tmp_path).config)
    b = wb.synth_spec_from(_workbench(tmp_path, seed=6).config)
    assert a.seed != b.seed


# ========== 命令列 ==========

def test_cli_success_returns_zero(tmp_path):
    assert run.main(['synth', '--out', str(tmp_path), '--seed', '2']) == run.EXIT_OK
    assert (tmp_path / 'scenario' / 'tracks.csv').exists()
    assert (tmp_path / 'synth_manifest.json').exists()


def test_cli_unknown_config_key_exits_with_two(tmp_path):
    config = tmp_path / 'config.yaml'
    config.write_text("train.batchsize: 8\n", encoding='utf-8')
    assert run.main(['synth', '--config', str(config), '--out', str(tmp_path)]) == run.EXIT_CONFIG


def test_cli_missing_checkpoint_exits_with_two(tmp_path):
    assert run.main(['evaluate', '--out', str(tmp_path)]) == run.EXIT_CONFIG


def test_cli_bad_tracks_file_exits_with_three(tmp_path):
    tracks = tmp_path / 'tracks.csv'
    tracks.write_text("case_id,track_id,frame_id\n1,1,0\n", encoding='utf-8')
    map_path = tmp_path / 'map.json'
    map_path.write_text('{"polylines": []}', encoding='utf-8')
    config = tmp_path / 'config.yaml'
    config.write_text(f"paths.tracks: {tracks}\npaths.map: {map_path}\n", encoding='utf-8')
    assert run.main(['ingest', '--config', str(config), '--out', str(tmp_path / 'out')]) == run.EXIT_DATA
    assert not (tmp_path / 'out' / 'dataset.joblib').exists()


def test_cli_rejects_unknown_command():
    with pytest.raises(SystemExit):
        run.main(['deploy'])


def test_cli_attribute_rerun_is_byte_identical(tmp_path):
    out = tmp_path / 'out'
    config = tmp_path / 'config.yaml'
    config.write_text(yaml.safe_dump(_overrides(out)), encoding='utf-8')
    argv = ['--config', str(config), '--seed', '5']
    for command in ('synth', 'ingest', 'train', 'attribute'):
        assert run.main([command] + argv) == run.EXIT_OK, command
    first = {name: (out / name).read_bytes() for name in ('attributions.csv', 'attribution_summary.json')}

    assert run.main(['attribute'] + argv) == run.EXIT_OK
    for name, content in first.items():
        assert (out / name).read_bytes() == content, name
