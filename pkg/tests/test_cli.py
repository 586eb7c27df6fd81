import json

import pandas as pd
import pytest

from iogvqa import cli
from iogvqa import eval_metrics as em
from iogvqa.errors import TrainingAborted

SYNTH = ['synth.num_train=48', 'synth.num_test=24', 'synth.object_feature_dim=8', 'synth.seed=3']
TINY = [
    'train.epochs=1',
    'train.batch_size=16',
    'train.hidden=8',
    'train.d_a=4',
    'train.d_w=6',
    'train.object_dim=8',
    'train.attention_d=4',
    'train.noise_dim=4',
    'train.teacher_epochs=1',
    'train.val_fraction=0.25',
]


@pytest.fixture(scope='function')
def data_dir(tmp_path):
    path = tmp_path / 'data'
    assert cli.main(['synth', '--out', str(path), *SYNTH]) == cli.EXIT_OK
    return path


@pytest.fixture(scope='function')
def run_dir(tmp_path, data_dir):
    path = tmp_path / 'run'
    assert cli.main(['train', '--data', str(data_dir), '--out', str(path), *TINY]) == 0
    return path


def read_run(path):
    return json.loads((path / 'run.json').read_text())


def test_synth(data_dir):
    for split in ('train', 'test'):
        assert (data_dir / split / 'meta.json').exists()
    run = read_run(data_dir)
    assert run['meta']['command'] == 'synth'
    assert run['synth']['num_train'] == 48
    assert run['meta']['seed'] == run['train']['seed']


def test_train(run_dir):
    assert (run_dir / 'best.ckpt').exists()
    metrics = pd.read_csv(run_dir / 'metrics.csv')
    assert len(metrics) > 0
    run = read_run(run_dir)
    assert run['meta']['command'] == 'train'
    assert run['train']['hidden'] == 8
    assert len(run['meta']['fingerprint']) == 40


def test_replay_run_file(tmp_path, data_dir, run_dir):
    other = tmp_path / 'replay'
    arguments = ['train', '--config', str(run_dir / 'run.json'), '--out', str(other)]
    assert cli.main(arguments) == 0
    assert (other / 'best.ckpt').read_bytes() == (run_dir / 'best.ckpt').read_bytes()
    assert read_run(other)['meta']['fingerprint'] != read_run(run_dir)['meta']['fingerprint']


@pytest.mark.parametrize("split", ['test', 'val'])
def test_eval(run_dir, data_dir, split, capsys):
    arguments = ['eval', '--ckpt', str(run_dir / 'best.ckpt'), '--data', str(data_dir)]
    assert cli.main([*arguments, '--split', split]) == 0
    assert 'All' in capsys.readouterr().out
    report = json.loads((run_dir / f"eval-{split}" / 'report.json').read_text())
    assert report['head'] == 'fused'
    assert 0 <= report['overall'] <= 1


def test_eval_head_and_beta(run_dir, data_dir, tmp_path):
    out = tmp_path / 'eval'
    arguments = ['eval', '--ckpt', str(run_dir / 'best.ckpt'), '--data', str(data_dir)]
    assert cli.main([*arguments, '--beta', '0.25', '--out', str(out)]) == 0
    assert json.loads((out / 'report.json').read_text())['beta'] == 0.25
    assert cli.main([*arguments, '--head', 'teacher_v', '--out', str(out)]) == 0


def test_eval_uses_checkpoint_beta(tmp_path, data_dir):
    run_dir = tmp_path / 'run-beta'
    arguments = ['train', '--data', str(data_dir), '--out', str(run_dir), *TINY]
    assert cli.main([*arguments, 'train.beta=0.4']) == 0
    out = tmp_path / 'eval'
    arguments = ['eval', '--ckpt', str(run_dir / 'best.ckpt'), '--data', str(data_dir)]
    assert cli.main([*arguments, '--out', str(out)]) == 0
    assert json.loads((out / 'report.json').read_text())['beta'] == 0.4


def test_train_resume(tmp_path, data_dir, run_dir):
    out = tmp_path / 'resumed'
    arguments = ['train', '--data', str(data_dir), '--ckpt', str(run_dir / 'best.ckpt')]
    assert cli.main([*arguments, '--out', str(out), *TINY]) == 0
    assert (out / 'best.ckpt').exists()
    assert read_run(out)['meta']['status'] == 'ok'


def test_train_resume_other_config(tmp_path, data_dir, run_dir):
    arguments = ['train', '--data', str(data_dir), '--ckpt', str(run_dir / 'best.ckpt')]
    out = tmp_path / 'resumed'
    assert cli.main([*arguments, '--out', str(out), *TINY, 'train.hidden=4']) == cli.EXIT_FAILURE
    assert read_run(out)['meta']['status'] == 'failed'


def test_failed_run_file(tmp_path, data_dir, monkeypatch):
    from iogvqa import trainer

    def failing(*args, **kwargs):
        raise TrainingAborted("non-finite loss", component='wce')

    monkeypatch.setattr(trainer, 'train', failing)
    out = tmp_path / 'run'
    assert cli.main(['train', '--data', str(data_dir), '--out', str(out), *TINY]) == 2
    meta = read_run(out)['meta']
    assert meta['status'] == 'failed'
    assert meta['error'].startswith('TrainingAborted')
    assert not (out / 'best.ckpt').exists()


def test_sweep(tmp_path, data_dir):
    out = tmp_path / 'sweep'
    arguments = ['sweep', '--data', str(data_dir), '--param', 'beta', '--values', '0,1']
    assert cli.main([*arguments, '--out', str(out), *TINY]) == 0
    frame = pd.read_csv(out / 'sweep.csv')
    assert frame['value'].tolist() == [0, 1]
    assert (out / 'sweep.png').exists()


def test_ablate_incomplete(tmp_path, data_dir, monkeypatch):
    original = em.train

    def failing(train_data, val_data, config):
        if config.enable_gan:
            raise TrainingAborted("non-finite loss", component='generator')
        return original(train_data, val_data, config)

    monkeypatch.setattr(em, 'train', failing)
    out = tmp_path / 'ablate'
    arguments = ['ablate', '--data', str(data_dir), '--out', str(out), *TINY]
    assert cli.main(arguments) == cli.EXIT_FAILURE
    frame = pd.read_csv(out / 'ablation.csv')
    assert len(frame) == 2


def test_plot(tmp_path):
    rows = [
        {'variant': v, 'overall': 0.5, 'yesno': 0.6, 'number': 0.3, 'other': 0.4, 'seed': 0}
        for v in em.MODULE_VARIANTS
    ]
    csv = tmp_path / 'modules.csv'
    em.write_csv(pd.DataFrame(rows, columns=em.CSV_SCHEMAS['modules']), csv)
    image = tmp_path / 'plots' / 'modules.svg'
    assert cli.main(['plot', '--csv', str(csv), '--image', str(image)]) == 0
    assert image.exists()
    assert read_run(image.parent)['meta']['command'] == 'plot'


def test_seed_option(tmp_path):
    out = tmp_path / 'data'
    assert cli.main(['synth', '--out', str(out), '--seed', '5', *SYNTH[:3]]) == 0
    run = read_run(out)
    assert run['meta']['seed'] == 5
    assert run['synth']['seed'] == 5


@pytest.mark.parametrize(
    "arguments",
    [
        ['--help'],
        ['-V'],
        ['-C'],
    ],
)
def test_exit_ok(arguments, capsys):
    assert cli.main(arguments) == cli.EXIT_OK
    assert capsys.readouterr().out


@pytest.mark.parametrize(
    "arguments",
    [
        [],
        ['--bogus'],
        ['train'],
        ['sweep', '--out', 'x', '--data', 'y'],
        ['train', '--out', 'x', 'train.beta=2'],
        ['synth', '--out', 'x', 'synth.num_train=-1'],
        ['eval', '--split', 'other', '--ckpt', 'x'],
    ],
)
def test_exit_invalid(arguments, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(arguments) == cli.EXIT_INVALID


def test_plot_empty_csv(tmp_path):
    csv = tmp_path / 'empty.csv'
    csv.write_text('')
    arguments = ['plot', '--csv', str(csv), '--image', str(tmp_path / 'x.png')]
    assert cli.main(arguments) == cli.EXIT_INVALID


def test_invalid_config_file(tmp_path):
    path = tmp_path / 'bad.yaml'
    path.write_text('train: [\n')
    assert cli.main(['train', '--config', str(path)]) == cli.EXIT_INVALID


def test_missing_checkpoint(tmp_path, data_dir):
    arguments = ['eval', '--ckpt', str(tmp_path / 'none.ckpt'), '--data', str(data_dir)]
    assert cli.main(arguments) == cli.EXIT_FAILURE
