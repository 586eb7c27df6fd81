import hashlib
import json
import logging
import sys
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Callable, Optional

import pydantic
from omegaconf import MissingMandatoryValue, OmegaConf

from . import __version__, set_application
from .config import RunOptions, SyntheticSpec, TrainingConfig
from .errors import ParseError, ValidationError
from .internal.application import Application
from .internal.arg_parser import ArgumentError, ExitApplication

__doc__ = """Command line of iogvqa

    iogvqa synth --spec spec.yaml --out data/
    iogvqa train --data data/ --config cfg.yaml --out runs/a
    iogvqa eval --ckpt runs/a/best.ckpt --data data/ --split test
    iogvqa ablate --data data/ --seeds 5 --out runs/abl
    iogvqa sweep --data data/ --param beta --values 0,0.5,1 --out runs/beta
    iogvqa plot --csv runs/abl/ablation.csv --image runs/abl/ablation.png

Each command writes `run.json` into its output directory; the file holds
the resolved configuration and can be passed back with `--config`.
"""

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILURE = 2

USAGE = "usage: iogvqa command [options] [key=value ...]"


def _content_fingerprint(data: bytes) -> str:
    """Hash of the content as git computes it for a blob"""
    header = f"blob {len(data)}\0".encode()
    return hashlib.sha1(header + data).hexdigest()


def write_run_file(
    app: Application,
    out: Path,
    started: float,
    *,
    status: str = 'ok',
    error: Optional[str] = None,
) -> Path:
    """Write run.json: the resolved configuration with a `meta` section"""
    configuration = app.configuration
    resolved = configuration.to_dict()
    resolved.pop('meta', None)
    content = json.dumps(resolved, sort_keys=True, default=str).encode()
    run = configuration.get(RunOptions)
    data = {
        **resolved,
        'meta': {
            'command': app.command,
            'seed': run.seed if run.seed is not None else configuration.get('train.seed', int),
            'fingerprint': _content_fingerprint(content),
            'wall_time': round(time.monotonic() - started, 3),
            'version': __version__,
            'status': status,
        },
    }
    if error is not None:
        data['meta']['error'] = error
    out.mkdir(parents=True, exist_ok=True)
    path = out / 'run.json'
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + '\n')
    log.info('Wrote %s', path)
    return path


def _command_line_value(app: Application, key: str):
    """Value of a key set by an option or a key=value argument, None otherwise"""
    value = None
    for conf in app.parsed.configurations() if app.parsed else ():
        found = OmegaConf.select(conf, key, default=None)
        if found is not None:
            value = found
    return value


def _required(value, option: str):
    if value is None or value == []:
        raise ArgumentError("Required for this command", arg=option)
    return value


#######################################
# COMMANDS


def _load_splits(run: RunOptions, config: TrainingConfig):
    from .data_synth import read_corpus, split_validation

    corpus = read_corpus(_required(run.data, '--data'))
    train_data = corpus['train']
    val_data = None
    if config.val_fraction > 0:
        train_data, val_data = split_validation(train_data, config.val_fraction, config.seed)
    return train_data, val_data, corpus['test']


def synth(app: Application) -> tuple[Path, int]:
    """Generate a corpus with a train/test answer-prior shift"""
    from .data_synth import generate, prior_shift_report, write_corpus

    configuration = app.configuration
    run = configuration.get(RunOptions)
    out = _required(run.out, '--out')
    spec = configuration.get(SyntheticSpec)
    train_data, test_data = generate(spec)
    for qtype, distance in prior_shift_report(train_data, test_data).items():
        log.info('Answer prior shift %s: TV %.3f', qtype.value, distance)
    write_corpus(train_data, test_data, out)
    log.info('Wrote %d train and %d test instances to %s', len(train_data), len(test_data), out)
    return out, EXIT_OK


def train(app: Application) -> tuple[Path, int]:
    """Train a model, write the best checkpoint and the loss values"""
    from . import trainer

    configuration = app.configuration
    run = configuration.get(RunOptions)
    out = _required(run.out, '--out')
    config = configuration.get(TrainingConfig)
    train_data, val_data, _ = _load_splits(run, config)
    state = None
    if run.ckpt is not None:
        state = trainer.resume_state(trainer.load(run.ckpt, expected_config=config), train_data)
        log.info('Resume from %s (epoch %d)', run.ckpt, state.epoch)
    metrics = trainer.MetricsLog()
    checkpoint = trainer.train(train_data, val_data, config, metrics=metrics, state=state)
    out.mkdir(parents=True, exist_ok=True)
    trainer.save(checkpoint, out / 'best.ckpt')
    metrics.write(out / 'metrics.csv')
    log.info('Checkpoint of epoch %d saved to %s', checkpoint.epoch, out / 'best.ckpt')
    return out, EXIT_OK


def evaluate(app: Application) -> tuple[Path, int]:
    """Evaluate a checkpoint on a split, print the report and write it as JSON"""
    from . import eval_metrics
    from .checkpoint import load
    from .data_synth import find_split, read_corpus

    configuration = app.configuration
    run = configuration.get(RunOptions)
    ckpt = _required(run.ckpt, '--ckpt')
    checkpoint = load(ckpt)
    corpus = read_corpus(_required(run.data, '--data'))
    dataset = find_split(
        corpus,
        run.split,
        val_fraction=checkpoint.config.val_fraction,
        seed=checkpoint.config.seed,
    )
    beta = _command_line_value(app, 'train.beta')
    beta = checkpoint.config.beta if beta is None else float(beta)
    report = eval_metrics.evaluate(checkpoint, dataset, beta, head=run.head)
    print(report.pretty())
    out = run.out or ckpt.parent / f"eval-{run.split}"
    out.mkdir(parents=True, exist_ok=True)
    (out / 'report.json').write_text(report.model_dump_json(indent=2) + '\n')
    return out, EXIT_OK


def _write_table(frame, out: Path, name: str) -> None:
    from .eval_metrics import plot, write_csv

    csv_path = out / f"{name}.csv"
    write_csv(frame, csv_path)
    if frame.empty:
        log.warning('Nothing to plot in %s', csv_path)
        return
    plot(csv_path, out / f"{name}.png")


def ablate(app: Application) -> tuple[Path, int]:
    """Loss ablation: WCE only, +GAN, +distillation and both"""
    from .eval_metrics import run_ablation

    configuration = app.configuration
    run = configuration.get(RunOptions)
    out = _required(run.out, '--out')
    config = configuration.get(TrainingConfig)
    result = run_ablation(*_load_splits(run, config), config, seeds=run.seeds)
    _write_table(result.to_frame(), out, 'ablation')
    if not result.complete:
        log.error('Incomplete ablation, failed: %s', ', '.join(r.label for r in result.failed))
        return out, EXIT_FAILURE
    return out, EXIT_OK


def modules(app: Application) -> tuple[Path, int]:
    """Module ablation: single teachers, OISA and GAN variants"""
    from .eval_metrics import run_module_ablation

    configuration = app.configuration
    run = configuration.get(RunOptions)
    out = _required(run.out, '--out')
    config = configuration.get(TrainingConfig)
    result = run_module_ablation(*_load_splits(run, config), config, seeds=run.seeds)
    _write_table(result.to_frame(), out, 'modules')
    return out, EXIT_OK


def sweep(app: Application) -> tuple[Path, int]:
    """Sweep one hyperparameter"""
    from .eval_metrics import run_sweep

    configuration = app.configuration
    run = configuration.get(RunOptions)
    out = _required(run.out, '--out')
    param = _required(run.param, '--param')
    values = _required(run.values, '--values')
    config = configuration.get(TrainingConfig)
    table = run_sweep(param, values, config, *_load_splits(run, config), seeds=run.seeds)
    _write_table(table.to_frame(), out, 'sweep')
    return out, EXIT_OK


def grid(app: Application) -> tuple[Path, int]:
    """Grid over two hyperparameters"""
    from .eval_metrics import run_grid

    configuration = app.configuration
    run = configuration.get(RunOptions)
    out = _required(run.out, '--out')
    param_x = _required(run.param, '--param')
    param_y = _required(run.param_y, '--param-y')
    values_x = _required(run.values, '--values')
    values_y = _required(run.values_y, '--values-y')
    config = configuration.get(TrainingConfig)
    table = run_grid(
        param_x,
        values_x,
        param_y,
        values_y,
        config,
        *_load_splits(run, config),
        seeds=run.seeds,
    )
    _write_table(table.to_frame(), out, 'grid')
    return out, EXIT_OK


def plot(app: Application) -> tuple[Path, int]:
    """Render a result CSV"""
    from . import eval_metrics

    run = app.configuration.get(RunOptions)
    csv_path = _required(run.csv, '--csv')
    image = _required(run.image, '--image')
    eval_metrics.plot(csv_path, image)
    return run.out or image.parent, EXIT_OK


COMMANDS: dict[str, Callable[[Application], tuple[Path, int]]] = {
    'synth': synth,
    'train': train,
    'eval': evaluate,
    'ablate': ablate,
    'modules': modules,
    'sweep': sweep,
    'grid': grid,
    'plot': plot,
}


#######################################
# MAIN


def _setup(app: Application, arguments: Sequence[str]) -> None:
    from .logging_util import setup_application_logging

    app.setup_configuration(arguments=arguments)
    set_application(app)
    setup_application_logging(app.configuration.get('logging', default=None))


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run a command and return the exit code

    0 on success, 1 on invalid arguments or configuration, 2 on failures.
    """
    app = Application(
        name='iogvqa',
        version=__version__,
        description=__doc__.strip().splitlines()[0],
        usage=USAGE,
    )
    arguments = sys.argv[1:] if argv is None else list(argv)
    try:
        _setup(app, arguments)
    except ExitApplication:
        return EXIT_OK
    except (ArgumentError, MissingMandatoryValue, ParseError) as e:
        log.error(e)
        print(USAGE, file=sys.stderr)
        return EXIT_INVALID
    if app.command is None:
        app.print_help()
        return EXIT_INVALID

    started = time.monotonic()
    command = COMMANDS[app.command]
    log.info('Start %s', app.command)
    try:
        out, code = command(app)
    except ArgumentError as e:
        log.error(e)
        print(USAGE, file=sys.stderr)
        return EXIT_INVALID
    except (ValidationError, pydantic.ValidationError) as e:
        log.error('Failed (%s) %s', type(e).__name__, e)
        log.debug('Traceback', exc_info=True)
        _write_failed_run(app, started, e)
        return EXIT_INVALID
    except Exception as e:
        log.error('Failed (%s) %s', type(e).__name__, e)
        log.debug('Traceback', exc_info=True)
        _write_failed_run(app, started, e)
        return EXIT_FAILURE
    write_run_file(app, out, started, status='ok' if code == EXIT_OK else 'incomplete')
    log.info('End %s (exit %d)', app.command, code)
    return code


def _write_failed_run(app: Application, started: float, error: Exception) -> None:
    try:
        out = app.configuration.get(RunOptions).out
        if out is not None:
            write_run_file(
                app, out, started, status='failed', error=f"{type(error).__name__}: {error}"
            )
    except Exception:
        log.warning('Cannot write the run file of the failed command', exc_info=True)
