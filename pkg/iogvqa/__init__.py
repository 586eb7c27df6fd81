from importlib.metadata import PackageNotFoundError, version
from typing import Optional

from .config import DESK_SCALE, PAPER_SCALE, RunOptions, SyntheticSpec, TrainingConfig
from .internal.application import Application
from .internal.configuration import Configuration

__doc__ = """iogvqa

Bias-robust visual question answering on synthetic corpora with a
controlled train/test answer-prior shift: object interaction
self-attention, adversarial debiasing, two-teacher distillation and
weighted fusion at inference.

Configuration sections are registered globally and read with
`iogvqa.get(TrainingConfig)`; the command line entry point is
`iogvqa.cli.main`.
"""

try:
    __version__ = version('iogvqa')
except PackageNotFoundError:
    __version__ = '0.1.0'

#######################################
# APPLICATION CONTEXT

_global_configuration: Configuration = Configuration()
"""The global configuration"""

setup_configuration = _global_configuration.setup_configuration

_application: Optional[Application] = None
get = _global_configuration.get


def set_application(app: Application) -> None:
    """Make the configuration of the application the global one"""
    global _application, get
    if _application is app:
        return
    if _application is not None:
        _application.log.debug("Another application will be loaded")
    _application = app
    get = app.configuration.get


#######################################
# BASIC CONFIGURATION


def _logging_configurations() -> dict:
    formatters = {
        'default': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
            'datefmt': '%Y-%m-%dT%H:%M:%SZ',
        },
        'color': {
            '()': 'iogvqa.logging_util.ColorFormatter',
            'format': '${..default.format}',
            'datefmt': '${..default.datefmt}',
        },
        'json': {'()': 'iogvqa.logging_util.JSONFormatter'},
    }

    def stderr(formatter: str) -> dict:
        return {
            'version': 1,
            'formatters': {formatter: formatters[formatter], 'default': formatters['default']},
            'handlers': {
                'console': {
                    'class': 'logging.StreamHandler',
                    'formatter': formatter,
                    'stream': 'ext://sys.stderr',
                },
            },
            'root': {'handlers': ['console'], 'level': 'INFO'},
            'disable_existing_loggers': False,
        }

    none = {
        'version': 1,
        'handlers': {'null': {'class': 'logging.NullHandler'}},
        'root': {'handlers': ['null'], 'level': 'INFO'},
        'disable_existing_loggers': False,
    }
    return {'default': stderr('color'), 'json': stderr('json'), 'none': none}


def __iogvqa_configuration():
    setup_configuration(SyntheticSpec, prefix='synth')
    setup_configuration(TrainingConfig, prefix='train')
    setup_configuration(RunOptions, prefix='run')
    setup_configuration(
        {
            'logging': '${oc.select:base.logging.default}',
            'base': {
                'logging': _logging_configurations(),
                'train': {'desk': dict(DESK_SCALE), 'paper': dict(PAPER_SCALE)},
            },
        },
        {'logging': "Logging configuration (select with logging=${base.logging.json})"},
    )


__iogvqa_configuration()
__all__ = [
    "Application",
    "Configuration",
    "RunOptions",
    "SyntheticSpec",
    "TrainingConfig",
    "get",
    "set_application",
    "setup_configuration",
]
