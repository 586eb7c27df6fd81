import contextlib
import json
import logging
import time
import traceback
from collections.abc import Iterator
from logging import Formatter, LogRecord
from typing import Any, Optional

try:
    import colorama
except ImportError:
    colorama = None

__doc__ = """Logging utils

- setup_application_logging: dictConfig from the `logging` configuration key
- StepContextRecord: prefix messages with the current epoch and step
- ColorFormatter: colour messages by level (when colorama is installed)
- JSONFormatter: one JSON object per record
"""

LEVEL_COLORS: dict[int, str] = {}
RESET_COLOR = ''
if colorama:
    colorama.just_fix_windows_console()
    LEVEL_COLORS = {
        logging.CRITICAL: colorama.Fore.MAGENTA,
        logging.ERROR: colorama.Fore.RED,
        logging.WARNING: colorama.Fore.YELLOW,
        logging.INFO: colorama.Fore.GREEN,
    }
    RESET_COLOR = colorama.Style.RESET_ALL

_STANDARD_FIELDS = frozenset(logging.makeLogRecord({}).__dict__) | {'context', 'message'}


def setup_application_logging(configuration: Optional[dict]) -> None:
    """Configure logging in UTC from a dictConfig document

    Without a document, a colour handler on stderr is installed unless the
    root logger already has handlers.
    """
    import logging.config

    Formatter.converter = time.gmtime
    StepContextRecord.install()
    if configuration:
        logging.config.dictConfig(configuration)
        return
    root = logging.getLogger()
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(ColorFormatter('%(asctime)s %(levelname)s %(name)s: %(message)s'))
        root.addHandler(handler)
        root.setLevel(logging.INFO)


class StepContextRecord(LogRecord):
    """LogRecord whose message starts with the training position, e.g. [epoch 3 step 120]

    The position is set by the trainer through `StepContextRecord.position()`.
    """

    epoch: Optional[int] = None
    step: Optional[int] = None

    @classmethod
    def install(cls) -> None:
        logging.setLogRecordFactory(cls)

    @classmethod
    def set_position(cls, epoch: Optional[int] = None, step: Optional[int] = None) -> None:
        cls.epoch = epoch
        cls.step = step

    @classmethod
    @contextlib.contextmanager
    def position(cls, epoch: Optional[int] = None, step: Optional[int] = None) -> Iterator[None]:
        previous = (cls.epoch, cls.step)
        cls.set_position(epoch, step)
        try:
            yield
        finally:
            cls.set_position(*previous)

    @classmethod
    def context_string(cls) -> str:
        parts = []
        if cls.epoch is not None:
            parts.append(f"epoch {cls.epoch}")
        if cls.step is not None:
            parts.append(f"step {cls.step}")
        return f"[{' '.join(parts)}]" if parts else ''

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.context = type(self).context_string()

    def getMessage(self) -> str:  # noqa: N802
        msg = super().getMessage()
        return f"{self.context} {msg}" if self.context else msg

    def getRawMessage(self) -> str:  # noqa: N802
        return super().getMessage()


class ColorFormatter(Formatter):
    """Colorize the message based on the level"""

    def formatMessage(self, record):  # noqa: N802
        color = LEVEL_COLORS.get(record.levelno)
        if color:
            # format() recomputes record.message on every call
            record.message = color + record.message + RESET_COLOR
        return super().formatMessage(record)


class JSONFormatter(Formatter):
    """Format records as single-line JSON objects"""

    def format(self, record: LogRecord) -> str:
        d: dict[str, Any] = {
            'time': self.formatTime(record, self.datefmt),
            'level': record.levelname,
            'logger': record.name,
            'message': getattr(record, 'getRawMessage', record.getMessage)(),
        }
        context = getattr(record, 'context', '')
        if context:
            d['context'] = context
        d['location'] = {
            'path_name': record.pathname,
            'module': record.module,
            'line': record.lineno,
            'function': record.funcName,
        }
        if record.process:
            d['process'] = {'id': record.process, 'name': record.processName}
        if record.exc_info:
            d['exception'] = self.formatException(record.exc_info)
        if record.stack_info:
            d['stack_info'] = self.formatStack(record.stack_info)
        extra = {k: v for k, v in record.__dict__.items() if k not in _STANDARD_FIELDS}
        if extra:
            d['extra'] = extra
        return json.dumps(d, default=str)

    def formatException(self, ei):  # noqa: N802
        if not ei:
            return {}
        return {
            'type': ei[0].__name__,
            'message': str(ei[1]),
            'detail': traceback.format_exception(*ei),
        }
