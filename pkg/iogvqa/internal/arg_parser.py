import itertools
from collections.abc import Iterable, Mapping
from typing import Any, Optional, Union, cast

from omegaconf import DictConfig, OmegaConf

from ..errors import ParseError

COMMANDS = {
    'synth': "Generate a synthetic corpus",
    'train': "Train a model",
    'eval': "Evaluate a checkpoint",
    'ablate': "Loss ablation (WCE, +GAN, +distillation, all)",
    'modules': "Module ablation (teachers, OISA and GAN variants)",
    'sweep': "Sweep one hyperparameter",
    'grid': "Grid over two hyperparameters",
    'plot': "Plot a result CSV",
}


def _split(value: str, char: str = '=') -> tuple[str, Optional[str]]:
    vs = value.split(char, 1)
    if len(vs) < 2:
        return vs[0], None
    return vs[0], vs[1]


class ExitApplication(BaseException):
    """Signal to exit the application normally"""

    pass


class ArgumentError(RuntimeError):
    """Argument parsing error"""

    def __init__(self, message: str, *args: object, arg=None) -> None:
        if arg:
            message = f"{arg}: {message}"
        super().__init__(message, *args)


class Action:
    """Action for parsing"""

    def __init__(self, *, metavar: Optional[str] = None, help: Optional[str] = None) -> None:
        self.metavar = metavar
        self.help = help
        self.has_arg = bool(metavar)

    def check_argument(self, value: Optional[str]) -> Optional[str]:
        if not value and self.metavar:
            return "Required value"
        return None

    def handle(self, result: "ParseResult", value: Optional[str]) -> Optional[str]:
        if result.result:
            return "Result is already set"
        result.result = self
        return 'stop'

    def run(self, app):
        raise ArgumentError(f"Cannot execute action {self}")

    def __str__(self) -> str:
        return type(self).__name__


class ShowConfigurationAction(Action):
    """Print the resolved configuration"""

    def handle(self, result, value):
        # the remaining arguments still apply to the shown configuration
        error = super().handle(result, value)
        return None if error == 'stop' else error

    def run(self, app):
        print(OmegaConf.to_yaml(app.configuration.to_dict()))
        raise ExitApplication


class HelpAction(Action):
    def run(self, app):
        app.print_help()
        raise ExitApplication


class VersionAction(Action):
    def run(self, app):
        print(f"{app.name} {app.properties.get('version') or ''}".strip())
        raise ExitApplication


class CommandAction(Action):
    """Positional subcommand"""

    def check_argument(self, value):
        if value not in COMMANDS:
            return f"Unknown command {value}"
        return None

    def handle(self, result, value):
        if result.command:
            return f"Command already set to {result.command}"
        result.command = value
        return None


class ConfigurationAction(Action):
    """Positional key=value override"""

    def check_argument(self, value):
        if not value or '=' not in value:
            return f"Argument should be in format {self.metavar}"
        return None

    def handle(self, result, value):
        result._add_config(value)


class ConfigurationFileAction(Action):
    """Load a configuration file, optionally under a prefix"""

    def __init__(self, *, prefix: str = '', **kw) -> None:
        super().__init__(**kw)
        self.prefix = prefix

    def check_argument(self, value):
        if not value:
            return 'Missing filename for configuration file'
        return None

    def handle(self, result, value):
        from .load_file import read_configuration_file

        try:
            result._add_file(read_configuration_file(value, prefix=self.prefix))
        except ParseError as e:
            return str(e)
        return None


class OptionAction(Action):
    """Set a configuration key from the option value"""

    def __init__(self, *, key: str, **kw) -> None:
        super().__init__(**kw)
        self.key = key

    def handle(self, result, value):
        result._add_config(f"{self.key}={value}")


class ListOptionAction(OptionAction):
    """Set a configuration key to a comma separated list of numbers"""

    def check_argument(self, value):
        try:
            [float(v) for v in (value or '').split(',')]
        except ValueError:
            return f"Expecting comma separated numbers, got {value}"
        return None

    def handle(self, result, value):
        items = ','.join(v.strip() for v in value.split(','))
        result._add_config(f"{self.key}=[{items}]")


class SetAction(Action):
    """Flag which sets fixed configuration values"""

    def __init__(self, *, values: Mapping[str, Any], **kw) -> None:
        super().__init__(**kw)
        self.values = dict(values)

    def handle(self, result, value):
        conf = OmegaConf.create({})
        for key, v in self.values.items():
            OmegaConf.update(conf, key, v)
        result._add_config(conf)


class SeedAction(Action):
    """--seed sets the seed of the run, the corpus and the training"""

    def check_argument(self, value):
        if not (value or '').isdigit():
            return f"Expecting a non-negative integer, got {value}"
        return None

    def handle(self, result, value):
        seed = int(value)
        result._add_config({section: {'seed': seed} for section in ('run', 'synth', 'train')})


class ParseResult:
    """The result of argument parsing"""

    result: Optional[Action]
    command: Optional[str]
    rest: list[str]
    _files: list[DictConfig]
    _config: list[Union[str, DictConfig]]

    def __init__(self) -> None:
        self.result = None
        self.command = None
        self.rest = []
        self._files = []
        self._config = []

    def _add_file(self, value: DictConfig) -> None:
        self._files.append(value)

    def _add_config(self, value: Union[DictConfig, dict, str]) -> None:
        if isinstance(value, dict):
            value = OmegaConf.create(value)
        elif not isinstance(value, (DictConfig, str)):
            raise ArgumentError(f"Invalid configuration type {type(value)}")
        self._config.append(value)

    def file_configurations(self) -> Iterable[DictConfig]:
        """Configuration files, in the order given"""
        yield from self._files

    def configurations(self) -> Iterable[DictConfig]:
        """Options and key=value overrides, in the order given"""
        for typ, conf in itertools.groupby(self._config, type):
            if issubclass(typ, DictConfig):
                yield from cast(Iterable[DictConfig], conf)
            else:
                yield OmegaConf.from_dotlist(list(cast(Iterable[str], conf)))

    def __repr__(self) -> str:
        return f"(command={self.command}, result={self.result}, config={self._config})"


class ArgumentParser:
    """Parses the command line into a command and configuration layers"""

    _opt_actions: dict[str, Action]
    _pos_actions: list[Action]
    help_messages: Mapping[str, str]

    def __init__(self, help_messages: Mapping[str, str] = {}) -> None:
        self._opt_actions = {}
        self._pos_actions = []
        self.help_messages = help_messages or {}

    def parse_args(self, arguments: list[str]) -> ParseResult:
        result = ParseResult()
        arguments = list(arguments)
        arguments.reverse()
        while arguments:
            arg = arguments.pop()
            if arg == '--':
                break
            value = None
            is_opt = arg.startswith('-')
            if is_opt and '=' in arg:
                arg, value = _split(arg)
                if not arg.startswith('--') and len(arg) != 2:
                    raise ArgumentError("Short option must be alone with a value", arg=arg)
            if is_opt:
                action = self._opt_actions.get(arg)
                if not action:
                    raise ArgumentError('Unrecognized option', arg=arg)
                if value is None and action.has_arg:
                    if not arguments:
                        raise ArgumentError(f"Missing value {action.metavar}", arg=arg)
                    value = arguments.pop()
                elif value is not None and not action.has_arg:
                    raise ArgumentError("Option takes no value", arg=arg)
                error = action.check_argument(value)
                if error:
                    raise ArgumentError(error, arg=arg)
                action_result = action.handle(result, value)
            else:
                value = arg
                arg = None  # type: ignore
                action_result = f"Unrecognized argument: {value}"
                for action in self._pos_actions:
                    if not action.check_argument(value):
                        action_result = action.handle(result, value)
                        break
            if action_result == 'stop':
                break
            if action_result:
                raise ArgumentError(action_result, arg=arg)
        arguments.reverse()
        result.rest += arguments
        return result

    def add_argument(self, action_class: type[Action], *names: str, **kw) -> None:
        """Add an option (names starting with '-') or a positional handler"""
        action = action_class(**kw)
        is_opt = False
        for name in names:
            if not name.startswith('-'):
                continue
            self._opt_actions[name] = action
            is_opt = True
        if not is_opt:
            if 'metavar' not in kw:
                raise ArgumentError(f"Missing metavar for action {action}")
            self._pos_actions.append(action)

    def print_help(self) -> None:
        lines = []
        tpl = "  {:<27} {}"
        lines.append('commands:')
        for name, description in COMMANDS.items():
            lines.append(tpl.format(name, description))
        lines.append('')
        lines.append('options:')
        visited = set()
        for action in self._opt_actions.values():
            if action in visited:
                continue
            visited.add(action)
            option_line = ', '.join(o for o, a in self._opt_actions.items() if a is action)
            if action.metavar:
                option_line += ' ' + action.metavar
            if len(option_line) > 27:
                lines.append(tpl.format(option_line, ''))
                if action.help:
                    lines.append((30 * ' ') + action.help)
            else:
                lines.append(tpl.format(option_line, action.help or ''))
        lines.append('')
        lines.append('configuration keys (key=value):')
        for name, help in self.help_messages.items():
            lines.append(tpl.format(name, help))
        print(*lines, sep='\n')


def configure_parser(parser: ArgumentParser, *, app=None) -> None:
    """Add the iogvqa commands and options"""
    from ..config import DESK_SCALE, PAPER_SCALE

    parser.add_argument(CommandAction, metavar='command', help="Command to run")
    parser.add_argument(ConfigurationAction, metavar='key=value', help="Configuration items")
    parser.add_argument(HelpAction, '-h', '--help', help="Show the help")
    if app and app.properties.get('version'):
        parser.add_argument(VersionAction, '-V', '--version', help="Show the version")
    parser.add_argument(
        ShowConfigurationAction, '-C', '--configuration', help="Show the configuration"
    )
    parser.add_argument(
        ConfigurationFileAction,
        '-f',
        '--config',
        metavar='path',
        help="Load configuration from file (flat dotted keys allowed)",
    )
    parser.add_argument(
        ConfigurationFileAction,
        '--spec',
        prefix='synth',
        metavar='path',
        help="Load the synthetic corpus parameters from file",
    )
    for option, key, metavar, help in [
        ('--out', 'run.out', 'dir', "Output directory"),
        ('--data', 'run.data', 'dir', "Dataset directory"),
        ('--split', 'run.split', 'split', "Evaluated split (train, val, test)"),
        ('--ckpt', 'run.ckpt', 'path', "Checkpoint file"),
        ('--head', 'run.head', 'head', "Evaluated head (fused, bias, destination...)"),
        ('--seeds', 'run.seeds', 'n', "Number of seeds of ablations and sweeps"),
        ('--param', 'run.param', 'name', "Swept parameter"),
        ('--param-y', 'run.param_y', 'name', "Second grid parameter"),
        ('--csv', 'run.csv', 'path', "Result CSV to plot"),
        ('--image', 'run.image', 'path', "Plot image file"),
        ('--beta', 'train.beta', 'float', "Destination weight at inference"),
        ('--alpha1', 'train.alpha1', 'float', "Weight of the weighted cross-entropy"),
        ('--alpha2', 'train.alpha2', 'float', "Weight of the distillation loss"),
        ('--lambda1', 'train.lambda1', 'float', "Weight of the q->v transformer loss"),
        ('--lambda2', 'train.lambda2', 'float', "Weight of the v->q transformer loss"),
    ]:
        parser.add_argument(OptionAction, option, key=key, metavar=metavar, help=help)
    parser.add_argument(
        ListOptionAction, '--values', key='run.values', metavar='v1,v2', help="Swept values"
    )
    parser.add_argument(
        ListOptionAction,
        '--values-y',
        key='run.values_y',
        metavar='v1,v2',
        help="Values of the second grid parameter",
    )
    parser.add_argument(SeedAction, '--seed', metavar='n', help="Seed of data and training")
    parser.add_argument(
        SetAction, '--no-gan', values={'train.enable_gan': False}, help="Disable the GAN"
    )
    parser.add_argument(
        SetAction,
        '--no-distill',
        values={'train.enable_distill': False},
        help="Disable distillation",
    )
    parser.add_argument(
        SetAction, '--no-oisa', values={'train.enable_oisa': False}, help="Disable OISA"
    )
    parser.add_argument(
        SetAction,
        '--desk-scale',
        values={f"train.{k}": v for k, v in DESK_SCALE.items()},
        help="Small batch, hidden and noise sizes",
    )
    parser.add_argument(
        SetAction,
        '--paper-scale',
        values={f"train.{k}": v for k, v in PAPER_SCALE.items()},
        help="Full batch, hidden and noise sizes",
    )

