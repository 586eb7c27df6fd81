import logging
import os
from collections.abc import Iterable, Sequence
from typing import Optional

from omegaconf import DictConfig, OmegaConf

from . import arg_parser, load_file
from .configuration import Configuration

CONFIG_ENV = 'IOGVQA_CONFIG'
ENV_PREFIXES = ('SYNTH_', 'TRAIN_', 'RUN_')


class Application:
    """Command line application: argument parsing and configuration layers"""

    log = logging.getLogger('iogvqa')
    properties: dict[str, str]
    argument_parser: arg_parser.ArgumentParser
    parsed: Optional[arg_parser.ParseResult] = None

    def __init__(self, *, name: str = 'iogvqa', **properties) -> None:
        """Initialize the application

        Properties: version, description, usage
        """
        self._config: Optional[Configuration] = None
        self.name = name
        self.properties = properties
        self.argument_parser = self._build_argument_parser()

    def _build_argument_parser(self) -> arg_parser.ArgumentParser:
        from .. import _global_configuration  # noqa: TID252

        p = arg_parser.ArgumentParser(_global_configuration.helpers)
        arg_parser.configure_parser(p, app=self)
        return p

    @property
    def command(self) -> Optional[str]:
        return self.parsed.command if self.parsed else None

    @property
    def configuration(self) -> Configuration:
        """The configuration of the application, set up without arguments if necessary"""
        if self._config is None:
            self.setup_configuration()
            assert self._config is not None
        return self._config

    def _get_configurations(self, env_prefixes: Iterable[str]) -> Iterable[DictConfig]:
        """Configuration layers, from lowest to highest precedence

        - package defaults
        - file named by IOGVQA_CONFIG
        - --config and --spec files
        - environment variables with the given prefixes
        - options and key=value arguments
        """
        assert self._config is not None
        yield self._config.c
        path = os.environ.get(CONFIG_ENV)
        if path:
            self.log.debug('Load configuration from %s', path)
            yield load_file.read_configuration_file(path)
        if self.parsed:
            yield from self.parsed.file_configurations()
        prefixes = tuple(env_prefixes)
        if prefixes:
            self.log.debug('Loading env configuration from prefixes %s', prefixes)
            yield self._config.from_environ(prefixes)
        if self.parsed:
            yield from self.parsed.configurations()

    def setup_configuration(
        self,
        *,
        arguments: Sequence[str] = (),
        env_prefixes: Iterable[str] = ENV_PREFIXES,
    ) -> None:
        """Parse the arguments and merge the configuration layers

        May raise ArgumentError, ExitApplication (help, version) or ParseError.
        """
        from .. import _global_configuration  # noqa: TID252

        self.parsed = self.argument_parser.parse_args(list(arguments))
        self._config = Configuration(parent=_global_configuration)
        self._config._merge(list(self._get_configurations(env_prefixes)))
        if self.parsed.result:
            self.parsed.result.run(self)
        if self.parsed.rest:
            raise arg_parser.ArgumentError(f"Too many arguments {self.parsed.rest}")
        OmegaConf.resolve(self._config.c)

    def print_help(self) -> None:
        prop = self.properties
        print(prop.get('usage') or f"usage: {self.name} command [options] [key=value ...]")
        if description := prop.get('description'):
            print()
            print(description)
        print()
        self.argument_parser.print_help()

    def __str__(self) -> str:
        return f"{type(self).__name__}({self.name}; loaded={self._config is not None})"
