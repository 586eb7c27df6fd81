from pathlib import Path
from typing import Union

from omegaconf import DictConfig, OmegaConf

from ..errors import ParseError
from .configuration import expand_dotted_keys

SUPPORTED_EXTENSIONS = ['yaml', 'yml', 'json']

try:
    import toml

    SUPPORTED_EXTENSIONS.append('toml')
except ImportError:
    toml = None  # type: ignore


def read_configuration_file(path: Union[str, Path], *, prefix: str = '') -> DictConfig:
    """Read a YAML, JSON or TOML document into a DictConfig

    Flat dotted keys (`train.beta: 0.5`) are expanded, and the document is
    placed under `prefix` when given.
    """
    path = Path(path)
    try:
        if path.suffix == '.toml':
            if toml is None:
                raise ParseError("install the toml extra to read TOML files", path=str(path))
            conf = OmegaConf.create(toml.load(path))
        else:
            # JSON is a subset of YAML
            conf = OmegaConf.load(path)
    except OSError as e:
        raise ParseError(e.strerror or str(e), path=str(path)) from e
    except ParseError:
        raise
    except Exception as e:
        mark = getattr(e, 'problem_mark', None)
        raise ParseError(
            str(e).splitlines()[0] if str(e) else type(e).__name__,
            path=str(path),
            line=mark.line + 1 if mark else None,
            offset=mark.column + 1 if mark else None,
        ) from e
    if not isinstance(conf, DictConfig):
        raise ParseError("expecting a mapping at the top level", path=str(path))
    conf = expand_dotted_keys(conf)
    for part in reversed(prefix.split('.') if prefix else []):
        conf = OmegaConf.create({part: conf})
    return conf
