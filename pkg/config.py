"""
Configuration for promptpan.
Runtime settings come from the environment (optionally a .env file); experiment
settings come from sectioned key/value files parsed into typed dataclasses.
"""

import os
import re
import logging
import configparser
import dataclasses
import typing
from typing import Any, Dict, Type

from dotenv import load_dotenv

from errors import ConfigError

load_dotenv(dotenv_path=os.path.join(os.path.dirname(os.path.abspath(__file__)), '.env'))

LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=getattr(logging, LOG_LEVEL, logging.INFO)
)

logger = logging.getLogger(__name__)


class Settings:
    def __init__(self):
        self.output_root: str = os.getenv('PROMPTPAN_OUTPUT_ROOT', os.path.join(os.getcwd(), 'runs'))
        self.num_threads: int = self._int('PROMPTPAN_NUM_THREADS', 1)
        self.device: str = os.getenv('PROMPTPAN_DEVICE', 'cpu')
        self.deterministic: bool = os.getenv('PROMPTPAN_DETERMINISTIC', '1') not in ('0', 'false', 'no')
        logger.debug("Settings loaded")

    @staticmethod
    def _int(key: str, default: int) -> int:
        val = os.getenv(key)
        if val is None or val == '':
            return default
        try:
            return int(val)
        except ValueError:
            raise ConfigError(f"Env var {key} must be an integer, got {val!r}")


settings = Settings()


# ─── Sectioned experiment files ───────────────────────────────────────────────

_PREFIX_RE = re.compile(r'^(int|float|str|bool|ints|floats|strs|none):(.*)$', re.DOTALL)
_PREFIX_TYPES = {
    'int': int, 'float': float, 'str': str, 'bool': bool,
    'ints': (tuple, int), 'floats': (tuple, float), 'strs': (tuple, str),
}
_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


def _scalar(text: str, kind: type, where: str) -> Any:
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {kind.__name__}")


def _describe(annotation) -> tuple:
    """Return (optional, container, element_type) for a supported field annotation."""
    optional = False
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if len(args) != 1:
            raise ConfigError(f"Unsupported annotation {annotation}")
        optional = True
        annotation = args[0]
        origin = typing.get_origin(annotation)
    if origin is tuple:
        args = [a for a in typing.get_args(annotation) if a is not Ellipsis]
        return optional, tuple, args[0] if args else str
    return optional, None, annotation


def parse_value(raw: str, annotation, where: str) -> Any:
    """
    Parse one config value against its declared annotation.

    Values may carry an explicit type prefix (``int:3``, ``floats:0,0.5``);
    a prefix that disagrees with the declared type is an error.
    """
    text = raw.strip()
    optional, container, kind = _describe(annotation)

    match = _PREFIX_RE.match(text)
    if match:
        prefix, text = match.group(1), match.group(2).strip()
        if prefix == 'none':
            if not optional:
                raise ConfigError(f"{where}: value may not be none")
            return None
        declared = (container, kind) if container else kind
        if _PREFIX_TYPES[prefix] != declared:
            raise ConfigError(f"{where}: type prefix {prefix!r} does not match declared type")

    if optional and text.lower() in ('', 'none'):
        return None
    if container is tuple:
        if text == '':
            return ()
        return tuple(_scalar(part.strip(), kind, where) for part in text.split(','))
    return _scalar(text, kind, where)


def load_sections(path: str, schema: Dict[str, Type]) -> Dict[str, Any]:
    """
    Read a sectioned config file into dataclass instances.

    schema maps section name -> dataclass type. Sections absent from the file
    get the dataclass defaults; unknown sections or keys raise ConfigError.
    Each instance's ``validate()`` runs when defined.
    """
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")

    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#', ';'))
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}")

    for section in parser.sections():
        if section not in schema:
            raise ConfigError(f"{path}: unknown section [{section}]")

    result = {}
    for name, cls in schema.items():
        hints = typing.get_type_hints(cls)
        fields = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in fields:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{name}]")
                kwargs[key] = parse_value(raw, hints[key], f"{path} [{name}] {key}")
        instance = cls(**kwargs)
        if hasattr(instance, 'validate'):
            instance.validate()
        result[name] = instance

    logger.info(f"Config loaded from {path}")
    return result


def dump_sections(sections: Dict[str, Any]) -> str:
    """Render dataclass sections back into the sectioned text format."""
    lines = []
    for name, instance in sections.items():
        lines.append(f"[{name}]")
        for f in dataclasses.fields(instance):
            value = getattr(instance, f.name)
            if value is None:
                text = 'none'
            elif isinstance(value, tuple):
                text = ','.join(str(v) for v in value)
            elif isinstance(value, bool):
                text = 'true' if value else 'false'
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        lines.append("")
    return "\n".join(lines)
