"""Plain ``key = value`` config files.

Files have no section headers; ``#`` and ``;`` start comments. Values are
returned as strings and converted by the consumer, so typos surface as
:class:`ConfigError` where the key is used rather than here.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path
from typing import Any, Callable, Mapping

from ._validation import ConfigError

_SECTION = "config"


def parse_config(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=None, strict=True)
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return dict(parser[_SECTION])


def load_config(path: str | Path | None) -> dict[str, str]:
    if path is None:
        return {}
    return parse_config(Path(path).read_text(encoding="utf-8"))


def config_digest(cfg: Mapping[str, Any]) -> str:
    """Content hash of the effective configuration (key order independent)."""
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def get_value(cfg: Mapping[str, str], key: str, convert: Callable[[str], Any], default: Any = ...) -> Any:
    if key not in cfg:
        if default is ...:
            raise ConfigError(f"missing config key {key!r}")
        return default
    try:
        return convert(cfg[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {cfg[key]!r}") from exc


def to_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise ValueError(text)


def prefixed(cfg: Mapping[str, str], prefix: str) -> dict[str, str]:
    """Collect ``prefix.name = value`` entries as ``{name: value}``."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in cfg.items() if k.startswith(head)}
