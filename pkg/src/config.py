# Copyright 2025 The gdc-propagation authors.

"""Run configuration and seeded random streams.

The options, their types and defaults are declared in ``config.yaml`` next to this module.
A run configuration is flat ``key=value`` text; lines starting with ``#`` are comments.
"""

import logging
import zlib
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Iterator, Optional, Union

import numpy as np
import yaml

from errors import ConfigError

logger = logging.getLogger(__name__)

SCHEMA_PATH = Path(__file__).with_name("config.yaml")

STREAM_NAMES = ("init", "noise", "mask", "probe", "shuffle")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer of the run seed.

    Adding a new stream name never perturbs the draws of the existing ones.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def load_schema(path: Path = SCHEMA_PATH) -> dict[str, dict[str, Any]]:
    """Read the option declarations."""
    return yaml.safe_load(path.read_text())["options"]


def _coerce(key: str, kind: str, value: Any) -> Any:
    try:
        match kind:
            case "int":
                return int(value)
            case "float":
                return float(value)
            case "boolean":
                if isinstance(value, bool):
                    return value
                text = str(value).strip().lower()
                if text not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return text in ("true", "1", "yes")
            case "string":
                return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"option '{key}' expects a {kind}, got {value!r}") from None
    raise ConfigError(f"option '{key}' declares unknown type '{kind}'")


def parse_pairs(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines, skipping blanks and ``#`` comments."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        pairs[key.strip()] = value.strip()
    return pairs


class RunConfig(Mapping):
    """Read-only effective configuration: schema defaults overlaid with user values."""

    def __init__(
        self,
        values: Optional[Mapping[str, Any]] = None,
        schema: Optional[dict[str, dict[str, Any]]] = None,
    ):
        self._schema = load_schema() if schema is None else schema
        self._values = {key: opt.get("default") for key, opt in self._schema.items()}
        for key, value in (values or {}).items():
            if key not in self._schema:
                raise ConfigError(f"unknown option '{key}'")
            self._values[key] = value
        for key, opt in self._schema.items():
            if self._values[key] is not None:
                self._values[key] = _coerce(key, opt["type"], self._values[key])

    @classmethod
    def from_text(cls, text: str, **overrides: Any) -> "RunConfig":
        """Build a configuration from ``key=value`` text plus keyword overrides."""
        values: dict[str, Any] = dict(parse_pairs(text))
        values.update({k.replace("_", "-"): v for k, v in overrides.items() if v is not None})
        return cls(values)

    @classmethod
    def from_file(cls, path: Optional[Union[str, Path]], **overrides: Any) -> "RunConfig":
        """Like :meth:`from_text`; a missing path means defaults only."""
        text = Path(path).read_text() if path else ""
        return cls.from_text(text, **overrides)

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def replace(self, **changes: Any) -> "RunConfig":
        """Copy with some options changed; underscores in names map to hyphens."""
        values = dict(self._values)
        values.update({k.replace("_", "-"): v for k, v in changes.items()})
        return RunConfig(values, self._schema)

    def rng(self, name: str) -> np.random.Generator:
        """Named random stream derived from the ``seed`` option."""
        return stream(int(self["seed"]), name)

    def floats(self, key: str) -> tuple[float, ...]:
        """Parse a comma-separated list option."""
        return tuple(float(item) for item in str(self[key]).split(",") if item.strip())

    def to_text(self) -> str:
        """Serialise as ``key=value`` lines readable by :meth:`from_text`."""
        lines = ["# effective configuration"]
        for key in sorted(self._values):
            value = self._values[key]
            if value is None:
                continue
            if isinstance(value, bool):
                value = str(value).lower()
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"
