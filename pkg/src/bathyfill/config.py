"""Plain-text ``key = value`` config files with ``#`` comments."""

from __future__ import annotations


class ConfigError(ValueError):
    """Bad key, value, or syntax in a config file."""


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def read_config(path):
    with open(path) as fh:
        return parse_config_text(fh.read(), source=str(path))


def get_float(cfg, key, default=None):
    if key not in cfg:
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default
    try:
        return float(cfg[key])
    except ValueError:
        raise ConfigError(f"config key {key!r} is not a number: {cfg[key]!r}") from None


def get_int(cfg, key, default=None):
    value = get_float(cfg, key, default)
    if value != int(value):
        raise ConfigError(f"config key {key!r} must be an integer, got {value}")
    return int(value)


def get_bool(cfg, key, default=None):
    if key not in cfg:
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default
    text = cfg[key].lower()
    if text in ("true", "1", "yes", "on"):
        return True
    if text in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"config key {key!r} is not a boolean: {cfg[key]!r}")


def get_str(cfg, key, default=None, choices=None):
    if key not in cfg:
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        value = default
    else:
        value = cfg[key]
    if choices is not None and value not in choices:
        raise ConfigError(f"config key {key!r} must be one of {sorted(choices)}, got {value!r}")
    return value


def get_floats(cfg, key, default=None, count=None):
    """Comma-separated float list, e.g. ``k = 0.35, 0.12, 0.06``."""
    if key not in cfg:
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return tuple(default)
    try:
        values = tuple(float(part) for part in cfg[key].split(","))
    except ValueError:
        raise ConfigError(f"config key {key!r} is not a comma-separated number list: {cfg[key]!r}") from None
    if count is not None and len(values) != count:
        raise ConfigError(f"config key {key!r} needs {count} values, got {len(values)}")
    return values
