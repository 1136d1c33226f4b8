"""Line-oriented run configuration.

Files hold ``key = value`` pairs under ``[section]`` headers, one pair
per line; ``#`` starts a comment. Sections map to CLI subcommands, and
every key must exist in the consuming command's schema: misspelled keys
are a hard error, never silently ignored. The canonical serialization
(sorted sections and keys) feeds the run manifest hash, so reruns of an
identical configuration produce identical lock files.
"""

import hashlib

REQUIRED = object()


class ConfigError(Exception):
    pass


def parse_config_text(text):
    """Parse to a {section: {key: raw string value}} dict."""
    out = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"line {lineno}: empty section name")
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key before any [section] header")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{section}]")
        out[section][key] = value
    return out


def load_config(path):
    with open(path) as fh:
        return parse_config_text(fh.read())


def _parse_bool(raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def coerce(section, values, schema):
    """Type and validate one section against its schema.

    schema: {key: (type, default)} with ``REQUIRED`` as the default for
    mandatory keys. Returns a fully populated typed dict.
    """
    out = {}
    for key, raw in values.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        typ = schema[key][0]
        if isinstance(raw, str):
            try:
                out[key] = _parse_bool(raw) if typ is bool else typ(raw)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
        else:
            out[key] = raw
    for key, (_, default) in schema.items():
        if key in out:
            continue
        if default is REQUIRED:
            raise ConfigError(f"[{section}] missing required key {key!r}")
        out[key] = default
    return out


def format_section(section, values):
    """Canonical text: sorted keys, booleans lowercased."""
    lines = [f"[{section}]"]
    for key in sorted(values):
        v = values[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(section, values):
    return hashlib.sha256(format_section(section, values).encode()).hexdigest()
