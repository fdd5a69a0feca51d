"""``key = value`` config files, typed overrides and run manifests."""

import dataclasses
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

from . import __version__


class ConfigError(ValueError):
    pass


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 text ({exc})") from None
    return parse_config_text(text, path), data


def config_digest(data):
    """sha256 of the raw config bytes (platform independent)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def canonical_text(mapping):
    """Sorted ``key = value`` text; used to digest effective settings."""
    return "".join(f"{k} = {mapping[k]}\n" for k in sorted(mapping))


def convert(value, like, key="value"):
    """Convert a config string to the type of ``like``."""
    try:
        if isinstance(like, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, tuple):
            parts = [p.strip() for p in value.split(",") if p.strip()]
            if like and isinstance(like[0], (int, float)):
                return tuple(float(p) for p in parts)
            return tuple(parts)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {type(like).__name__}") from None
    return value


def apply_overrides(obj, mapping, prefix=""):
    """Return a copy of dataclass ``obj`` with matching keys replaced.

    Keys may be bare field names or ``prefix.field``.  Unused keys are returned
    so callers can report them.
    """
    names = {f.name for f in dataclasses.fields(obj)}
    changes, unused = {}, {}
    for key, value in mapping.items():
        name = key[len(prefix):] if prefix and key.startswith(prefix) else key
        if name in names:
            changes[name] = convert(value, getattr(obj, name), key)
        else:
            unused[key] = value
    try:
        return dataclasses.replace(obj, **changes), unused
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclasses.dataclass
class RunManifest:
    command: list
    config_digest: str
    seed: int
    version: str = __version__
    started: str = dataclasses.field(default_factory=_now)
    finished: str = ""
    outputs: list = dataclasses.field(default_factory=list)

    @classmethod
    def start(cls, config_bytes, seed, argv=None):
        return cls(list(sys.argv if argv is None else argv), config_digest(config_bytes), seed)

    def finish(self, outputs=()):
        self.finished = _now()
        self.outputs = sorted(str(o) for o in outputs)
        return self

    def write(self, path):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def manifest_path(out):
    """Manifest location for an output file, directory or prefix."""
    if os.path.isdir(out):
        return os.path.join(out, "manifest.json")
    return f"{out}.manifest.json"
