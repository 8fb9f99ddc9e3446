"""Flat ``key = value`` text configs.

Lines are ``key = value``; ``#`` starts a comment; ``include <path>`` pulls
in another file (relative to the including file) whose keys can be
overridden by later lines.  Keys listed in ``REPEATABLE`` accumulate into
lists instead of overriding.
"""

from __future__ import annotations

from pathlib import Path

REPEATABLE = {"block", "goal"}


class ConfigError(ValueError):
    pass


def parse_text(text: str, base: Path | None = None, _seen: frozenset = frozenset()) -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            target = Path(line[len("include ") :].strip())
            if base is not None and not target.is_absolute():
                target = base / target
            _merge(out, load(target, _seen))
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = key.strip(), value.strip()
        if key in REPEATABLE:
            out.setdefault(key, [])
            out[key].append(value)  # type: ignore[union-attr]
        else:
            out[key] = value
    return out


def _merge(into: dict, other: dict):
    for k, v in other.items():
        if k in REPEATABLE:
            into.setdefault(k, [])
            into[k].extend(v)
        else:
            into[k] = v


def load(path: str | Path, _seen: frozenset = frozenset()) -> dict[str, object]:
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, path.parent, _seen | {path})
