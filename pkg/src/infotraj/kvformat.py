"""Flat key-value text format.

One `key = value` pair per line, `#` starts a comment, keys may be
dotted (`section.key`). Used for config files, serialized kernels,
controller gains, plant parameter dumps, and run metadata sidecars.
Floats are written with `repr` so files round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
from pathlib import Path


class KVError(ValueError):
    """Malformed key-value text or a missing/invalid field."""

    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def parse_kv(text: str) -> dict[str, str]:
    """Parse key-value text into an ordered dict of raw string values."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise KVError(f"expected 'key = value', got {line!r}", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise KVError("empty key", line=lineno)
        if key in out:
            raise KVError(f"duplicate key {key!r}", line=lineno, key=key)
        out[key] = value.strip()
    return out


def load_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    try:
        import numpy as np

        if isinstance(value, np.ndarray):
            return ", ".join(repr(float(v)) for v in value.ravel())
        if isinstance(value, (np.floating,)):
            return repr(float(value))
        if isinstance(value, (np.integer,)):
            return str(int(value))
    except ImportError:  # pragma: no cover
        pass
    return str(value)


def format_kv(items: dict) -> str:
    """Serialize a dict in insertion order; deterministic for fixed input."""
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in items.items())


def dump_kv(path, items: dict) -> None:
    Path(path).write_text(format_kv(items), encoding="utf-8", newline="\n")


def kv_hash(items: dict) -> str:
    """SHA-256 over the canonical serialization, for run manifests."""
    canon = "".join(f"{k} = {_format_value(items[k])}\n" for k in sorted(items))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# typed accessors --------------------------------------------------------


def require(kv: dict[str, str], key: str) -> str:
    if key not in kv:
        raise KVError(f"missing required key {key!r}", key=key)
    return kv[key]


def get_str(kv, key, default=None):
    if key not in kv:
        if default is None:
            return require(kv, key)
        return default
    return kv[key]


def get_int(kv, key, default=None):
    raw = kv.get(key)
    if raw is None:
        if default is None:
            require(kv, key)
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise KVError(f"key {key!r}: expected integer, got {raw!r}", key=key) from exc


def get_float(kv, key, default=None):
    raw = kv.get(key)
    if raw is None:
        if default is None:
            require(kv, key)
        return default
    try:
        return float(raw)
    except ValueError as exc:
        raise KVError(f"key {key!r}: expected number, got {raw!r}", key=key) from exc


def get_bool(kv, key, default=None):
    raw = kv.get(key)
    if raw is None:
        if default is None:
            require(kv, key)
        return default
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise KVError(f"key {key!r}: expected boolean, got {raw!r}", key=key)


def get_floats(kv, key, default=None):
    raw = kv.get(key)
    if raw is None:
        if default is None:
            require(kv, key)
        return default
    if not raw.strip():
        return []
    try:
        return [float(tok) for tok in raw.split(",")]
    except ValueError as exc:
        raise KVError(f"key {key!r}: expected comma-separated numbers", key=key) from exc


def get_ints(kv, key, default=None):
    raw = kv.get(key)
    if raw is None:
        if default is None:
            require(kv, key)
        return default
    if not raw.strip():
        return []
    try:
        return [int(tok) for tok in raw.split(",")]
    except ValueError as exc:
        raise KVError(f"key {key!r}: expected comma-separated integers", key=key) from exc


def get_strs(kv, key, default=None):
    raw = kv.get(key)
    if raw is None:
        if default is None:
            require(kv, key)
        return default
    return [tok.strip() for tok in raw.split(",") if tok.strip()]
