"""Small shared helpers: deterministic RNG keying, date features, formatting."""

from __future__ import annotations

import datetime as dt
import hashlib
import os

import numpy as np

from .errors import ConfigError


def derive_key(*parts) -> int:
    """Derive a 128-bit PRNG key from arbitrary labelled parts.

    Stable across processes and platforms (unlike builtin hash), so every
    random stream in the package can be reproduced from (seed, purpose).
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def keyed_rng(*parts) -> np.random.Generator:
    """Counter-based generator keyed by derive_key(*parts)."""
    return np.random.Generator(np.random.Philox(key=derive_key(*parts)))


def parse_date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError as exc:
        raise ConfigError(f"not an ISO-8601 date: {text!r}") from exc


def day_of_week(day: dt.date) -> int:
    """Monday=0 .. Sunday=6."""
    return day.weekday()


def week_of_month(day: dt.date) -> int:
    """1-based week index within the month: days 1-7 -> 1, 8-14 -> 2, ..."""
    return (day.day - 1) // 7 + 1


def fmt_float(x: float) -> str:
    """Round-trip-safe decimal rendering (17 significant digits)."""
    return format(float(x), ".17g")


def worker_count() -> int:
    """Worker cap from SLAMC_THREADS; defaults to 1 (sequential)."""
    raw = os.environ.get("SLAMC_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"SLAMC_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)
