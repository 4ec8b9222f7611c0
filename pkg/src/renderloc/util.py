"""Small shared helpers: seeding, logging, timing."""

import hashlib
import sys
import time
from contextlib import contextmanager


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts.

    Python's builtin hash() is salted per process, so reproducible runs
    hash a canonical string through sha256 instead.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def log(level: str, **fields):
    """Diagnostic line on stderr: ``LEVEL key=value ...``."""
    parts = [level.upper()]
    for k, v in fields.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        parts.append(f"{k}={v}")
    print(" ".join(parts), file=sys.stderr)


@contextmanager
def stage_timer(timings: dict, stage: str):
    """Accumulate wall time for `stage` into `timings` (seconds)."""
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[stage] = timings.get(stage, 0.0) + (time.perf_counter() - start)
