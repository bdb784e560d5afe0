"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

import time
from contextlib import contextmanager

LINES = []


@contextmanager
def criterion(number, title):
    """Record the outcome of the enclosed block.

    The block may fill ``info["detail"]`` with a short measurement summary;
    any exception marks the criterion failed and is re-raised.
    """
    info = {"detail": ""}
    start = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        _emit(number, "FAIL", title, info, start, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        raise
    _emit(number, "PASS", title, info, start, "")


def _emit(number, status, title, info, start, error):
    elapsed = time.perf_counter() - start
    parts = [f"[{status}] criterion {number:>2}: {title} ({elapsed:.1f}s)"]
    if info["detail"]:
        parts.append(info["detail"])
    if error:
        parts.append(error)
    line = " | ".join(parts)
    LINES.append((number, line))
    print(line)
