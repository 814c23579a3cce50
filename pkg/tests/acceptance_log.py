"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

from __future__ import annotations

from contextlib import contextmanager

LINES: dict[int, str] = {}


@contextmanager
def criterion(number: int, title: str):
    """Record PASS if the block finishes, FAIL (with the reason) if it raises."""
    notes: list[str] = []
    try:
        yield notes
    except BaseException as e:
        reason = str(e).splitlines()[0] if str(e) else type(e).__name__
        LINES[number] = f"criterion {number:>2} FAIL  {title}: {'; '.join(notes + [reason])}"
        print(LINES[number])
        raise
    LINES[number] = f"criterion {number:>2} PASS  {title}: {'; '.join(notes)}"
    print(LINES[number])
