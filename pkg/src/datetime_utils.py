"""
UTC timestamps for run metadata and error contexts, built on whenever.

Nothing here feeds into training.
"""

import whenever


def utc_now() -> whenever.Instant:
    return whenever.Instant.now()


def utc_now_iso() -> str:
    """``2026-03-01T12:00:00.123Z`` style."""
    return utc_now().format_common_iso()


def elapsed_seconds(since: whenever.Instant) -> float:
    return (utc_now() - since).in_seconds()
