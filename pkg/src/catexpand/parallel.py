"""Worker-count resolution shared by the data-parallel stages."""

from __future__ import annotations

import os


def resolve_threads(threads: int | None = None) -> int:
    """``threads`` if given, else ``$CATEXPAND_THREADS``, else the CPU count."""
    if threads is None:
        env = os.environ.get("CATEXPAND_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ValueError(f"CATEXPAND_THREADS must be an integer, got {env!r}") from None
    if threads is None:
        threads = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1
    return max(1, int(threads))
