"""Order-preserving process-parallel map used for per-scene work."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Sequence


def ordered_map(fn: Callable[..., Any], items: Sequence[tuple], jobs: int = 1) -> list[Any]:
    """``[fn(*args) for args in items]``, optionally spread over ``jobs`` processes.

    Results come back in input order, so aggregates do not depend on ``jobs``.
    """
    if jobs <= 1 or len(items) <= 1:
        return [fn(*args) for args in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*items)))
