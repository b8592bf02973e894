"""
Decorators for timing long-running calls.

Training runs and sweep children are wrapped with :func:`timed` so their
wall-clock duration can be reported next to their results without ever
entering the (bit-reproducible) metrics log.
"""

from __future__ import annotations

import functools
import logging
import time
from typing import Any, Callable, Tuple

logger = logging.getLogger(__name__)


def timed(func: Callable[..., Any] | None = None, *,
          announce: bool = False) -> Any:
    """
    Measure the execution time of a function.

    Usable bare (``@timed``) or with options (``@timed(announce=True)``).

    :param func: The function to time.
    :type func: Callable[..., Any] | None
    :param announce: If True, logs the duration at INFO level and returns the
                     plain result. If False, returns a ``(result, seconds)``
                     tuple.
    :type announce: bool
    :return: Wrapped function that measures execution time.
    :rtype: Callable[..., Any]
    """
    def decorator(inner: Callable[..., Any]) -> Callable[..., Any]:
        @functools.wraps(inner)
        def wrapper(*args, **kwargs) -> Any | Tuple[Any, float]:
            start: float = time.perf_counter()
            result: Any = inner(*args, **kwargs)
            duration: float = time.perf_counter() - start

            if announce:
                logger.info("'%s' took %.3f seconds to run", inner.__name__, duration)
                return result

            return result, duration
        return wrapper

    if func is not None:
        return decorator(func)
    return decorator
