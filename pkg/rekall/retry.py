import logging
import time
from collections.abc import Callable
from functools import wraps
from typing import Any, TypeVar, cast

F = TypeVar("F", bound=Callable[..., Any])

logger = logging.getLogger(__name__)


def retry(
    num_retries: int = 3,
    sleep_between: float = 1,
    exceptions: tuple[type[BaseException], ...] = (Exception,),
) -> Callable[[F], F]:
    """
    Decorator to retry a function on failure.

    :param num_retries: Number of attempts before giving up
    :type num_retries: int
    :param sleep_between: Seconds to sleep between attempts
    :type sleep_between: float
    :param exceptions: Exception types that trigger another attempt
    :type exceptions: Tuple[Type[BaseException], ...]

    :return: Decorated function
    :rtype: Callable[[F], F]
    """

    def decorator(func: F) -> F:
        @wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            attempts = 0
            while attempts < num_retries:
                try:
                    return func(*args, **kwargs)
                except exceptions as e:
                    attempts += 1
                    if attempts == num_retries:
                        raise
                    logger.warning(
                        f"{func.__name__} failed ({e}); retrying, attempt "
                        f"{attempts + 1}/{num_retries}"
                    )
                    time.sleep(sleep_between)

        return cast(F, wrapper)

    return decorator
