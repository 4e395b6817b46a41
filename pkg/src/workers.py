import asyncio
import logging
from typing import Awaitable, Callable, List, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

logger = logging.getLogger(__name__)


async def map_frames(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """Run ``fn`` over ``items`` on at most ``threads`` worker threads.

    Results come back in input order whatever the completion order.
    """
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    semaphore = asyncio.Semaphore(threads)

    async def run_one(item: T) -> R:
        async with semaphore:
            return await asyncio.to_thread(fn, item)

    tasks: List[Awaitable[R]] = [run_one(item) for item in items]
    return list(await asyncio.gather(*tasks))


def run_frames(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """Synchronous entry point; single-threaded runs skip the event loop."""
    if threads <= 1:
        return [fn(item) for item in items]
    logger.debug(f"Processing {len(items)} item(s) on {threads} threads")
    return asyncio.run(map_frames(fn, items, threads))
