"""Run independent jobs (samples, realizations, densities) on a thread pool."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Generic, TypeVar

from stark_utils import get_fallback_logger

if TYPE_CHECKING:
    import logging
    from collections.abc import Callable, Sequence

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class JobOutcome(Generic[T, R]):
    """Result of one job: either ``result`` or the ``error`` it raised."""

    item: T
    result: R | None = None
    error: BaseException | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def run_jobs(
    fn: Callable[[T], R],
    items: Sequence[T],
    workers: int = 1,
    logger: logging.Logger | None = None,
    *,
    raise_on_error: bool = True,
) -> list[JobOutcome[T, R]]:
    """Apply fn to every item, in parallel when workers > 1.

    Outcomes are returned in submission order whatever the completion order.
    A failing job is logged with its traceback; the first failure is then
    re-raised, or recorded in its outcome when ``raise_on_error`` is False.
    """
    logger = logger or get_fallback_logger()

    def _run(item: T) -> JobOutcome[T, R]:
        try:
            return JobOutcome(item=item, result=fn(item))
        except Exception as error:
            logger.exception("Job %r failed", item)
            return JobOutcome(item=item, error=error)

    if workers <= 1 or len(items) <= 1:
        outcomes = [_run(item) for item in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(_run, items))

    if raise_on_error:
        for outcome in outcomes:
            if outcome.error is not None:
                raise outcome.error
    return outcomes
