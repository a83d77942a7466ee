import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Optional

from models import DEFAULT_MAX_CONCURRENCY

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Outcome:
    index: int
    value: Any = None
    error: Optional[BaseException] = None

    @property
    def ok(self):
        return self.error is None


class BatchRunner:
    """Bounded worker pool; results come back in submission order"""

    def __init__(self, max_workers=DEFAULT_MAX_CONCURRENCY, name="Worker"):
        if max_workers < 1:
            raise ValueError("max_workers must be at least 1")
        self.max_workers = max_workers
        self.name = name

    def _run_one(self, fn, index, item):
        try:
            return Outcome(index, value=fn(item))
        except Exception as e:
            logger.error(f"{self.name} job {index} failed: {e}")
            return Outcome(index, error=e)

    def run(self, fn, items):
        items = list(items)
        if not items:
            return []
        if self.max_workers == 1 or len(items) == 1:
            return [self._run_one(fn, i, item) for i, item in enumerate(items)]

        workers = min(self.max_workers, len(items))
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix=self.name) as pool:
            futures = [pool.submit(self._run_one, fn, i, item) for i, item in enumerate(items)]
            return [future.result() for future in futures]

    def map(self, fn, items):
        """Like run() but re-raises the first failure"""
        outcomes = self.run(fn, items)
        for outcome in outcomes:
            if not outcome.ok:
                raise outcome.error
        return [outcome.value for outcome in outcomes]
