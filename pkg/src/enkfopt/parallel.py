"""Fan-out of independent forward evaluations to a thread pool.

Results always come back in task order, so anything computed from them is
independent of the worker count. Threads (not processes) are used because
the heavy lifting happens inside numpy, which releases the GIL, and the
models need no pickling.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import ConfigError, ParticleEvaluationError


def default_workers() -> int:
    return os.cpu_count() or 1


class ParticleScheduler:
    """Reusable pool; ``workers == 1`` evaluates serially in the caller's thread."""

    def __init__(self, workers: int | None = None):
        workers = default_workers() if workers is None else int(workers)
        if workers < 1:
            raise ConfigError(f"worker budget must be >= 1, got {workers}")
        self.workers = workers
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def map(self, fn, items, labels=None):
        """Apply ``fn`` to every item; returns a list in input order.

        The first failing task (in index order) is re-raised as
        ParticleEvaluationError carrying its label (default: its index).
        """
        items = list(items)
        labels = list(range(len(items))) if labels is None else list(labels)
        if self._pool is None:
            results = []
            for item, label in zip(items, labels):
                try:
                    results.append(fn(item))
                except ParticleEvaluationError:
                    raise
                except Exception as exc:
                    raise ParticleEvaluationError(
                        f"evaluation of particle {label} failed: {exc}", label) from exc
            return results
        futures = [self._pool.submit(fn, item) for item in items]
        results = []
        for fut, label in zip(futures, labels):
            try:
                results.append(fut.result())
            except ParticleEvaluationError:
                raise
            except Exception as exc:
                raise ParticleEvaluationError(
                    f"evaluation of particle {label} failed: {exc}", label) from exc
        return results

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def schedule_particle_evaluations(tasks, workers: int = 1):
    """Run zero-argument callables on up to ``workers`` threads, results in task order."""
    with ParticleScheduler(workers) as sched:
        return sched.map(lambda task: task(), tasks)
