"""Replica scheduling: run independent replicas serially or in worker processes.

Every replica owns its own seed substreams, so results do not depend on the
worker count or on completion order; outputs are returned in replica order
and merged by the caller.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def default_workers() -> int:
    return os.cpu_count() or 1


def map_replicas(fn, arg_lists, workers: int = 1) -> list:
    """[fn(*args) for args in arg_lists], optionally across processes."""
    arg_lists = list(arg_lists)
    if workers <= 1 or len(arg_lists) <= 1:
        return [fn(*a) for a in arg_lists]
    with ProcessPoolExecutor(max_workers=min(workers, len(arg_lists))) as ex:
        return list(ex.map(fn, *zip(*arg_lists)))
