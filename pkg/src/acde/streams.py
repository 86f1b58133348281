"""Counter-based random substreams.

Draw number ``r`` of a Monte Carlo run with master seed ``s`` always comes
from block ``r // block_rows`` of the stream keyed by ``(s, *key, block)``,
so results do not depend on how blocks are scheduled across threads and runs
can be extended without disturbing earlier draws.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

_BLOCK_ELEMENTS = 1 << 20


def substream(seed, *key):
    """Independent generator for the counter tuple ``key`` under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def block_rows(width):
    return max(256, _BLOCK_ELEMENTS // max(1, width))


def map_uniform_blocks(fn, seed, reps, width, key=(), threads=1):
    """Apply ``fn`` to consecutive ``(rows, width)`` blocks of U(0, 1) draws.

    Returns the list of ``fn`` results in block order.
    """
    rows = block_rows(width)
    starts = range(0, reps, rows)

    def run(b_start):
        b, start = b_start
        rng = substream(seed, *key, b)
        return fn(rng.random((min(rows, reps - start), width)))

    jobs = list(enumerate(starts))
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, jobs))
    return [run(j) for j in jobs]
