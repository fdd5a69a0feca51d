"""Order-preserving process map.

Work items are independent and results come back in input order, so the
output never depends on the worker count.
"""

from concurrent.futures import ProcessPoolExecutor


def pmap(fn, items, workers=1):
    """``[fn(x) for x in items]`` on up to ``workers`` processes."""
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def chunks(n, parts):
    """Split ``range(n)`` into at most ``parts`` contiguous (start, stop) pairs."""
    parts = max(1, min(parts, n)) if n else 1
    step, extra = divmod(n, parts)
    out, start = [], 0
    for i in range(parts):
        stop = start + step + (i < extra)
        out.append((start, stop))
        start = stop
    return out
