import functools


def trace(fn):
    @functools.wraps(fn)
    def wrapper(*args):
        return fn(*args)
    return wrapper


@trace
@functools.lru_cache(maxsize=None)
def cached(n):
    return n * 2


async def fetch(url):
    return url
