"""Pure-Python byte kernels, used when the compiled extension is unavailable."""
from functools import reduce
from operator import xor


def sum_mod256(data: bytes) -> int:
    return sum(data) & 0xFF


def xor_all(data: bytes) -> int:
    return reduce(xor, data, 0)


def find_any(data: bytes, needles: bytes, start: int = 0) -> int:
    """Index of the first byte at or after ``start`` that is in ``needles``, else -1."""
    wanted = set(needles)
    for i in range(start, len(data)):
        if data[i] in wanted:
            return i
    return -1
