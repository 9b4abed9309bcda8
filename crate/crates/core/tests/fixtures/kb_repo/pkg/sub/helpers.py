import math

PI2 = math.pi * 2


class Counter:
    total = 0

    def incr(self):
        Counter.total += 1


def circumference(r):
    return PI2 * r
