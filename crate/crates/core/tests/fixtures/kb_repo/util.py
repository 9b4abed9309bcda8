def helper(a, b):
    def inner(c):
        return c
    return inner(a) + b


def other():
    pass
