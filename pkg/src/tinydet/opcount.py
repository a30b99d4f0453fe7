"""Global arithmetic-operation accounting.

Every kernel-backed or elementwise tensor op adds its multiply-accumulate
estimate to a process-wide counter. The counter exists so callers can
prove structural claims ("this toggle does not change the compute of that
path") rather than to be a precise FLOP meter.
"""

_total = 0


def add(n):
    global _total
    _total += int(n)


def total():
    return _total


def reset():
    global _total
    _total = 0
