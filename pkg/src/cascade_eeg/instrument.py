"""Process-wide call counters used to audit which machinery a run touched."""

from collections import Counter

counters: Counter = Counter()


def bump(name: str, n: int = 1) -> None:
    counters[name] += n


def reset() -> None:
    counters.clear()


def snapshot() -> dict[str, int]:
    return dict(counters)
