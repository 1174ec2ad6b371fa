"""Collects one PASS/FAIL line per acceptance criterion."""

import functools
import time

RESULTS: dict[int, str] = {}


def criterion(number: int, title: str):
    """Record the outcome of a criterion test; the detail string it returns
    is appended to the line."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                line = f"FAIL  [{number}] {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
                RESULTS[number] = line
                print(line)
                raise
            line = f"PASS  [{number}] {title} ({time.perf_counter() - start:.1f} s){': ' + detail if detail else ''}"
            RESULTS[number] = line
            print(line)

        return run

    return wrap
