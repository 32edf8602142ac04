"""Collects one verdict per acceptance criterion for the terminal summary."""
import contextlib

RESULTS = {}


@contextlib.contextmanager
def criterion(name):
    """Record PASS when the block finishes, FAIL with the reason otherwise.

    The block fills ``notes`` with measured values for the summary line.
    """
    notes = {}
    try:
        yield notes
    except BaseException as exc:
        detail = "; ".join(f"{k}={v}" for k, v in notes.items())
        RESULTS[name] = (False, f"{detail} | {type(exc).__name__}: {exc}".strip(" |"))
        raise
    RESULTS[name] = (True, "; ".join(f"{k}={v}" for k, v in notes.items()))
