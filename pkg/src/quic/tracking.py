"""Self-declared accounting of batch-scaled buffers allocated by op kernels.

Kernels report two kinds of allocations while a measurement region is
active:

* ``transient(n)`` — scratch that is freed before the kernel returns
  (wrapped around the buffer's lifetime, so sequentially reused buffers
  count once, not K times);
* ``note(n)`` — intermediate activations that stay alive until the end of
  the measured region (op outputs feeding later ops).

Only buffers whose size scales with the batch dimension are declared;
parameter-sized scratch (weight upcasts, symmetrized interaction
matrices) is excluded because it is bounded by the parameter storage
reported separately. When no region is active every call is a no-op.
"""

from contextlib import contextmanager

_active = None


class AllocationTracker:
    """Running count and high-water mark of declared elements."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def _grow(self, n):
        self.current += n
        if self.current > self.peak:
            self.peak = self.current

    def _shrink(self, n):
        self.current -= n


@contextmanager
def transient(n_elements):
    """Declare a scratch buffer of ``n_elements`` for the enclosed scope."""
    t = _active
    if t is None:
        yield
        return
    t._grow(n_elements)
    try:
        yield
    finally:
        t._shrink(n_elements)


def note(n_elements):
    """Declare an intermediate activation held until the region ends."""
    t = _active
    if t is not None:
        t._grow(n_elements)


@contextmanager
def measure():
    """Activate a tracker for the enclosed region and yield it."""
    global _active
    prev = _active
    tracker = AllocationTracker()
    _active = tracker
    try:
        yield tracker
    finally:
        _active = prev
