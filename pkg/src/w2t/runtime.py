"""Thread pinning for reproducible timing and deterministic reductions."""

from contextlib import contextmanager

from threadpoolctl import threadpool_limits


@contextmanager
def blas_threads(n: int | None):
    """Limit BLAS/LAPACK worker threads inside the block; None leaves them alone."""
    if n is None:
        yield
    else:
        with threadpool_limits(limits=int(n)):
            yield
