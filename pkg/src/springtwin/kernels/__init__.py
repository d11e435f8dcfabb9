"""Hot compute kernels with two interchangeable backends.

``SPRINGTWIN_BACKEND=numba`` (default) uses numba ``@njit`` loop kernels;
``SPRINGTWIN_BACKEND=numpy`` selects the pure-numpy vectorized fallback.
Both expose the same functions and event-recording protocol:

    forces_into(F, x, v, ...)                -> degenerate-spring count
    collide_inplace(x, v, ...)               -> (pp_count, ground_count, needed_pp, needed_g)
    run_frame(x, v, ...)                     -> diverged substep (-1 if none)
    run_frame_record(x, v, ..., tape bufs)   -> (status, info, pp_end, g_end)
    backward_frame(xbar, vbar, ...)          -> accumulates parameter adjoints

``run_frame_record`` status codes: 0 ok, 1 diverged at substep ``info``,
2 event buffer overflow (``info`` = needed capacity).
Run ``python -m springtwin.bench`` to compare backend throughput.
"""

from __future__ import annotations

import logging
import os

log = logging.getLogger(__name__)

BACKEND = os.environ.get("SPRINGTWIN_BACKEND", "numba").strip().lower()
if BACKEND not in ("numba", "numpy"):
    log.warning("unknown SPRINGTWIN_BACKEND=%r, using numba", BACKEND)
    BACKEND = "numba"

if BACKEND == "numba":
    try:
        from . import numba_backend as _impl
    except ImportError:  # pragma: no cover - numba is a declared dependency
        log.warning("numba unavailable, falling back to the numpy backend")
        BACKEND = "numpy"
        from . import numpy_backend as _impl
else:
    from . import numpy_backend as _impl

forces_into = _impl.forces_into
collide_inplace = _impl.collide_inplace
run_frame = _impl.run_frame
run_frame_record = _impl.run_frame_record
backward_frame = _impl.backward_frame

STATUS_OK = 0
STATUS_DIVERGED = 1
STATUS_OVERFLOW = 2
