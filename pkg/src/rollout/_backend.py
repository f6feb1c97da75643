"""Kernel backend selection.

The compiled extension is used when it imports cleanly. Setting the
environment variable ``ROLLOUT_BACKEND=python`` forces the numpy fallback.
"""

import logging
import os

logger = logging.getLogger(__name__)

HAS_COMPILED = False

if os.environ.get("ROLLOUT_BACKEND", "").lower() != "python":
    try:
        from rollout import _kernels as _impl

        HAS_COMPILED = True
    except ImportError:  # pragma: no cover - depends on build
        logger.debug("compiled kernels unavailable, using numpy fallback")

if not HAS_COMPILED:
    from rollout import _kernels_py as _impl

from rollout import _kernels_py as python_kernels

twoway_residual = _impl.twoway_residual
monotone_sequences = _impl.monotone_sequences
# a BLAS matrix product beats any loop we could compile
cross_moments = python_kernels.cross_moments

BACKEND = "compiled" if HAS_COMPILED else "python"

__all__ = [
    "BACKEND",
    "HAS_COMPILED",
    "cross_moments",
    "monotone_sequences",
    "python_kernels",
    "twoway_residual",
]
