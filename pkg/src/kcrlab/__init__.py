"""Kernel-complexity-regularized, channel-pruned vision transformer lab.

Set ``KCR_THREADS`` before the first import to cap the BLAS worker count.
"""
import os as _os

_threads = _os.environ.get("KCR_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
