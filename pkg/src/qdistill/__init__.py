"""Desk-scale INT8 post-training quantization lab for distilled encoder-decoder transcribers."""

import os

# Single-threaded BLAS keeps reruns bit-reproducible and avoids oversubscription
# when grid cells run in parallel. Best effort: only takes hold if numpy has not
# been imported yet in this process.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
del _var

__version__ = "0.1.0"
