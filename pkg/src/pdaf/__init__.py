"""Phoneme-debiased attention for text-independent speaker verification."""

import os

# PDAF_THREADS caps BLAS parallelism; must be set before numpy loads its BLAS
if os.environ.get("PDAF_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["PDAF_THREADS"])

__version__ = "0.1.0"
