"""Sparse feedback control of mean-field opinion dynamics via binary interactions."""

import os

import numba

# TBB in this image is too old for numba and only triggers a warning.
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

__version__ = "0.1.0"
