"""Differentiable 3D Gaussian splatting for sparse-view CT projection synthesis."""

import os

import numba

# the bundled TBB is too old for numba; try OpenMP first
if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

__version__ = "0.1.0"
