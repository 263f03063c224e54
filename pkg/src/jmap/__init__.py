"""Tensor-based morphometry: registration, Jacobian maps, a 3D CNN and Grad-CAM."""
import os

# A single BLAS thread keeps floating-point reduction order, and so every
# checkpoint and report byte, identical between runs. Set the variables
# before importing numpy to override.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
