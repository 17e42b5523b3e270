"""Hierarchical graph pattern understanding for zero-shot video object segmentation.

A numpy-only reimplementation at desk scale: a small autodiff engine, the
graph encoder and motion-appearance decoder, a synthetic moving-shapes data
generator with analytic flow, and DAVIS-style J/F metrics.
"""
import os

# HGPU_THREADS is the only supported knob; it must be set before numpy loads BLAS.
if "HGPU_THREADS" in os.environ:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["HGPU_THREADS"])

__version__ = "0.1.0"
