"""Pose features learned from motion: a small numpy reimplementation.

Modules: ``tensor``/``layers`` (autodiff and layer specs), ``flow``
(coarse-to-fine Horn-Schunck), ``synth``/``corpus`` (stick-figure videos),
``sampler`` (triplet mining), ``nets``, ``trainer``, ``metrics`` and ``cli``.
"""
from ._accel import USE_NUMBA

__version__ = "0.1.0"
__all__ = ["USE_NUMBA", "__version__"]
