"""Continual binary segmentation with multi-scale neural cellular automata.

A frozen NCA backbone plus tiny per-domain adapter heads, trained one domain
at a time, with variance-based head selection at inference and a transfer
(BWT/FWT) evaluation harness on synthetic multi-domain benchmarks.
"""

__version__ = "0.1.0"

from .tensor import Rng, Tape, Tensor

__all__ = ["Rng", "Tape", "Tensor", "__version__"]
