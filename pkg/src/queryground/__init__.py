"""Query-conditioned visual grounding on synthetic scenes.

A small end-to-end stack: a tape-based autodiff engine, query-generated
dynamic attention, a hierarchical windowed-attention backbone with
query-aware multiscale fusion, a transformer grounding head, a synthetic
referring-expression benchmark, and training / evaluation tooling.
"""

from .autodiff import Tensor, Tape, precision, set_default_dtype

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "precision", "set_default_dtype", "__version__"]
