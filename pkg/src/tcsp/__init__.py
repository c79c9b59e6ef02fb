"""Compositional semantic parsing toolkit.

Nested intent/slot trees, their flattened three-layer label decomposition, a
fertility-based non-autoregressive neural parser with layered and
sequence-to-sequence baselines, and training/evaluation harnesses.
"""

__version__ = "0.1.0"
