"""Desk-scale bridge between a frozen perception module and a toy language model.

The package is organized around small, separately testable pieces:

- ``autograd``: reverse-mode tensor engine on numpy
- ``container``: binary named-tensor checkpoint format
- ``encoder``: strided patch-conv image encoder with pixel shuffle
- ``decoder``: masked cross-attention object-query decoder
- ``prior``: query-to-pixel assignment priors for visual token building
- ``projectors``: visual/text MLP projectors and the round-trip regularizer
- ``llm``: tiny decoder-only transformer with low-rank adapters
- ``losses`` / ``training``: task losses, Adam, staged training loops
- ``metrics``: mask IoU family and grounded-caption matching
- ``data``: synthetic scene and instruction corpus generation
- ``model``: full pipeline assembly
- ``cli``: command-line harness
"""

from . import autograd  # noqa: F401

__all__ = ["autograd"]
__version__ = "0.1.0"
