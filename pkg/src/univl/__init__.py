"""Unified video-language pre-training on a numpy autodiff core, at desk scale.

Submodules are imported lazily by their users so that ``univl.cli`` can fix
BLAS thread counts before numpy loads.
"""

__version__ = "0.1.0"
