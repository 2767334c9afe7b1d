"""Layer-local CNN training with a dimensionality-compression objective.

Kept import-light on purpose: the CLI configures BLAS thread caps before any
numpy-heavy module loads.  Import submodules directly (``sffc.tensor``,
``sffc.trainer``, ...).
"""

__version__ = "0.1.0"
