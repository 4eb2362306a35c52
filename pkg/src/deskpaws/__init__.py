"""Semi-supervised PAWS training at desk scale.

Submodules: ``autodiff`` (reverse-mode engine), ``encoder``, ``objective``,
``support``, ``views``, ``optim``, ``verification``, ``train`` and ``cli``.
"""

__version__ = "0.1.0"
