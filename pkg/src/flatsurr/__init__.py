"""Numpy toolkit for studying how surrogate training affects attack transfer.

Modules: ``ndgrad`` (autodiff), ``models``, ``optim`` (SGD, SAM family, SWA),
``sharpness``, ``attacks``, ``data``, ``stats``, ``harness``, ``report``, ``cli``.
"""

__version__ = "0.1.0"
