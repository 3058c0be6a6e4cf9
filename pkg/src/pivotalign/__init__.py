"""Pivot-based alignment of frozen embedding spaces.

Trains two small projection heads that map a frozen image/text encoder
space and a frozen multilingual text encoder space into one shared
512-dim space, using English embeddings as the only anchor.  No paired
image-text or text-text data is needed: pseudo-pairs are soft-retrieved
from fixed memory banks.

Submodules are imported lazily so the command-line entry point can cap
BLAS thread pools before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "alignment",
    "bank",
    "cli",
    "evaluation",
    "numerics",
    "projector",
    "synth",
    "trainer",
)

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
