"""Small-area estimation toolkit: Fay-Herriot and spatial Fay-Herriot models."""

__version__ = "0.1.0"

from . import bootstrap, direct, fh, pipeline, sfh, simulate, weights  # noqa: F401
