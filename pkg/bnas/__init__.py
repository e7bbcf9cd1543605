"""bnas: search, train and deploy binary convolutional architectures.

Run as `bnas search` after install, or `python -m bnas search` from a checkout.
Importing the package imports no submodule, so `from bnas import tensor`
does not pull in rich or matplotlib.
"""
__all__ = [
    "binarize",
    "cells",
    "cli",
    "config",
    "data",
    "deploy",
    "experiments",
    "functional",
    "layers",
    "optim",
    "plot",
    "report",
    "search",
    "searchspace",
    "tensor",
    "trainer",
    "utils",
]
__version__ = "0.1.0"
