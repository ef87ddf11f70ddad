"""
Resource-aware architecture search for multi-scale networks with early-exit
classifiers, built on a small numpy autograd engine.
"""

__version__ = "0.1.0"
