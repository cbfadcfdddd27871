"""
SCD Siamese - stochastic channel decorrelation for fully-convolutional Siamese matchers.
"""

# Expose the ``app.main`` submodule (the CLI entry point is ``app.main:main``).
# Re-exporting the ``main`` function here would shadow the submodule attribute.
from app import main

__all__ = ["main"]
