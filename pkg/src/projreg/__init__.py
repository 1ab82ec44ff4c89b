"""Stochastic-projection regularization toolkit.

Penalties built from random projections of the weight vector, the
informative sampling distribution that drives them, analysis routines
that check the penalty's L2 bound and regenerate its geometry data, and
a small training stack demonstrating sparsity induction.
"""

from projreg.numerics import Rng, stable_softmax

__all__ = ["Rng", "stable_softmax"]
__version__ = "0.1.0"
