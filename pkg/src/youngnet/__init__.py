"""Neural Young-measure solvers for non-convex variational problems.

A residual network F(x, latent) is trained so that its latent gradient
pushes a standard Gaussian forward onto the Young measure at each x.
"""

__version__ = "0.1.0"
