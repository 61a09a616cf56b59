"""Learning primal-dual solution maps of parametric NLPs.

Networks are trained either with a KKT-residual loss on the full
primal-dual output (the optinn method) or with a quadratic-penalty
objective on the primal output (the pmnn baseline), optionally mixed
with a regression term on precomputed solver solutions.
"""

__version__ = "0.1.0"
