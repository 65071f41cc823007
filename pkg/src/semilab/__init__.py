"""Semiclassical eigenfunction laboratory.

Numerical checks of exponential lower bounds for eigenfunction restrictions to
hypersurfaces near the support of a defect measure: Carleman weights, symbol
factorization, the diffusion propagator, model eigenfunction families and
Agmon-distance decay rates.
"""

__version__ = "0.1.0"
