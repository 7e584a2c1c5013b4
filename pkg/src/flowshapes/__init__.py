"""Shape optimization of obstacles in channel flow under uncertain inflow.

The package couples a Taylor-Hood Navier-Stokes solver, adjoint-based
volume-form shape derivatives, Steklov-Poincare gradient representatives,
and a stochastic augmented Lagrangian outer loop with geometric (volume and
barycenter) constraints on the obstacle shapes.
"""

__version__ = "0.1.0"
