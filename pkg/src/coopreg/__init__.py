"""Networked cooperative regulators for transport PIDE-ODE agents.

Submodules
----------
netgraph     communication topology in lower block-triangular form
sigmodel     signal models, internal models, Jordan machinery
agentdef     agent classes, grid functions, the heavy-rope model
numcore      shared numerics (quadrature, Sylvester/Riccati, placement)
localdesign  per-group decoupling, backstepping kernel, local gains
coopdesign   cooperative decoupling, simultaneous stabilization
regverify    robust regulation certificates for the uncertain network
simloop      method-of-lines closed-loop simulation
cli          command line entry points
"""

__version__ = "0.1.0"
